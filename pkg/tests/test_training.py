import math

import numpy as np
import pytest
from scipy.stats import norm

from eegflow import autodiff as ad
from eegflow.gradcheck import check_gradients
from eegflow.layers import ArchitectureConfig, FlowModel, Hartley, build_architecture, flow_forward, randomize
from eegflow.modelio import model_to_bytes
from eegflow.optim import Adam, AdamState, adam_update
from eegflow.prior import ClassConditionalGaussian
from eegflow.signals import SignalDataset, SynthConfig, synth_generate
from eegflow.training import (GaussianBaseline, MixtureRegConfig, NumericalError, PriorRegConfig, TrainConfig,
                              classify, classify_batch, dequantize, estimate_quantization_step,
                              log_likelihoods, mixture_corrected_log_likelihood, mixture_minibatch_step,
                              nll_loss, prior_comparison_gate, prior_comparison_penalty,
                              train_max_likelihood, train_ot)
from eegflow.transport import OTConfig


def identity_model(means, log_stds, shape):
    """Flow that only reorders nothing: a single Hartley layer over T=1 is the identity."""
    prior = ClassConditionalGaussian(np.atleast_2d(np.asarray(means, float)),
                                     np.atleast_2d(np.asarray(log_stds, float)))
    layers = [Hartley()] if shape[1] == 1 else []
    return FlowModel(layers, prior, shape)


def small_dataset(n_per_class=8, seed=0):
    return synth_generate(SynthConfig(n_per_class=n_per_class, n_channels=2, n_times=64,
                                      sample_rate_hz=64.0, seed=seed))


def small_model(seed=0):
    return build_architecture(ArchitectureConfig(2, 64, n_stages=2, kernel_size=3, seed=seed),
                              ["rest", "right_hand"])


class TestDequantize:
    def test_zero_amplitude(self):
        x = np.arange(6.0).reshape(2, 3)
        np.testing.assert_array_equal(dequantize(x, 0.0, np.random.default_rng(0)), x)

    def test_support(self):
        x = np.random.default_rng(1).normal(size=(50, 4))
        out = dequantize(x, 0.5, np.random.default_rng(2))
        assert np.all(out >= x) and np.all(out < x + 0.5)

    def test_mean(self):
        out = dequantize(np.zeros(100000), 0.3, np.random.default_rng(3))
        assert out.mean() == pytest.approx(0.15, rel=0.01)

    def test_seeded(self):
        a = dequantize(np.zeros(5), 1.0, np.random.default_rng(4))
        np.testing.assert_array_equal(a, dequantize(np.zeros(5), 1.0, np.random.default_rng(4)))

    def test_negative(self):
        with pytest.raises(ValueError):
            dequantize(np.zeros(1), -1.0, np.random.default_rng(0))

    def test_quantization_step(self):
        assert estimate_quantization_step(np.array([0.0, 0.5, 0.5, 2.0])) == 0.5
        assert estimate_quantization_step(np.zeros(4)) == 0.0


class TestNll:
    def test_one_dim_standard_normal(self):
        model = identity_model([[0.0]], [[0.0]], (1, 1))
        loss = nll_loss(model, np.zeros((1, 1, 1)), [0])
        assert float(loss.value) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-15)

    def test_d_dims(self):
        model = identity_model(np.zeros((1, 6)), np.zeros((1, 6)), (6, 1))
        loss = nll_loss(model, np.zeros((3, 6, 1)), [0, 0, 0])
        assert float(loss.value) == pytest.approx(3 * math.log(2 * math.pi), abs=1e-14)

    def test_identity_matches_scipy(self):
        rng = np.random.default_rng(5)
        mu, ls = rng.normal(size=(2, 4)), rng.normal(size=(2, 4)) * 0.3
        model = identity_model(mu, ls, (4, 1))
        x, y = rng.normal(size=(5, 4, 1)), np.array([0, 1, 1, 0, 1])
        ref = np.mean([-norm.logpdf(x[i, :, 0], mu[y[i]], np.exp(ls[y[i]])).sum() for i in range(5)])
        assert float(nll_loss(model, x, y).value) == pytest.approx(ref, rel=1e-12)

    def test_batch_is_mean_of_singles(self):
        rng = np.random.default_rng(6)
        model = randomize(small_model(), rng)
        x, y = rng.normal(size=(6, 2, 64)) * 5, np.array([0, 1, 0, 1, 1, 0])
        singles = [float(nll_loss(model, x[i:i + 1], y[i:i + 1]).value) for i in range(6)]
        assert float(nll_loss(model, x, y).value) == pytest.approx(np.mean(singles), rel=1e-12)

    def test_label_count_mismatch(self):
        with pytest.raises(ValueError):
            nll_loss(small_model(), np.zeros((2, 2, 64)), [0, 1, 0])


class TestClassify:
    def test_separated_means(self):
        model = identity_model([[-3.0] * 4, [3.0] * 4], np.zeros((2, 4)), (4, 1))
        label, post = classify(model, np.full((4, 1), -2.8))
        assert label == 0 and post[0] > 0.99

    def test_tie_goes_to_lower_index(self):
        model = identity_model(np.zeros((3, 2)), np.zeros((3, 2)), (2, 1))
        label, post = classify(model, np.ones((2, 1)))
        assert label == 0
        np.testing.assert_allclose(post, 1 / 3)

    def test_agrees_with_per_class_nll(self):
        rng = np.random.default_rng(7)
        model = randomize(small_model(), rng)
        x = rng.normal(size=(10, 2, 64)) * 3
        labels, _ = classify_batch(model, x)
        for i in range(10):
            nll = [float(nll_loss(model, x[i:i + 1], [y]).value) for y in range(2)]
            assert labels[i] == int(np.argmin(nll))

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            classify(small_model(), np.zeros((2, 32)))


class TestMaxLikelihood:
    def test_zero_epochs(self):
        model = small_model()
        before = model_to_bytes(model)
        report = train_max_likelihood(model, small_dataset(), TrainConfig(epochs=0))
        assert len(report) == 0 and model_to_bytes(model) == before

    def test_deterministic(self):
        cfg = TrainConfig(epochs=2, batch_size=4, prior_learning_rate=0.05, seed=3)
        runs = []
        for _ in range(2):
            model = small_model()
            report = train_max_likelihood(model, small_dataset(), cfg, valid=small_dataset(seed=1))
            runs.append((model_to_bytes(model), report.to_csv()))
        assert runs[0] == runs[1]

    def test_improves_validation_likelihood(self):
        train, valid = small_dataset(16), small_dataset(8, seed=1)
        model = small_model()
        start = np.mean(log_likelihoods(model, valid.data, valid.labels))
        report = train_max_likelihood(model, train, TrainConfig(epochs=10, prior_learning_rate=0.05), valid=valid)
        assert report.column("valid_ll")[-1] > start
        assert len(report) == 10

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_non_finite_names_parameter(self):
        model = small_model()
        model.layers[1].f.w1.value = np.full(model.layers[1].f.w1.shape, 1e200)
        model.layers[1].f.w2.value = np.full(model.layers[1].f.w2.shape, 1e200)
        with pytest.raises(NumericalError, match="non-finite"):
            train_max_likelihood(model, small_dataset(), TrainConfig(epochs=1))

    def test_checkpoints(self, tmp_path):
        train_max_likelihood(small_model(), small_dataset(), TrainConfig(epochs=4, checkpoint_every=2),
                             checkpoint_dir=tmp_path)
        assert sorted(p.name for p in tmp_path.iterdir()) == ["epoch_0002.sgfl", "epoch_0004.sgfl"]


class TestGate:
    def test_worked_examples(self):
        assert prior_comparison_gate(-10, -12, -20) is False
        assert prior_comparison_gate(-10, -19, -20) is True
        assert prior_comparison_gate(-10, -10, -20) is False

    def test_matches_inequality(self):
        rng = np.random.default_rng(8)
        for a, b, c in rng.normal(size=(200, 3)) * 10:
            assert prior_comparison_gate(a, b, c) == ((b - c) < (a - b))


class TestPriorPenalty:
    def _matched(self):
        x = np.random.default_rng(9).normal(loc=2.0, scale=3.0, size=(20, 2, 1))
        base = GaussianBaseline.fit(x)
        model = identity_model(base.mean[None], np.log(base.std)[None], (2, 1))
        return model, x, base

    def test_zero_when_flow_equals_baseline(self):
        model, x, base = self._matched()
        pen = prior_comparison_penalty(model, x, np.zeros(20, int), PriorRegConfig(1.0, base))
        assert float(pen.value) == pytest.approx(0.0, abs=1e-20)

    def test_gradient(self):
        model, x, base = self._matched()
        model.prior.means.value = model.prior.means.value + 0.3
        reg = PriorRegConfig(0.7, base)
        err = check_gradients(lambda: prior_comparison_penalty(model, x[:5], np.zeros(5, int), reg),
                              model.prior.params())
        assert err < 1e-4

    def test_zero_weight_is_bit_identical(self):
        train, valid = small_dataset(), small_dataset(seed=1)
        outs = []
        for reg in (None, PriorRegConfig(0.0, GaussianBaseline.fit(train.data))):
            model = small_model()
            cfg = TrainConfig(epochs=2, batch_size=8, prior_reg=reg)
            train_max_likelihood(model, train, cfg, valid=valid)
            outs.append(model_to_bytes(model))
        assert outs[0] == outs[1]


class TestMixture:
    def test_reduces_to_flow_when_unchanged(self):
        rng = np.random.default_rng(10)
        model = randomize(small_model(), rng)
        train_points = rng.normal(size=(6, 2, 64))
        valid = rng.normal(size=(4, 2, 64))
        reg = MixtureRegConfig.init(6, 0.5)
        loss, clamped = mixture_minibatch_step(model, train_points, [0, 2, 5], valid, reg)
        log_pf = model.prior.log_prob_marginal(flow_forward(model, valid).latent.value)
        assert float(loss.value) == -np.mean(log_pf)
        assert clamped == 0

    def test_single_component_identity(self):
        x0 = np.array([[0.5], [-1.0]])
        frozen, new = math.log(0.8), math.log(1.3)
        model = identity_model(x0.ravel()[None], np.full((1, 2), frozen), (2, 1))
        reg = MixtureRegConfig(ad.parameter(np.array([new])), np.array([frozen]))
        valid = np.random.default_rng(11).normal(size=(5, 2, 1))
        loss, _ = mixture_minibatch_step(model, x0[None], [0], valid, reg)
        ref = np.array([norm.logpdf(v.ravel(), x0.ravel(), math.exp(new)).sum() for v in valid])
        assert float(loss.value) == pytest.approx(-ref.mean(), rel=1e-12)

    def test_gradient(self):
        rng = np.random.default_rng(12)
        train_points, valid = rng.normal(size=(4, 3)), rng.normal(size=(3, 3))
        reg = MixtureRegConfig(ad.parameter(rng.normal(size=4) * 0.2), np.zeros(4))
        log_pf = np.full(3, -4.0)
        err = check_gradients(
            lambda: ad.mean(mixture_corrected_log_likelihood(log_pf, valid, train_points, [1, 3], reg)[0]),
            [reg.per_point_log_stds])
        assert err < 1e-4

    def test_clamp_counted(self):
        # shrinking a component that p_f barely covers makes the swap negative
        reg = MixtureRegConfig(ad.parameter(np.array([math.log(10.0)])), np.array([0.0]))
        valid = np.zeros((1, 1))
        log_pf = np.array([norm.logpdf(0.0)])
        out, clamped = mixture_corrected_log_likelihood(log_pf, valid, np.array([[3.0]]), [0], reg)
        assert clamped == 0 and np.isfinite(out.value).all()
        reg2 = MixtureRegConfig(ad.parameter(np.array([math.log(0.01)])), np.array([0.0]))
        out2, clamped2 = mixture_corrected_log_likelihood(np.array([-50.0]), valid, np.array([[0.0]]), [0], reg2)
        assert clamped2 == 0 and out2.value[0] > 0
        out3, clamped3 = mixture_corrected_log_likelihood(np.array([-50.0]), np.array([[0.0]]),
                                                         np.array([[0.0]]), [0], reg)
        assert clamped3 == 1 and out3.value[0] == pytest.approx(math.log(1e-300))


class TestAdam:
    def test_first_step_by_hand(self):
        p = ad.parameter(np.array([1.0, -2.0, 0.5]))
        g = np.array([0.3, -4.0, 0.0])
        adam_update([p], {p: g}, AdamState(), lr=0.1)
        # bias-corrected m = g, v = g^2, so the step is lr * g / (|g| + eps)
        expected = np.array([1.0, -2.0, 0.5]) - 0.1 * g / (np.abs(g) + 1e-8)
        np.testing.assert_allclose(p.value, expected, rtol=0, atol=1e-15)

    def test_zero_gradient(self):
        p = ad.parameter(np.array([1.5]))
        opt = Adam([p], 0.1)
        for _ in range(3):
            opt.step({p: np.zeros(1)})
        assert p.value[0] == 1.5

    def test_second_step_by_hand(self):
        p = ad.parameter(np.array([0.0]))
        state = AdamState()
        adam_update([p], {p: np.array([1.0])}, state, lr=0.1)
        adam_update([p], {p: np.array([-2.0])}, state, lr=0.1)
        m = 0.9 * 0.1 * 1.0 + 0.1 * -2.0
        v = 0.999 * 0.001 * 1.0 + 0.001 * 4.0
        step2 = (m / (1 - 0.81)) / (math.sqrt(v / (1 - 0.999 ** 2)) + 1e-8)
        assert p.value[0] == pytest.approx(-0.1 / (1 + 1e-8) - 0.1 * step2, abs=1e-15)


class TestOT:
    def _clusters(self, seed=0):
        rng = np.random.default_rng(seed)
        data = np.concatenate([rng.normal(-3.0, 0.3, 20), rng.normal(3.0, 0.3, 20)]).reshape(40, 1, 1)
        return SignalDataset(data, np.repeat([0, 1], 20), 1.0, ["x"], ["low", "high"])

    def test_zero_epochs(self):
        model = small_model()
        before = model_to_bytes(model)
        assert len(train_ot(model, small_dataset(), TrainConfig(epochs=0))) == 0
        assert model_to_bytes(model) == before

    def test_one_dim_clusters(self):
        ds = self._clusters()
        model = identity_model(np.zeros((2, 1)), np.zeros((2, 1)), (1, 1))
        targets = np.array([-3.0, 3.0])
        gap0 = np.abs(model.prior.means.value[:, 0] - targets).mean()
        cfg = TrainConfig(epochs=100, learning_rate=1e-3, prior_learning_rate=0.1,
                          objective="optimal_transport")
        train_ot(model, ds, cfg)
        gap = np.abs(model.prior.means.value[:, 0] - targets).mean()
        assert gap <= 0.5 * gap0
        assert np.mean(classify_batch(model, ds.data)[0] == ds.labels) == 1.0

    def test_deterministic(self):
        cfg = TrainConfig(epochs=2, prior_learning_rate=0.05, objective="optimal_transport", seed=5,
                          ot=OTConfig(solver="sinkhorn"))
        outs = []
        for _ in range(2):
            model = small_model()
            report = train_ot(model, small_dataset(), cfg)
            outs.append((model_to_bytes(model), report.to_csv()))
        assert outs[0] == outs[1]


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(dequant_amplitude=-1.0)
    with pytest.raises(ValueError):
        TrainConfig(objective="adversarial")
