import numpy as np
import pytest

from eegflow.layers import ArchitectureConfig, FlowModel, build_architecture, flow_forward, randomize
from eegflow.prior import ClassConditionalGaussian
from eegflow.procedures import (dimension_sweep, match_generated_real, mean_spectra, prototype_invert,
                                sample_dataset, sample_signals, spectra_band_error)
from eegflow.signals import SignalDataset, SynthConfig, synth_generate
from eegflow.training import TrainConfig, train_max_likelihood


def identity_flow(means):
    means = np.atleast_2d(np.asarray(means, float))
    return FlowModel([], ClassConditionalGaussian(means, np.zeros_like(means)), (2, means.shape[1] // 2))


def random_model(seed=0):
    model = build_architecture(ArchitectureConfig(2, 16, seed=seed), ["a", "b"])
    return randomize(model, np.random.default_rng(seed))


class TestPrototype:
    def test_identity(self):
        means = np.arange(12.0).reshape(2, 6)
        np.testing.assert_array_equal(prototype_invert(identity_flow(means), 1), means[1].reshape(2, 3))

    def test_round_trip(self):
        model = random_model()
        for y in (0, 1):
            proto = prototype_invert(model, y)
            latent = flow_forward(model, proto).latent.value[0]
            assert np.max(np.abs(latent - model.prior.means.value[y])) < 1e-8

    def test_bad_class(self):
        with pytest.raises(ValueError, match="out of range"):
            prototype_invert(random_model(), 2)


class TestSweep:
    def test_mean_value_gives_prototype(self):
        model = random_model(1)
        mu = model.prior.means.value[0]
        (out,) = dimension_sweep(model, 0, 5, [mu[5]])
        np.testing.assert_array_equal(out, prototype_invert(model, 0))

    def test_identity_changes_one_coordinate(self):
        means = np.zeros((1, 8))
        outs = dimension_sweep(identity_flow(means), 0, 3, [-1.0, 2.0])
        for v, out in zip([-1.0, 2.0], outs):
            expected = np.zeros(8)
            expected[3] = v
            np.testing.assert_array_equal(out.ravel(), expected)

    def test_continuity(self):
        model = random_model(2)
        steps = [1e-2, 1e-4, 1e-6]
        gaps = []
        for d in steps:
            a, b = dimension_sweep(model, 1, 7, [0.3, 0.3 + d])
            gaps.append(np.linalg.norm(b - a))
        assert gaps[0] > gaps[1] > gaps[2] and gaps[2] < 1e-5

    def test_order_and_errors(self):
        model = random_model()
        assert len(dimension_sweep(model, 0, 0, [3.0, 1.0, 2.0])) == 3
        assert dimension_sweep(model, 0, 0, []) == []
        with pytest.raises(ValueError, match="latent dimension"):
            dimension_sweep(model, 0, 32, [0.0])


class TestSampling:
    def test_shapes_and_seed(self):
        model = random_model()
        a = sample_signals(model, [0, 1, 1], np.random.default_rng(4))
        b = sample_signals(model, [0, 1, 1], np.random.default_rng(4))
        assert a.shape == (3, 2, 16)
        np.testing.assert_array_equal(a, b)
        assert sample_signals(model, [], np.random.default_rng(0)).shape == (0, 2, 16)

    def test_dataset_wrapper(self):
        ds = sample_dataset(random_model(), None, [1, 0], np.random.default_rng(0))
        assert ds.labels.tolist() == [1, 0] and ds.class_names == ["a", "b"]


class TestMatch:
    def _real(self, n=4, seed=0):
        rng = np.random.default_rng(seed)
        return SignalDataset(rng.normal(size=(n, 2, 16)), np.arange(n) % 2, 1.0, ["x", "y"], ["a", "b"])

    def test_replicated_real_distance_zero(self):
        ds = self._real()
        generated = np.repeat(ds.data, 3, axis=0)
        matches, _ = match_generated_real(random_model(), ds, generated=generated)
        assert all(m.distance == 0.0 for m in matches)
        assert all(m.generated_index // 3 == m.real_index for m in matches)

    @pytest.mark.parametrize("solver", ["exact", "sinkhorn"])
    def test_masses_per_real_point(self, solver):
        ds = self._real(6)
        matches, generated = match_generated_real(random_model(), ds, seed=3, solver=solver)
        assert generated.shape == (18, 2, 16)
        mass = np.zeros(6)
        for m in matches:
            mass[m.real_index] += m.mass
        np.testing.assert_allclose(mass, 1 / 6, atol=1e-9)

    def test_beats_random_matching(self):
        cfg = SynthConfig(n_per_class=10, n_channels=2, n_times=64, sample_rate_hz=64.0)
        ds = synth_generate(cfg)
        model = build_architecture(ArchitectureConfig(2, 64, n_stages=2, kernel_size=3), ["rest", "right_hand"])
        train_max_likelihood(model, ds, TrainConfig(epochs=5, prior_learning_rate=0.05))
        matches, generated = match_generated_real(model, ds, seed=1)
        matched = sum(m.mass * m.distance for m in matches)
        rng = np.random.default_rng(2)
        flat_real, flat_gen = ds.data.reshape(20, -1), generated.reshape(60, -1)
        perm = rng.permutation(60)
        random_cost = np.mean(np.linalg.norm(flat_real[perm % 20] - flat_gen[perm], axis=1))
        assert matched < random_cost


class TestSpectra:
    def test_identical_spectra_zero_error(self):
        x = np.random.default_rng(0).normal(size=(5, 2, 500))
        spec = mean_spectra(x, 250.0)
        assert spec.power.shape == (2, 126)
        np.testing.assert_array_equal(spectra_band_error(spec, spec), [0.0, 0.0])

    def test_factor_of_ten(self):
        x = np.random.default_rng(1).normal(size=(5, 2, 500))
        real = mean_spectra(x, 250.0)
        gen = mean_spectra(x * np.sqrt(10.0), 250.0)
        np.testing.assert_allclose(spectra_band_error(real, gen), 1.0, atol=1e-12)
