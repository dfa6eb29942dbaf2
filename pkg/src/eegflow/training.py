"""Maximum-likelihood and optimal-transport training, classification, regularizers."""
from __future__ import annotations

import csv
import io
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from .autodiff import LOG_2PI, Node
from .layers import FlowModel, flow_forward
from .modelio import save_model
from .optim import Adam
from .signals import SignalDataset
from .transport import OTConfig, ot_generator_loss


class NumericalError(RuntimeError):
    pass


@dataclass
class GaussianBaseline:
    """Diagonal Gaussian in input space, fit per input dimension."""

    mean: np.ndarray  # (C*T,)
    std: np.ndarray

    @classmethod
    def fit(cls, data: np.ndarray, min_std: float = 1e-6) -> "GaussianBaseline":
        flat = data.reshape(data.shape[0], -1)
        return cls(flat.mean(0), np.maximum(flat.std(0), min_std))

    def log_prob(self, x: np.ndarray) -> np.ndarray:
        flat = x.reshape(x.shape[0], -1)
        z = (flat - self.mean) / self.std
        return np.sum(-np.log(self.std) - 0.5 * LOG_2PI - 0.5 * z * z, axis=1)


@dataclass
class PriorRegConfig:
    penalty_weight: float
    gaussian_baseline: GaussianBaseline

    def __post_init__(self):
        if self.penalty_weight < 0:
            raise ValueError("penalty_weight must be >= 0")


@dataclass
class MixtureRegConfig:
    per_point_log_stds: Node  # (n_train,), trainable
    frozen_log_stds: np.ndarray  # (n_train,)

    @classmethod
    def init(cls, n_train: int, scale: float) -> "MixtureRegConfig":
        ls = np.full(n_train, math.log(scale))
        return cls(ad.parameter(ls, "mixture.log_stds"), ls.copy())

    def __post_init__(self):
        self.frozen_log_stds = np.asarray(self.frozen_log_stds, dtype=np.float64)
        if self.per_point_log_stds.shape != self.frozen_log_stds.shape:
            raise ValueError("per-point and frozen log-std arrays must have the training-set length")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    prior_learning_rate: float | None = None  # None: same as learning_rate
    batch_size: int = 32
    epochs: int = 10
    dequant_amplitude: float | None = None  # None: estimated quantization step
    seed: int = 0
    objective: str = "max_likelihood"  # or "optimal_transport"
    ot: OTConfig = field(default_factory=OTConfig)
    ot_steps_per_epoch: int = 1
    mixture_reg: MixtureRegConfig | None = None
    prior_reg: PriorRegConfig | None = None
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.prior_learning_rate is not None and self.prior_learning_rate <= 0:
            raise ValueError(f"prior_learning_rate must be > 0, got {self.prior_learning_rate}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.dequant_amplitude is not None and self.dequant_amplitude < 0:
            raise ValueError("dequant_amplitude must be >= 0")
        if self.objective not in ("max_likelihood", "optimal_transport"):
            raise ValueError(f"unknown objective {self.objective!r}")


@dataclass
class EpochRecord:
    epoch: int
    train_ll: float
    valid_ll: float
    train_acc: float
    valid_acc: float
    train_loss: float
    gate: bool | None = None
    wall_time_s: float = 0.0


REPORT_FIELDS = ["epoch", "train_ll", "valid_ll", "train_acc", "valid_acc", "train_loss", "gate"]


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records], dtype=float)

    def to_csv(self) -> str:
        """Deterministic columns only; wall times go to :meth:`timing_csv`."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(REPORT_FIELDS)
        for r in self.records:
            w.writerow([repr(getattr(r, k)) if isinstance(getattr(r, k), float) else getattr(r, k)
                        for k in REPORT_FIELDS])
        return buf.getvalue()

    def to_jsonl(self) -> str:
        return "".join(json.dumps({k: getattr(r, k) for k in REPORT_FIELDS}) + "\n"
                       for r in self.records)

    def timing_csv(self) -> str:
        return "epoch,wall_time_s\n" + "".join(f"{r.epoch},{r.wall_time_s:.6f}\n" for r in self.records)


# ----------------------------------------------------------------- primitives

def estimate_quantization_step(data: np.ndarray) -> float:
    """Smallest positive gap between sorted unique values (0 if all values equal)."""
    values = np.unique(np.asarray(data, dtype=np.float64))
    gaps = np.diff(values)
    gaps = gaps[gaps > 0]
    return float(gaps.min()) if gaps.size else 0.0


def dequantize(x: np.ndarray, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    """x + u with u ~ Uniform[0, amplitude) elementwise."""
    if amplitude < 0:
        raise ValueError("amplitude must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    if amplitude == 0:
        return x.copy()
    return x + amplitude * rng.random(x.shape)


def log_likelihood_node(model: FlowModel, batch, labels) -> Node:
    """Per-sample log p_X(x | y) = log p_H(f(x) | y) + log|det df/dx|, shape (B,)."""
    out = flow_forward(model, batch)
    if out.log_det_jacobian != 0.0:
        raise NumericalError(f"volume-preserving flow reported log-det {out.log_det_jacobian}")
    return model.prior.log_prob_node(out.latent, labels) + out.log_det_jacobian


def nll_loss(model: FlowModel, batch, labels) -> Node:
    labels = np.atleast_1d(np.asarray(labels))
    ll = log_likelihood_node(model, batch, labels)
    if ll.shape[0] != labels.size:
        raise ValueError(f"{labels.size} labels for a batch of {ll.shape[0]}")
    return -ad.mean(ll)


def log_likelihoods(model: FlowModel, data: np.ndarray, labels, chunk: int = 256) -> np.ndarray:
    labels = np.asarray(labels)
    return np.concatenate([log_likelihood_node(model, data[i:i + chunk], labels[i:i + chunk]).value
                           for i in range(0, len(data), chunk)]) if len(data) else np.zeros(0)


def class_log_likelihoods(model: FlowModel, data: np.ndarray, chunk: int = 256) -> np.ndarray:
    """log p(x | y) for every class, (B, n_classes)."""
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 2:
        data = data[None]
    parts = [model.prior.class_log_probs(flow_forward(model, data[i:i + chunk]).latent.value)
             for i in range(0, len(data), chunk)]
    return np.concatenate(parts).reshape(len(data), -1)


def classify_batch(model: FlowModel, data: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lp = class_log_likelihoods(model, data)
    post = np.exp(lp - lp.max(1, keepdims=True))
    post /= post.sum(1, keepdims=True)
    return np.argmax(lp, axis=1), post


def classify(model: FlowModel, x) -> tuple[int, np.ndarray]:
    """Label by the largest class-conditional likelihood; ties go to the lower index."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != model.input_shape:
        raise ad.ShapeError(f"input shape {x.shape} does not match model input {model.input_shape}")
    labels, post = classify_batch(model, x[None])
    return int(labels[0]), post[0]


def accuracy(model: FlowModel, ds: SignalDataset) -> float:
    if len(ds) == 0:
        return float("nan")
    return float(np.mean(classify_batch(model, ds.data)[0] == ds.labels))


# ---------------------------------------------------- experimental regularizers

def prior_comparison_gate(ll_flow_train: float, ll_flow_valid: float, ll_gauss_valid: float) -> bool:
    """True when the flow's validation gain over the Gaussian is below its train/valid gap."""
    return (ll_flow_valid - ll_gauss_valid) < (ll_flow_train - ll_flow_valid)


def prior_comparison_penalty(model: FlowModel, batch: np.ndarray, labels, reg: PriorRegConfig) -> Node:
    """weight * mean_b (log p_f(x_b) - log p_gauss(x_b))^2."""
    gap = log_likelihood_node(model, batch, labels) - reg.gaussian_baseline.log_prob(batch)
    return reg.penalty_weight * ad.mean(ad.square(gap))


def _component_log_density(valid: np.ndarray, centers: np.ndarray, log_std) -> Node:
    """log N(v; x_i, exp(ls_i)^2 I) for every (v, i) pair, (V, K)."""
    dim = valid.shape[1]
    sq = ((valid[:, None, :] - centers[None, :, :]) ** 2).sum(-1)  # (V, K)
    ls = ad.reshape(log_std if isinstance(log_std, Node) else Node(log_std), (1, -1))
    return -dim * ls - 0.5 * dim * LOG_2PI - 0.5 * sq * ad.exp(-2.0 * ls)


def mixture_corrected_log_likelihood(log_pf: np.ndarray, valid: np.ndarray, train_points: np.ndarray,
                                     batch_idx, reg: MixtureRegConfig,
                                     floor: float = 1e-300) -> tuple[Node, int]:
    """Per-validation-point log of the flow likelihood with batch components swapped.

    corrected(v) = log[ p_f(v) + 1/N sum_{i in batch} (N(v; x_i, s_i) - N(v; x_i, s_i^frozen)) ]

    The sum is formed relative to the largest log term so that it does not
    underflow; values at or below ``floor`` (in probability) are clamped and
    counted. Gradients reach only ``reg.per_point_log_stds``.
    """
    batch_idx = np.asarray(batch_idx, dtype=np.intp)
    n_train = reg.frozen_log_stds.size
    valid = valid.reshape(valid.shape[0], -1)
    centers = train_points.reshape(train_points.shape[0], -1)[batch_idx]
    log_new = _component_log_density(valid, centers, ad.getitem(reg.per_point_log_stds, batch_idx))
    log_old = _component_log_density(valid, centers, reg.frozen_log_stds[batch_idx]).value
    shift = np.maximum(np.asarray(log_pf, dtype=np.float64),
                       np.maximum(log_new.value.max(1), log_old.max(1)))[:, None]  # (V, 1)
    total = (np.exp(log_pf[:, None] - shift)[:, 0]
             + ad.sum(ad.exp(log_new - shift), axis=1) * (1.0 / n_train)
             - np.exp(log_old - shift).sum(1) / n_train)
    shifted_floor = np.exp(np.minimum(math.log(floor) - shift[:, 0], 700.0))
    clamped = int(np.sum(total.value <= shifted_floor))
    return ad.log(ad.clamp_min(total, shifted_floor)) + shift[:, 0], clamped


def mixture_minibatch_step(model: FlowModel, train_points: np.ndarray, batch_idx,
                           valid_batch: np.ndarray, reg: MixtureRegConfig) -> tuple[Node, int]:
    """-mean corrected log-likelihood over the validation batch, and the clamp count.

    The flow enters as a constant through its (class-marginal) likelihood.
    """
    log_pf = np.asarray(model.prior.log_prob_marginal(
        flow_forward(model, valid_batch).latent.value), dtype=np.float64).reshape(-1)
    corrected, clamped = mixture_corrected_log_likelihood(log_pf, valid_batch, train_points, batch_idx, reg)
    return -ad.mean(corrected), clamped


# ---------------------------------------------------------------- train loops

class _Optimizers:
    """Adam for the flow parameters and, with its own step size, for the prior."""

    def __init__(self, model: FlowModel, config: TrainConfig, frozen: tuple[Node, ...] = ()):
        prior = [p for p in model.prior.params() if all(p is not q for q in frozen)]
        flow = [p for p in model.params() if all(p is not q for q in model.prior.params())]
        self.params = flow + prior
        self.flow = Adam(flow, config.learning_rate) if flow else None
        self.prior = Adam(prior, config.prior_learning_rate or config.learning_rate)

    def step(self, grads) -> None:
        if self.flow:
            self.flow.step(grads)
        self.prior.step(grads)


def _check_finite(loss: Node, grads: dict[Node, np.ndarray], params: list[Node]) -> None:
    if np.all(np.isfinite(loss.value)) and all(np.all(np.isfinite(g)) for g in grads.values()):
        return
    for p in params:
        g = grads.get(p)
        if g is not None and not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite loss {float(loss.value)}; first non-finite gradient "
                                 f"in parameter {p.name!r}")
    raise NumericalError(f"non-finite loss {float(loss.value)} (all gradients finite)")


def _evaluate(model: FlowModel, ds: SignalDataset | None) -> tuple[float, float]:
    if ds is None or len(ds) == 0:
        return float("nan"), float("nan")
    lp = class_log_likelihoods(model, ds.data)
    ll = float(np.mean(lp[np.arange(len(ds)), ds.labels]))
    acc = float(np.mean(np.argmax(lp, axis=1) == ds.labels))
    return ll, acc


def _checkpoint(model: FlowModel, config: TrainConfig, epoch: int, checkpoint_dir) -> None:
    if checkpoint_dir and config.checkpoint_every and epoch % config.checkpoint_every == 0:
        Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
        save_model(model, Path(checkpoint_dir) / f"epoch_{epoch:04d}.sgfl")


EpochCallback = Callable[[int, FlowModel, EpochRecord], None]


def train_max_likelihood(model: FlowModel, dataset: SignalDataset, config: TrainConfig,
                         valid: SignalDataset | None = None, callback: EpochCallback | None = None,
                         checkpoint_dir=None) -> TrainReport:
    """Adam on the per-class negative log-likelihood of dequantized minibatches.

    Per epoch: shuffle (seeded), dequantize, then one step per minibatch.
    With ``config.prior_reg`` the gate is evaluated once at the start of each
    epoch on ``valid``; while it is open the comparison penalty is added.
    """
    report = TrainReport()
    if config.epochs <= 0:
        return report
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    amp = estimate_quantization_step(dataset.data) if config.dequant_amplitude is None \
        else config.dequant_amplitude
    opt = _Optimizers(model, config)
    params = opt.params
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        gate = None
        if config.prior_reg is not None and valid is not None and len(valid):
            baseline = config.prior_reg.gaussian_baseline
            gate = prior_comparison_gate(
                float(np.mean(log_likelihoods(model, dataset.data, dataset.labels))),
                float(np.mean(log_likelihoods(model, valid.data, valid.labels))),
                float(np.mean(baseline.log_prob(valid.data))))
        order = rng.permutation(n)
        data = dequantize(dataset.data[order], amp, rng)
        labels = dataset.labels[order]
        batch_ll = []
        for b in range(0, n, config.batch_size):
            xb, yb = data[b:b + config.batch_size], labels[b:b + config.batch_size]
            loss = nll_loss(model, xb, yb)
            batch_ll.append((-float(loss.value), len(yb)))
            if gate and config.prior_reg.penalty_weight > 0:
                loss = loss + prior_comparison_penalty(model, xb, yb, config.prior_reg)
            grads = ad.backward(loss)
            _check_finite(loss, grads, params)
            opt.step(grads)
        train_ll = sum(v * k for v, k in batch_ll) / n
        _, train_acc = _evaluate(model, dataset)
        valid_ll, valid_acc = _evaluate(model, valid)
        rec = EpochRecord(epoch, train_ll, valid_ll, train_acc, valid_acc, -train_ll, gate,
                          time.perf_counter() - start)
        report.records.append(rec)
        _checkpoint(model, config, epoch, checkpoint_dir)
        if callback:
            callback(epoch, model, rec)
    return report


def train_ot(model: FlowModel, dataset: SignalDataset, config: TrainConfig,
             valid: SignalDataset | None = None, callback: EpochCallback | None = None,
             checkpoint_dir=None) -> TrainReport:
    """Adam on the transport cost between the training set and generated signals.

    Prior log-stds stay fixed unless ``config.ot.learn_log_stds``: with far
    fewer samples than dimensions the matching cannot see the sampling noise,
    so the cost keeps falling as the generated spread shrinks to zero. With
    ``config.ot.calibrate_scale`` they are first set, for every class and
    coordinate alike, to the median per-coordinate spread of the encoded
    training set.
    """
    report = TrainReport()
    if config.epochs <= 0:
        return report
    if len(dataset) == 0:
        raise ValueError("empty training set")
    rng = np.random.default_rng(config.seed)
    frozen = () if config.ot.learn_log_stds else (model.prior.log_stds,)
    if frozen and config.ot.calibrate_scale:
        latent = flow_forward(model, dataset.data).latent.value
        spread = max(float(np.median(latent.std(axis=0))), 1e-6)
        model.prior.log_stds.value = np.full(model.prior.log_stds.shape, math.log(spread))
    opt = _Optimizers(model, config, frozen)
    params = opt.params
    for epoch in range(1, config.epochs + 1):
        start = time.perf_counter()
        losses = []
        for _ in range(config.ot_steps_per_epoch):
            loss, _, _ = ot_generator_loss(model, dataset.data, dataset.labels, rng, config.ot)
            grads = ad.backward(loss)
            _check_finite(loss, grads, params)
            opt.step(grads)
            losses.append(float(loss.value))
        train_ll, train_acc = _evaluate(model, dataset)
        valid_ll, valid_acc = _evaluate(model, valid)
        rec = EpochRecord(epoch, train_ll, valid_ll, train_acc, valid_acc, float(np.mean(losses)),
                          None, time.perf_counter() - start)
        report.records.append(rec)
        _checkpoint(model, config, epoch, checkpoint_dir)
        if callback:
            callback(epoch, model, rec)
    return report


def train(model: FlowModel, dataset: SignalDataset, config: TrainConfig, **kw) -> TrainReport:
    fn = train_ot if config.objective == "optimal_transport" else train_max_likelihood
    return fn(model, dataset, config, **kw)
