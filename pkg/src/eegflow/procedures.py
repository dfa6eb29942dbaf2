"""Inspection procedures on a trained model: prototypes, sweeps, sampling,
generated/real matching and spectra comparison. All return plain arrays."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import FlowModel, flow_inverse
from .signals import SignalDataset, Spectrum, welch_spectrum
from .transport import DiscreteDistribution, cost_matrix, exact_ot, sinkhorn


def _check_class(model: FlowModel, y: int) -> int:
    if not 0 <= int(y) < model.prior.n_classes:
        raise ValueError(f"class index {y} out of range [0, {model.prior.n_classes})")
    return int(y)


def prototype_invert(model: FlowModel, y: int) -> np.ndarray:
    """The class mean in latent space mapped back to a (C, T) signal."""
    y = _check_class(model, y)
    return flow_inverse(model, model.prior.means.value[y]).value[0]


def dimension_sweep(model: FlowModel, y: int, dim: int, values) -> list[np.ndarray]:
    """Invert the class mean with latent coordinate ``dim`` set to each of ``values``."""
    y = _check_class(model, y)
    if not 0 <= dim < model.prior.dim:
        raise ValueError(f"latent dimension {dim} out of range [0, {model.prior.dim})")
    values = np.asarray(values, dtype=np.float64).reshape(-1)
    latents = np.repeat(model.prior.means.value[y][None], values.size, axis=0)
    latents[:, dim] = values
    out = flow_inverse(model, latents).value if values.size else np.zeros((0,) + model.input_shape)
    return list(out)


def sample_signals(model: FlowModel, labels, rng: np.random.Generator) -> np.ndarray:
    """Draw latents for ``labels`` from the prior and invert them, (B, C, T)."""
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size == 0:
        return np.zeros((0,) + model.input_shape)
    return flow_inverse(model, model.prior.sample_node(labels, rng)).value


def sample_dataset(model: FlowModel, ds_like: SignalDataset | None, labels, rng) -> SignalDataset:
    data = sample_signals(model, labels, rng)
    rate = ds_like.sample_rate_hz if ds_like else 1.0
    channels = ds_like.channel_names if ds_like else [f"ch{i}" for i in range(model.input_shape[0])]
    return SignalDataset(data, np.asarray(labels, dtype=np.int64), rate, channels, model.class_names)


@dataclass
class Match:
    real_index: int
    generated_index: int
    mass: float
    distance: float


def match_generated_real(model: FlowModel, ds: SignalDataset, ratio: int = 3, seed: int = 0,
                         metric: str = "euclidean", solver: str = "exact",
                         generated: np.ndarray | None = None) -> tuple[list[Match], np.ndarray]:
    """Transport-match ``ratio * n`` generated signals to the ``n`` real ones.

    Generated labels follow the real label frequencies. ``generated`` may be
    passed to match a fixed sample. Returns the nonzero plan entries and the
    generated signals.
    """
    n = len(ds)
    if n == 0:
        raise ValueError("empty dataset")
    if generated is None:
        rng = np.random.default_rng(seed)
        generated = sample_signals(model, np.sort(np.repeat(ds.labels, ratio)), rng)
    p = DiscreteDistribution.uniform(ds.data.reshape(n, -1))
    q = DiscreteDistribution.uniform(generated.reshape(generated.shape[0], -1))
    dist = cost_matrix(p.points, q.points, metric)
    if solver == "exact":
        plan = exact_ot(p, q, metric, dist=dist).coupling
    else:
        plan = sinkhorn(p, q, metric, epsilon=1e-2 * float(np.median(dist)), dist=dist).coupling
    rows, cols = np.nonzero(plan > 1e-15)
    matches = [Match(int(i), int(j), float(plan[i, j]), float(dist[i, j])) for i, j in zip(rows, cols)]
    return matches, generated


def mean_spectra(data: np.ndarray, sample_rate_hz: float, segment: int | None = None,
                 overlap: float = 0.5) -> Spectrum:
    """Per-channel Welch spectra averaged over trials; power is (C, F)."""
    spec = welch_spectrum(data, sample_rate_hz, segment, overlap)
    spec.power = spec.power.mean(axis=0)
    return spec


def spectra_band_error(real: Spectrum, generated: Spectrum, low: float = 5.0,
                       high: float = 15.0) -> np.ndarray:
    """Median |log10 P_gen - log10 P_real| over the band, one value per channel."""
    sel = (real.freqs_hz >= low) & (real.freqs_hz <= high)
    tiny = 1e-300
    diff = np.abs(np.log10(generated.power[:, sel] + tiny) - np.log10(real.power[:, sel] + tiny))
    return np.median(diff, axis=1)
