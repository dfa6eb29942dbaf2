"""Multichannel trial datasets: synthesis, padding, splitting, file formats, spectra."""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

VIRTUAL_CHANNEL = "virtual"
DATASET_MAGIC = b"SGDS"
DATASET_VERSION = 1


class DatasetError(ValueError):
    pass


@dataclass
class SignalDataset:
    data: np.ndarray  # (n, C, T), microvolts
    labels: np.ndarray  # (n,)
    sample_rate_hz: float
    channel_names: list[str]
    class_names: list[str]

    def __post_init__(self):
        self.data = np.ascontiguousarray(np.asarray(self.data, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64).reshape(-1)
        self.channel_names = [str(c) for c in self.channel_names]
        self.class_names = [str(c) for c in self.class_names]
        if self.data.ndim != 3:
            raise DatasetError(f"data must be (n, C, T), got shape {self.data.shape}")
        n, c, _ = self.data.shape
        if self.labels.shape[0] != n:
            raise DatasetError(f"{self.labels.shape[0]} labels for {n} trials")
        if len(self.channel_names) != c:
            raise DatasetError(f"{len(self.channel_names)} channel names for {c} channels")
        if not self.class_names:
            raise DatasetError("at least one class name is required")
        if n and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise DatasetError(f"labels must lie in [0, {len(self.class_names)})")
        if not np.all(np.isfinite(self.data)):
            raise DatasetError("data contains NaN or Inf")
        if not self.sample_rate_hz > 0:
            raise DatasetError(f"sample rate must be positive, got {self.sample_rate_hz}")

    def __len__(self) -> int:
        return self.data.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape[1], self.data.shape[2]

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def subset(self, index) -> "SignalDataset":
        return replace(self, data=self.data[index], labels=self.labels[index])


# ------------------------------------------------------------------ synthesis

@dataclass
class SynthConfig:
    """Alpha-rhythm surrogate: class 0 "rest", class 1 "right_hand".

    Trials carry a 10 Hz oscillation of amplitude ``a_rest`` on every channel;
    for "right_hand" it is scaled by ``rho`` on the first ceil(C/2) channels.
    The oscillation phase of a trial is uniform on a window of width
    ``phase_spread * 2*pi`` centred on 0 (1.0 means fully random phase).
    """

    n_per_class: int = 100
    n_channels: int = 4
    n_times: int = 512
    sample_rate_hz: float = 250.0
    a_rest: float = 10.0
    rho: float = 0.2
    sigma: float = 2.0
    alpha_hz: float = 10.0
    phase_spread: float = 0.5
    seed: int = 0

    def validate(self) -> None:
        if self.n_per_class < 1:
            raise DatasetError(f"n_per_class must be >= 1, got {self.n_per_class}")
        if self.n_channels < 1 or self.n_times < 1:
            raise DatasetError("n_channels and n_times must be positive")
        if not 0.0 <= self.rho < 1.0:
            raise DatasetError(f"rho must lie in [0, 1), got {self.rho}")
        if self.sigma < 0 or not 0.0 <= self.phase_spread <= 1.0:
            raise DatasetError("sigma must be >= 0 and phase_spread in [0, 1]")
        if self.n_times / self.sample_rate_hz * self.alpha_hz < 10:
            raise DatasetError("trial too short: fewer than 10 alpha cycles")


SYNTH_CLASSES = ["rest", "right_hand"]


def suppressed_channels(n_channels: int) -> np.ndarray:
    return np.arange(math.ceil(n_channels / 2))


def synth_generate(config: SynthConfig | None = None) -> SignalDataset:
    config = config or SynthConfig()
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = 2 * config.n_per_class
    labels = np.repeat([0, 1], config.n_per_class)
    t = np.arange(config.n_times) / config.sample_rate_hz
    half_width = math.pi * config.phase_spread
    phase = rng.uniform(-half_width, half_width, size=n)
    wave = np.sin(2 * math.pi * config.alpha_hz * t[None, :] + phase[:, None])  # (n, T)
    amp = np.full((n, config.n_channels), config.a_rest)
    amp[np.ix_(labels == 1, suppressed_channels(config.n_channels))] *= config.rho
    data = amp[:, :, None] * wave[:, None, :]
    if config.sigma > 0:
        data = data + config.sigma * rng.standard_normal(data.shape)
    return SignalDataset(data, labels, config.sample_rate_hz,
                         [f"ch{i}" for i in range(config.n_channels)], list(SYNTH_CLASSES))


# ------------------------------------------------------------ virtual channel

def pad_virtual_channel(ds: SignalDataset) -> SignalDataset:
    """Append an all-zero channel when C is odd so coupling splits are even."""
    if ds.data.shape[1] % 2 == 0:
        return ds
    zeros = np.zeros((len(ds), 1, ds.data.shape[2]))
    return replace(ds, data=np.concatenate([ds.data, zeros], axis=1),
                   channel_names=ds.channel_names + [VIRTUAL_CHANNEL])


def strip_virtual_channel(ds: SignalDataset) -> SignalDataset:
    if not ds.channel_names or ds.channel_names[-1] != VIRTUAL_CHANNEL:
        return ds
    return replace(ds, data=ds.data[:, :-1], channel_names=ds.channel_names[:-1])


# ------------------------------------------------------------------ splitting

def split_train_valid(ds: SignalDataset, fraction: float = 0.8,
                      seed: int = 0) -> tuple[SignalDataset, SignalDataset]:
    """Stratified random split; ``fraction`` of each class goes to training."""
    if not 0.0 < fraction < 1.0:
        raise DatasetError(f"fraction must lie in (0, 1), got {fraction}")
    rng = np.random.default_rng(seed)
    train_idx, valid_idx = [], []
    for y in range(ds.n_classes):
        idx = np.flatnonzero(ds.labels == y)
        if idx.size == 0:
            continue
        if idx.size < 2:
            raise DatasetError(f"class {ds.class_names[y]!r} has {idx.size} trial(s); need at least 2 to split")
        idx = rng.permutation(idx)
        n_train = min(max(int(round(fraction * idx.size)), 1), idx.size - 1)
        train_idx.append(idx[:n_train])
        valid_idx.append(idx[n_train:])
    return ds.subset(np.sort(np.concatenate(train_idx))), ds.subset(np.sort(np.concatenate(valid_idx)))


# ------------------------------------------------------------------- file I/O

def _pack_names(names: list[str]) -> bytes:
    out = [struct.pack("<I", len(names))]
    for name in names:
        raw = name.encode("utf-8")
        out.append(struct.pack("<I", len(raw)) + raw)
    return b"".join(out)


def dataset_to_bytes(ds: SignalDataset) -> bytes:
    n, c, t = ds.data.shape
    return b"".join([
        DATASET_MAGIC,
        struct.pack("<I", DATASET_VERSION),
        struct.pack("<QQQ", n, c, t),
        struct.pack("<d", ds.sample_rate_hz),
        _pack_names(ds.channel_names),
        _pack_names(ds.class_names),
        ds.labels.astype("<u4").tobytes(),
        ds.data.astype("<f8").tobytes(),
    ])


def dataset_from_bytes(buf: bytes) -> SignalDataset:
    pos = 0

    def need(size: int, what: str) -> int:
        nonlocal pos
        if size < 0 or pos + size > len(buf):
            raise DatasetError(f"dataset file truncated while reading {what}")
        start, pos = pos, pos + size
        return start

    if buf[:4] != DATASET_MAGIC:
        raise DatasetError("not a dataset file (bad magic)")
    pos = 4
    (version,) = struct.unpack_from("<I", buf, need(4, "version"))
    if version != DATASET_VERSION:
        raise DatasetError(f"unsupported dataset version {version}, expected {DATASET_VERSION}")
    n, c, t = struct.unpack_from("<QQQ", buf, need(24, "shape"))
    (rate,) = struct.unpack_from("<d", buf, need(8, "sample rate"))

    def names(what: str) -> list[str]:
        (count,) = struct.unpack_from("<I", buf, need(4, what))
        out = []
        for _ in range(count):
            (size,) = struct.unpack_from("<I", buf, need(4, what))
            try:
                out.append(buf[need(size, what):pos].decode("utf-8"))
            except UnicodeDecodeError:
                raise DatasetError(f"invalid UTF-8 in {what}") from None
        return out

    channels = names("channel names")
    classes = names("class names")
    expected = 4 * n + 8 * n * c * t  # python ints: no overflow
    if expected > len(buf) - pos:
        raise DatasetError(f"declared shape ({n}, {c}, {t}) needs {expected} bytes, "
                           f"file has {len(buf) - pos} (truncated or corrupt)")
    labels = np.frombuffer(buf, "<u4", count=n, offset=need(4 * n, "labels")).astype(np.int64)
    data = np.frombuffer(buf, "<f8", count=n * c * t, offset=need(8 * n * c * t, "data"))
    if pos != len(buf):
        raise DatasetError(f"{len(buf) - pos} trailing bytes after dataset")
    return SignalDataset(data.reshape(n, c, t).astype(np.float64), labels, rate, channels, classes)


def save_dataset(ds: SignalDataset, path) -> None:
    Path(path).write_bytes(dataset_to_bytes(ds))


def load_dataset(path) -> SignalDataset:
    return dataset_from_bytes(Path(path).read_bytes())


def save_csv(ds: SignalDataset, data_path, labels_path) -> None:
    """(n*C) rows x T columns, trial-major; labels one per line in a sidecar."""
    n, c, t = ds.data.shape
    np.savetxt(data_path, ds.data.reshape(n * c, t), fmt="%.17g", delimiter=",")
    np.savetxt(labels_path, ds.labels, fmt="%d")


def load_csv(data_path, labels_path, *, n_channels: int, sample_rate_hz: float,
             channel_names: list[str] | None = None,
             class_names: list[str] | None = None) -> SignalDataset:
    rows = np.loadtxt(data_path, delimiter=",", ndmin=2, dtype=np.float64)
    labels = np.loadtxt(labels_path, dtype=np.int64, ndmin=1)
    if rows.shape[0] != labels.size * n_channels:
        raise DatasetError(f"{rows.shape[0]} rows but {labels.size} labels x {n_channels} channels")
    data = rows.reshape(labels.size, n_channels, rows.shape[1])
    if class_names is None:
        class_names = [f"class{i}" for i in range(int(labels.max(initial=-1)) + 1)] or ["class0"]
    return SignalDataset(data, labels, sample_rate_hz,
                         channel_names or [f"ch{i}" for i in range(n_channels)], class_names)


# ------------------------------------------------------------------- spectra

@dataclass
class Spectrum:
    freqs_hz: np.ndarray
    power: np.ndarray
    segment: int
    overlap: float
    taper: str = field(default="hann")


def hann(n: int) -> np.ndarray:
    """Periodic Hann window."""
    return 0.5 - 0.5 * np.cos(2 * math.pi * np.arange(n) / n)


def welch_spectrum(signal, sample_rate_hz: float, segment: int | None = None,
                   overlap: float = 0.5) -> Spectrum:
    """One-sided power spectral density by averaged Hann-tapered periodograms.

    ``signal`` may be (T,) or (..., T); leading axes are kept.
    """
    x = np.asarray(signal, dtype=np.float64)
    n_times = x.shape[-1]
    segment = int(round(sample_rate_hz)) if segment is None else int(segment)
    if segment > n_times:
        raise DatasetError(f"segment length {segment} exceeds signal length {n_times}")
    if segment < 1 or not 0.0 <= overlap < 1.0:
        raise DatasetError("segment must be >= 1 and overlap in [0, 1)")
    step = segment - int(round(overlap * segment))
    starts = np.arange(0, n_times - segment + 1, step)
    win = hann(segment)
    segs = np.stack([x[..., s:s + segment] for s in starts], axis=-2) * win
    power = np.abs(np.fft.rfft(segs, axis=-1)) ** 2 / (sample_rate_hz * np.sum(win ** 2))
    power = power.mean(axis=-2)
    # fold negative frequencies, except DC and (for even lengths) Nyquist
    if segment % 2 == 0:
        power[..., 1:-1] *= 2
    else:
        power[..., 1:] *= 2
    freqs = np.fft.rfftfreq(segment, d=1.0 / sample_rate_hz)
    return Spectrum(freqs, power, segment, overlap)


def band_power(spec: Spectrum, low: float, high: float) -> np.ndarray:
    """Integrated power between ``low`` and ``high`` Hz (inclusive)."""
    sel = (spec.freqs_hz >= low) & (spec.freqs_hz <= high)
    df = spec.freqs_hz[1] - spec.freqs_hz[0]
    return spec.power[..., sel].sum(axis=-1) * df
