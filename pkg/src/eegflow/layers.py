"""Volume-preserving invertible layers and their composition.

Every layer maps a batch of shape (B, C, T) to another batch and has an
exact inverse built from the same tape operations, so both directions are
differentiable. None of the layers changes volume, so the log-determinant
contribution of each is exactly 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Node, ShapeError
from .prior import ClassConditionalGaussian


class Squeeze:
    """Even/odd time interleave, (C, T) -> (2C, T/2)."""

    kind = "squeeze"
    log_det = 0.0

    def forward(self, x: Node) -> Node:
        return ad.squeeze2(x)

    def inverse(self, y: Node) -> Node:
        return ad.unsqueeze2(y)

    def output_shape(self, shape):
        c, t = shape
        if t % 2:
            raise ShapeError(f"squeeze needs an even time length, got T={t}")
        return (2 * c, t // 2)

    def params(self) -> list[Node]:
        return []


class ChannelRoll:
    """Cyclic shift of the channel axis by one position."""

    kind = "roll"
    log_det = 0.0

    def forward(self, x: Node) -> Node:
        return ad.roll(x, 1, axis=1)

    def inverse(self, y: Node) -> Node:
        return ad.roll(y, -1, axis=1)

    def output_shape(self, shape):
        return tuple(shape)

    def params(self) -> list[Node]:
        return []


class Hartley:
    """Orthonormal discrete Hartley transform along time, per channel. Self-inverse."""

    kind = "hartley"
    log_det = 0.0

    def forward(self, x: Node) -> Node:
        return ad.hartley(x)

    inverse = forward

    def output_shape(self, shape):
        return tuple(shape)

    def params(self) -> list[Node]:
        return []


class Subnet:
    """conv1d -> relu -> conv1d, mapping (B, c_in, T) to (B, c_out, T)."""

    def __init__(self, w1, b1, w2, b2, name: str = "subnet"):
        self.w1 = ad.parameter(w1, f"{name}.w1")
        self.b1 = ad.parameter(b1, f"{name}.b1")
        self.w2 = ad.parameter(w2, f"{name}.w2")
        self.b2 = ad.parameter(b2, f"{name}.b2")

    @classmethod
    def init(cls, channels: int, hidden: int, kernel_size: int, rng: np.random.Generator,
             name: str = "subnet") -> "Subnet":
        fan_in = channels * kernel_size
        w1 = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=(hidden, channels, kernel_size))
        # zero output layer: the enclosing coupling block starts as the identity
        w2 = np.zeros((channels, hidden, kernel_size))
        return cls(w1, np.zeros(hidden), w2, np.zeros(channels), name)

    def __call__(self, x: Node) -> Node:
        return ad.conv1d(ad.relu(ad.conv1d(x, self.w1, self.b1)), self.w2, self.b2)

    def params(self) -> list[Node]:
        return [self.w1, self.b1, self.w2, self.b2]


class Coupling:
    """Additive coupling: y1 = x1 + F(x2), y2 = x2 + G(y1).

    The split is into the first and second half of the channels.
    """

    kind = "coupling"
    log_det = 0.0

    def __init__(self, f: Subnet, g: Subnet):
        self.f = f
        self.g = g

    @classmethod
    def init(cls, channels: int, kernel_size: int, rng: np.random.Generator,
             hidden_factor: int = 2, name: str = "coupling") -> "Coupling":
        if channels % 2:
            raise ShapeError(f"coupling needs an even channel count, got C={channels}")
        half = channels // 2
        hidden = hidden_factor * half
        return cls(Subnet.init(half, hidden, kernel_size, rng, f"{name}.F"),
                   Subnet.init(half, hidden, kernel_size, rng, f"{name}.G"))

    def _halves(self, v: Node) -> tuple[Node, Node]:
        c = v.shape[1]
        if c % 2:
            raise ShapeError(f"coupling needs an even channel count, got C={c}")
        return v[:, : c // 2], v[:, c // 2:]

    def forward(self, x: Node) -> Node:
        x1, x2 = self._halves(x)
        y1 = x1 + self.f(x2)
        y2 = x2 + self.g(y1)
        return ad.concat([y1, y2], axis=1)

    def inverse(self, y: Node) -> Node:
        y1, y2 = self._halves(y)
        x2 = y2 - self.g(y1)
        x1 = y1 - self.f(x2)
        return ad.concat([x1, x2], axis=1)

    def output_shape(self, shape):
        if shape[0] % 2:
            raise ShapeError(f"coupling needs an even channel count, got C={shape[0]}")
        return tuple(shape)

    def params(self) -> list[Node]:
        return self.f.params() + self.g.params()


@dataclass
class FlowOutput:
    latent: Node  # (B, d), flattened layer output
    log_det_jacobian: float


@dataclass
class FlowModel:
    layers: list
    prior: ClassConditionalGaussian
    input_shape: tuple[int, int]
    class_names: list[str] = field(default_factory=list)
    channel_names: list[str] = field(default_factory=list)  # metadata for exports
    sample_rate_hz: float = 1.0

    def __post_init__(self):
        self.input_shape = tuple(int(s) for s in self.input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.output_shape(shape)
        self.output_shape = shape
        if shape[0] * shape[1] != self.prior.dim:
            raise ShapeError(f"prior dimension {self.prior.dim} != latent size {shape[0] * shape[1]}")
        if not self.class_names:
            self.class_names = [f"class{i}" for i in range(self.prior.n_classes)]
        if not self.channel_names:
            self.channel_names = [f"ch{i}" for i in range(self.input_shape[0])]
        if len(self.class_names) != self.prior.n_classes:
            raise ShapeError(f"{len(self.class_names)} class names for {self.prior.n_classes} classes")
        if len(self.channel_names) != self.input_shape[0]:
            raise ShapeError(f"{len(self.channel_names)} channel names for {self.input_shape[0]} channels")

    @property
    def dim(self) -> int:
        return self.input_shape[0] * self.input_shape[1]

    def params(self) -> list[Node]:
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out + self.prior.params()


def _batched(x, shape, what: str) -> tuple[Node, bool]:
    x = x if isinstance(x, Node) else Node(ad.as_tensor(x))
    single = x.value.ndim == len(shape)
    if single:
        x = ad.reshape(x, (1,) + x.shape)
    if tuple(x.shape[1:]) != tuple(shape):
        raise ShapeError(f"{what} shape {tuple(x.shape[1:])} does not match expected {tuple(shape)}")
    return x, single


def flow_forward(model: FlowModel, x) -> FlowOutput:
    """Map input signals (C, T) or (B, C, T) to flattened latents (B, d)."""
    v, _ = _batched(x, model.input_shape, "input")
    log_det = 0.0
    for layer in model.layers:
        v = layer.forward(v)
        log_det += layer.log_det
    return FlowOutput(ad.reshape(v, (v.shape[0], -1)), log_det)


def flow_inverse(model: FlowModel, h) -> Node:
    """Map latents (d,) / (B, d) / (B, *output_shape) back to signals (B, C, T)."""
    v = h if isinstance(h, Node) else Node(ad.as_tensor(h))
    c, t = model.output_shape
    if v.value.ndim == 1:
        v = ad.reshape(v, (1, -1))
    if v.value.ndim == 2:
        if v.shape[1] != c * t:
            raise ShapeError(f"latent dimension {v.shape[1]} does not match model output size {c * t}")
        v = ad.reshape(v, (v.shape[0], c, t))
    if tuple(v.shape[1:]) != (c, t):
        raise ShapeError(f"latent shape {tuple(v.shape[1:])} does not match model output shape {(c, t)}")
    for layer in reversed(model.layers):
        v = layer.inverse(v)
    return v


@dataclass
class ArchitectureConfig:
    n_channels: int
    n_times: int
    n_classes: int = 2
    n_stages: int | None = None
    kernel_size: int = 7
    hidden_factor: int = 2
    seed: int = 0


def max_stages(n_times: int, cap: int | None = None) -> int:
    n = 0
    while n_times % (2 ** (n + 1)) == 0 and (cap is None or n < cap):
        n += 1
    return n


def default_stages(n_times: int) -> int:
    return max_stages(n_times, cap=4)


def _legal_kernel(kernel_size: int, n_times: int) -> int:
    """Largest odd kernel not above ``kernel_size`` that satisfies K <= 2T - 1."""
    return max(1, min(kernel_size, 2 * n_times - 1))


def build_architecture(config: ArchitectureConfig, class_names: list[str] | None = None) -> FlowModel:
    """n_stages x [squeeze, coupling, coupling, roll] followed by a Hartley layer."""
    if config.kernel_size % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {config.kernel_size}")
    n_stages = default_stages(config.n_times) if config.n_stages is None else config.n_stages
    allowed = max_stages(config.n_times)
    if n_stages > allowed:
        raise ShapeError(f"T={config.n_times} allows at most {allowed} squeeze stages, got n_stages={n_stages}")
    rng = np.random.default_rng(config.seed)
    c, t = config.n_channels, config.n_times
    layers: list = []
    for stage in range(n_stages):
        layers.append(Squeeze())
        c, t = 2 * c, t // 2
        k = _legal_kernel(config.kernel_size, t)
        for j in range(2):
            layers.append(Coupling.init(c, k, rng, config.hidden_factor, name=f"s{stage}c{j}"))
        layers.append(ChannelRoll())
    layers.append(Hartley())
    prior = ClassConditionalGaussian.init(config.n_classes, config.n_channels * config.n_times)
    return FlowModel(layers, prior, (config.n_channels, config.n_times), list(class_names or []))


def randomize(model: FlowModel, rng: np.random.Generator, gain: float = 0.5) -> FlowModel:
    """Overwrite every coupling parameter with random values (for invariant checks).

    Kernels get std ``gain / sqrt(fan_in)`` so activations stay O(input).
    """
    for layer in model.layers:
        for p in layer.params():
            if p.value.ndim == 3:
                fan_in = p.shape[1] * p.shape[2]
                p.value = gain / math.sqrt(fan_in) * rng.standard_normal(p.shape)
            else:
                p.value = 0.1 * rng.standard_normal(p.shape)
    return model
