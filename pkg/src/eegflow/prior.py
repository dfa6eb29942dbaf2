"""Class-conditional diagonal Gaussian over the latent space."""
from __future__ import annotations

import numpy as np
from scipy.special import logsumexp as _lse

from . import autodiff as ad
from .autodiff import LOG_2PI, Node


class ClassConditionalGaussian:
    """Per-class mean and log standard deviation, both learnable.

    Storing log-std keeps the scale positive without constraints; this is the
    same as a per-class scaling layer followed by a per-class bias.
    """

    def __init__(self, means, log_stds):
        self.means = ad.parameter(means, "prior.means")
        self.log_stds = ad.parameter(log_stds, "prior.log_stds")
        if self.means.shape != self.log_stds.shape or self.means.value.ndim != 2:
            raise ValueError(f"means {self.means.shape} and log_stds {self.log_stds.shape} "
                             "must both be (n_classes, d)")
        if self.means.shape[0] < 1:
            raise ValueError("need at least one class")

    @classmethod
    def init(cls, n_classes: int, dim: int) -> "ClassConditionalGaussian":
        return cls(np.zeros((n_classes, dim)), np.zeros((n_classes, dim)))

    @property
    def n_classes(self) -> int:
        return self.means.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def params(self) -> list[Node]:
        return [self.means, self.log_stds]

    def _check_class(self, y) -> np.ndarray:
        y = np.atleast_1d(np.asarray(y))
        if y.dtype.kind not in "iu" or np.any(y < 0) or np.any(y >= self.n_classes):
            raise ValueError(f"class index out of range [0, {self.n_classes}): {y.tolist()}")
        return y.astype(np.intp)

    def log_prob_node(self, h: Node, labels) -> Node:
        """Per-sample log density (B,) for latents (B, d), differentiable in h and parameters."""
        labels = self._check_class(labels)
        mu = ad.take_rows(self.means, labels)
        ls = ad.take_rows(self.log_stds, labels)
        z = (h - mu) * ad.exp(-ls)
        return ad.sum(-ls - 0.5 * ad.square(z), axis=1) - 0.5 * LOG_2PI * self.dim

    def log_prob(self, h, y: int) -> float:
        h = np.asarray(h, dtype=np.float64).reshape(1, -1)
        return float(self.log_prob_node(Node(h), [y]).value[0])

    def class_log_probs(self, h) -> np.ndarray:
        """log p(h | y) for every class; (B, n_classes) for h of shape (B, d)."""
        h = np.asarray(h, dtype=np.float64)
        single = h.ndim == 1
        h = h.reshape(-1, self.dim)
        mu, ls = self.means.value, self.log_stds.value
        z = (h[:, None, :] - mu[None]) * np.exp(-ls)[None]
        out = np.sum(-ls[None] - 0.5 * z * z, axis=2) - 0.5 * LOG_2PI * self.dim
        return out[0] if single else out

    def class_posterior(self, h) -> np.ndarray:
        """Softmax of the class log densities under a uniform class prior."""
        lp = self.class_log_probs(h)
        return np.exp(lp - _lse(lp, axis=-1, keepdims=True))

    def log_prob_marginal(self, h) -> float | np.ndarray:
        lp = self.class_log_probs(h)
        out = _lse(lp, axis=-1) - np.log(self.n_classes)
        return float(out) if np.ndim(out) == 0 else out

    def sample_node(self, labels, rng: np.random.Generator) -> Node:
        """Reparameterized draws (B, d); differentiable in means and log-stds."""
        labels = self._check_class(labels)
        eps = rng.standard_normal((labels.size, self.dim))
        return ad.take_rows(self.means, labels) + ad.exp(ad.take_rows(self.log_stds, labels)) * eps

    def sample(self, y: int, rng: np.random.Generator) -> np.ndarray:
        return self.sample_node([y], rng).value[0]
