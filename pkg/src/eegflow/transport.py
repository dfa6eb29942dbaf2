"""Optimal transport between empirical distributions.

Exact plans come from a shortest-augmenting-path Hungarian solver when both
distributions are uniform and one size divides the other (each point of the
smaller set is replicated), and from a linear program otherwise. Sinkhorn
iterations in the log domain give the entropic approximation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

from . import autodiff as ad
from .autodiff import Node, ShapeError

METRICS = ("euclidean", "squared_euclidean")


class TransportError(ValueError):
    pass


@dataclass
class DiscreteDistribution:
    points: np.ndarray  # (n, d)
    weights: np.ndarray  # (n,)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64)
        if self.points.ndim == 1:
            self.points = self.points[:, None]
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.shape != (self.points.shape[0],):
            raise TransportError("one weight per point is required")
        if np.any(self.weights < 0) or abs(self.weights.sum() - 1.0) > 1e-12:
            raise TransportError("weights must be nonnegative and sum to 1")

    @classmethod
    def uniform(cls, points) -> "DiscreteDistribution":
        points = np.asarray(points, dtype=np.float64)
        n = points.shape[0]
        if n == 0:
            raise TransportError("empty distribution")
        return cls(points, np.full(n, 1.0 / n))

    @property
    def is_uniform(self) -> bool:
        return bool(np.all(self.weights == self.weights[0]))


@dataclass
class TransportPlan:
    coupling: np.ndarray  # (n, m)
    cost: float
    converged: bool = True
    iterations: int = 0


def cost_matrix(p, q, metric: str = "squared_euclidean") -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    p = p[:, None] if p.ndim == 1 else p.reshape(p.shape[0], -1)
    q = q[:, None] if q.ndim == 1 else q.reshape(q.shape[0], -1)
    if p.shape[1] != q.shape[1]:
        raise ShapeError(f"point dimension mismatch: {p.shape[1]} vs {q.shape[1]}")
    if metric not in METRICS:
        raise TransportError(f"unknown metric {metric!r}; use one of {METRICS}")
    # direct differences (not the |p|^2 + |q|^2 - 2pq expansion) keep identical
    # points at exactly zero distance; rows are chunked to bound memory
    sq = np.empty((p.shape[0], q.shape[0]))
    step = max(1, 4_000_000 // max(1, q.shape[0] * p.shape[1]))
    for start in range(0, p.shape[0], step):
        diff = p[start:start + step, None, :] - q[None, :, :]
        sq[start:start + step] = np.einsum("nmd,nmd->nm", diff, diff)
    return sq if metric == "squared_euclidean" else np.sqrt(sq)


def linear_assignment(cost) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost matching of every row of a (n, m) matrix, n <= m, to distinct columns.

    Rows are added one at a time; each addition finds a shortest augmenting
    path under reduced costs (Hungarian method with potentials, O(n^2 m)).
    Returns (row indices, column indices). A tall matrix is solved transposed.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ShapeError(f"cost must be 2-D, got shape {cost.shape}")
    if cost.shape[0] > cost.shape[1]:
        cols, rows = linear_assignment(cost.T)
        order = np.argsort(rows)
        return rows[order], cols[order]
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    match = np.zeros(m + 1, dtype=np.intp)  # match[j]: 1-based row on column j, 0 = free
    way = np.zeros(m + 1, dtype=np.intp)
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = match[j0]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            free = ~used[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            masked = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(masked)) + 1
            delta = masked[j1 - 1]
            seen = np.flatnonzero(used)
            u[match[seen]] += delta
            v[seen] -= delta
            minv[~used] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    cols = np.flatnonzero(match[1:])
    rows = match[1:][cols] - 1
    order = np.argsort(rows)
    return rows[order], cols[order]


def _plan(coupling: np.ndarray, dist: np.ndarray, **kw) -> TransportPlan:
    return TransportPlan(coupling, float(np.sum(coupling * dist)), **kw)


def _replica_assignment(dist: np.ndarray) -> np.ndarray:
    """Exact plan for uniform weights with m = k * n (n rows)."""
    n, m = dist.shape
    k = m // n
    rows, cols = linear_assignment(np.repeat(dist, k, axis=0))
    coupling = np.zeros((n, m))
    np.add.at(coupling, (rows // k, cols), 1.0 / m)
    return coupling


def exact_ot(p: DiscreteDistribution, q: DiscreteDistribution, metric: str = "squared_euclidean",
             *, max_entries: int = 1_000_000, dist: np.ndarray | None = None) -> TransportPlan:
    n, m = p.points.shape[0], q.points.shape[0]
    if n * m > max_entries:
        raise TransportError(f"{n}x{m} problem exceeds the exact-solver cap of {max_entries} "
                             "entries; use sinkhorn instead")
    dist = cost_matrix(p.points, q.points, metric) if dist is None else dist
    if p.is_uniform and q.is_uniform:
        if m % n == 0:
            return _plan(_replica_assignment(dist), dist)
        if n % m == 0:
            return _plan(_replica_assignment(dist.T).T, dist)
    return _plan(_lp_plan(p.weights, q.weights, dist), dist)


def _lp_plan(a: np.ndarray, b: np.ndarray, dist: np.ndarray) -> np.ndarray:
    n, m = dist.shape
    rows = np.kron(np.eye(n), np.ones((1, m)))
    cols = np.kron(np.ones((1, n)), np.eye(m))
    res = linprog(dist.ravel(), A_eq=np.vstack([rows, cols]), b_eq=np.concatenate([a, b]),
                  bounds=(0, None), method="highs")
    if not res.success:
        raise TransportError(f"linear program failed: {res.message}")
    return np.maximum(res.x.reshape(n, m), 0.0)


def _logsumexp(a: np.ndarray, axis: int) -> np.ndarray:
    top = a.max(axis=axis, keepdims=True)
    return (top + np.log(np.exp(a - top).sum(axis=axis, keepdims=True))).squeeze(axis)


def sinkhorn(p: DiscreteDistribution, q: DiscreteDistribution, metric: str = "squared_euclidean",
             epsilon: float = 1e-2, max_iters: int = 10_000, tol: float = 1e-9, *,
             dist: np.ndarray | None = None, eps_scaling: bool = True) -> TransportPlan:
    """Entropic OT by log-domain Sinkhorn iterations.

    With ``eps_scaling`` the regularization starts at the cost scale and is
    decreased geometrically to ``epsilon``, warm-starting the dual potentials.
    ``converged`` is False when the row-marginal error is still above ``tol``
    after ``max_iters`` iterations.
    """
    if epsilon <= 0:
        raise TransportError(f"epsilon must be positive, got {epsilon}")
    dist = cost_matrix(p.points, q.points, metric) if dist is None else dist
    log_a = np.log(np.where(p.weights > 0, p.weights, 1e-300))
    log_b = np.log(np.where(q.weights > 0, q.weights, 1e-300))
    f = np.zeros(dist.shape[0])
    g = np.zeros(dist.shape[1])
    schedule = [epsilon]
    if eps_scaling:
        scale = max(float(dist.max()), epsilon)
        while scale > epsilon * 2:
            schedule.insert(-1, scale)
            scale /= 2
    iters, err = 0, np.inf
    for eps in schedule:
        final = eps == schedule[-1]
        for _ in range(max_iters):
            f = eps * (log_a - _logsumexp((g[None, :] - dist) / eps, axis=1))
            g = eps * (log_b - _logsumexp((f[:, None] - dist) / eps, axis=0))
            iters += 1
            if iters % 10:
                continue
            # columns are exact after the g update; only rows can be off
            row = np.exp(_logsumexp((f[:, None] + g[None, :] - dist) / eps, axis=1))
            err = np.abs(row - p.weights).sum()
            if err < (tol if final else max(tol, 1e-6)):
                break
    coupling = np.exp((f[:, None] + g[None, :] - dist) / schedule[-1])
    return _plan(coupling, dist, converged=bool(err < tol), iterations=iters)


# -------------------------------------------------------------- differentiable

def transport_cost(generated, real: np.ndarray, coupling: np.ndarray,
                   metric: str = "squared_euclidean") -> Node:
    """sum_ij coupling[i, j] * dist(real_i, generated_j) with the plan held fixed.

    ``generated`` (m, D) is a Node; gradients flow into it only.
    """
    gen = generated if isinstance(generated, Node) else Node(generated)
    gv = gen.value.reshape(gen.shape[0], -1)
    rv = np.asarray(real, dtype=np.float64).reshape(real.shape[0], -1)
    if metric not in METRICS:
        raise TransportError(f"unknown metric {metric!r}")
    dist = cost_matrix(rv, gv, metric)
    value = np.sum(coupling * dist)
    if metric == "squared_euclidean":
        weight = 2.0 * coupling
    else:
        weight = np.divide(coupling, dist, out=np.zeros_like(dist), where=dist > 0)

    def vjp(g):
        # d/dg_j sum_i w_ij |g_j - r_i|^2 / 2 = (sum_i w_ij) g_j - sum_i w_ij r_i
        return (g * (weight.sum(0)[:, None] * gv - weight.T @ rv)).reshape(gen.shape)

    return ad._make(np.asarray(value), "transport_cost", [(gen, vjp)])


ad.OPS["transport_cost"] = transport_cost


# ------------------------------------------------------------- generator loss

@dataclass
class OTConfig:
    ratio: int = 3
    metric: str = "squared_euclidean"
    solver: str = "exact"  # or "sinkhorn"
    epsilon: float = 1e-2  # sinkhorn, relative to the median pairwise cost
    class_conditional: bool = True
    learn_log_stds: bool = False
    calibrate_scale: bool = True  # only with fixed log-stds


def solve_plan(real: np.ndarray, generated: np.ndarray, config: OTConfig) -> np.ndarray:
    """Plan between uniform empirical measures on ``real`` (n) and ``generated`` (m)."""
    p = DiscreteDistribution.uniform(real.reshape(real.shape[0], -1))
    q = DiscreteDistribution.uniform(generated.reshape(generated.shape[0], -1))
    dist = cost_matrix(p.points, q.points, config.metric)
    if config.solver == "exact":
        return exact_ot(p, q, config.metric, dist=dist).coupling
    if config.solver == "sinkhorn":
        eps = config.epsilon * max(float(np.median(dist)), 1e-12)
        return sinkhorn(p, q, config.metric, epsilon=eps, dist=dist).coupling
    raise TransportError(f"unknown solver {config.solver!r}")


def generated_labels(labels: np.ndarray, ratio: int) -> np.ndarray:
    """``ratio`` generated labels per training label, so class frequencies match exactly."""
    return np.sort(np.repeat(np.asarray(labels, dtype=np.int64), ratio))


def ot_generator_loss(model, train_data: np.ndarray, train_labels: np.ndarray,
                      rng: np.random.Generator, config: OTConfig | None = None):
    """Transport cost between the training set and ``ratio`` times as many generated signals.

    Latents are drawn from the class-conditional prior and inverted through the
    flow. With ``class_conditional`` the plan only pairs points of the same
    class: each class block carries mass n_c / n. The plan is a constant of the
    step. Returns (loss node, plan, generated labels).
    """
    from .layers import flow_inverse

    config = config or OTConfig()
    n = train_data.shape[0]
    if n == 0:
        raise TransportError("empty training set")
    gen_labels = generated_labels(train_labels, config.ratio)
    gen = flow_inverse(model, model.prior.sample_node(gen_labels, rng))
    gen_flat = ad.reshape(gen, (gen.shape[0], -1))
    real = train_data.reshape(n, -1)
    gv = gen_flat.value
    plan = np.zeros((n, gv.shape[0]))
    if config.class_conditional:
        for y in np.unique(train_labels):
            ri = np.flatnonzero(train_labels == y)
            gi = np.flatnonzero(gen_labels == y)
            plan[np.ix_(ri, gi)] = solve_plan(real[ri], gv[gi], config) * (ri.size / n)
    else:
        plan = solve_plan(real, gv, config)
    return transport_cost(gen_flat, real, plan, config.metric), plan, gen_labels
