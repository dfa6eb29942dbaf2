"""Invariant suites run by ``eegflow selfcheck``. Each returns a CheckResult."""
from __future__ import annotations

import itertools
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.optimize import linprog

from . import autodiff as ad
from .gradcheck import check_gradients
from .layers import ArchitectureConfig, FlowModel, build_architecture, flow_forward, flow_inverse, randomize
from .training import log_likelihoods, nll_loss
from .transport import DiscreteDistribution, OTConfig, cost_matrix, exact_ot, ot_generator_loss, sinkhorn


@dataclass
class CheckResult:
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""
    seconds: float = 0.0


def _random_model(rng: np.random.Generator, c: int, t: int, n_stages=None, kernel_size: int = 7,
                  hidden_factor: int = 2) -> FlowModel:
    model = build_architecture(ArchitectureConfig(c, t, n_stages=n_stages, kernel_size=kernel_size,
                                                  hidden_factor=hidden_factor,
                                                  seed=int(rng.integers(1 << 30))))
    randomize(model, rng)
    model.prior.means.value = rng.normal(size=model.prior.means.shape)
    model.prior.log_stds.value = 0.3 * rng.normal(size=model.prior.log_stds.shape)
    return model


def check_round_trip(n_models: int = 20, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_models):
        c = int(rng.choice([2, 4]))
        t = int(rng.choice([8, 16, 32]))
        model = _random_model(rng, c, t)
        x = rng.normal(size=(3, c, t))
        back = flow_inverse(model, flow_forward(model, x).latent).value
        worst = max(worst, float(np.max(np.abs(back - x))))
    return CheckResult("round trip max|f^-1(f(x)) - x|", worst, 1e-8, worst < 1e-8)


def jacobian_fd(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    d = x.size
    jac = np.empty((d, d))
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        jac[:, i] = (fn(x + e) - fn(x - e)) / (2 * h)
    return jac


def check_volume(n_points: int = 20, seed: int = 1) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _random_model(rng, 1, 2)
    worst = 0.0
    for _ in range(n_points):
        x = rng.normal(size=2)
        out = flow_forward(model, x.reshape(1, 2))
        if out.log_det_jacobian != 0.0:
            return CheckResult("volume ||det J| - 1|", np.inf, 1e-4, False, "nonzero reported log-det")
        jac = jacobian_fd(lambda v: flow_forward(model, v.reshape(1, 2)).latent.value[0], x)
        worst = max(worst, abs(abs(float(np.linalg.det(jac))) - 1.0))
    return CheckResult("volume ||det J| - 1| (2-D)", worst, 1e-4, worst < 1e-4)


def grid_mass(model: FlowModel, y: int, n_grid: int = 400, n_sigma: float = 8.0,
              rng: np.random.Generator | None = None) -> float:
    """Riemann sum of p(x | y) on a grid spanning +-n_sigma around samples of the model."""
    rng = rng or np.random.default_rng(0)
    samples = flow_inverse(model, model.prior.sample_node(np.full(4000, y), rng)).value.reshape(-1, 2)
    centre, spread = samples.mean(0), samples.std(0)
    axes = [np.linspace(c - n_sigma * s, c + n_sigma * s, n_grid) for c, s in zip(centre, spread)]
    gx, gy = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1).reshape(-1, 1, 2)
    ll = log_likelihoods(model, pts, np.full(len(pts), y), chunk=40000)
    cell = (axes[0][1] - axes[0][0]) * (axes[1][1] - axes[1][0])
    return float(np.exp(ll).sum() * cell)


def check_normalization(seed: int = 2) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _random_model(rng, 1, 2)
    worst = max(abs(grid_mass(model, y, 200, rng=rng) - 1.0) for y in range(2))
    return CheckResult("density mass |integral - 1| (2-D)", worst, 0.02, worst < 0.02)


def check_gradients_flow(seed: int = 3) -> CheckResult:
    rng = np.random.default_rng(seed)
    model = _random_model(rng, 2, 4, kernel_size=3, hidden_factor=1)
    x = rng.normal(size=(3, 2, 4))
    labels = np.array([0, 1, 1])
    err = check_gradients(lambda: nll_loss(model, x, labels), model.params())
    train = rng.normal(size=(4, 2, 4))
    ot_labels = np.array([0, 0, 1, 1])
    seed_ot = int(rng.integers(1 << 30))

    def ot_loss():
        return ot_generator_loss(model, train, ot_labels, np.random.default_rng(seed_ot), OTConfig())[0]

    err = max(err, check_gradients(ot_loss, model.params()))
    return CheckResult("gradient rel. error vs finite differences", err, 1e-4, err < 1e-4)


def _permutation_cost(dist: np.ndarray) -> float:
    n = dist.shape[0]
    return min(dist[np.arange(n), list(p)].sum() for p in itertools.permutations(range(n))) / n


def _lp_cost(a: np.ndarray, b: np.ndarray, dist: np.ndarray) -> float:
    n, m = dist.shape
    eq = np.zeros((n + m, n * m))
    for i in range(n):
        eq[i, i * m:(i + 1) * m] = 1
    for j in range(m):
        eq[n + j, j::m] = 1
    res = linprog(dist.ravel(), A_eq=eq, b_eq=np.concatenate([a, b]), bounds=(0, None), method="highs")
    return float(res.fun)


def check_transport(seed: int = 4) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for n in range(1, 6):
        for m in (n, 2 * n, n + 1):
            p = DiscreteDistribution.uniform(rng.normal(size=(n, 2)))
            q = DiscreteDistribution.uniform(rng.normal(size=(m, 2)))
            plan = exact_ot(p, q, "squared_euclidean")
            dist = cost_matrix(p.points, q.points, "squared_euclidean")
            ref = _permutation_cost(dist) if n == m else _lp_cost(p.weights, q.weights, dist)
            worst = max(worst, abs(plan.cost - ref))
    rel = 0.0
    for _ in range(5):
        p = DiscreteDistribution.uniform(rng.normal(size=(8, 2)))
        q = DiscreteDistribution.uniform(rng.normal(size=(8, 2)))
        exact = exact_ot(p, q, "squared_euclidean").cost
        approx = sinkhorn(p, q, "squared_euclidean", epsilon=1e-3).cost
        rel = max(rel, abs(approx - exact) / exact)
    ok = worst < 1e-9 and rel < 0.01
    return CheckResult("transport: exact vs enumeration/LP; sinkhorn rel.", max(worst, rel), 0.01, ok,
                       f"exact gap {worst:.1e}, sinkhorn rel. gap {rel:.1e}")


def check_model_file(model: FlowModel, seed: int = 5) -> CheckResult:
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2,) + model.input_shape)
    back = flow_inverse(model, flow_forward(model, x).latent).value
    err = float(np.max(np.abs(back - x)))
    return CheckResult("loaded model round trip", err, 1e-8, err < 1e-8)


SUITES: dict[str, Callable[[], CheckResult]] = {
    "round_trip": check_round_trip,
    "volume": check_volume,
    "normalization": check_normalization,
    "gradients": check_gradients_flow,
    "transport": check_transport,
}


def run_all(extra: list[Callable[[], CheckResult]] = ()) -> list[CheckResult]:
    results = []
    for fn in list(SUITES.values()) + list(extra):
        start = time.perf_counter()
        try:
            res = fn()
        except Exception as exc:  # a crashing suite is a failing suite
            res = CheckResult(getattr(fn, "__name__", "check"), float("nan"), 0.0, False,
                              f"{type(exc).__name__}: {exc}")
        res.seconds = time.perf_counter() - start
        results.append(res)
    return results


def format_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = [f"{'check':<{width}}  {'value':>10}  {'tol':>8}  result"]
    for r in results:
        lines.append(f"{r.name:<{width}}  {r.value:>10.3e}  {r.tolerance:>8.1e}  "
                     f"{'PASS' if r.passed else 'FAIL'}{'  ' + r.detail if r.detail else ''}")
    return "\n".join(lines)
