"""Numerical checks of the compounding-error bounds for recursive and direct forecasting.

All distances between states are Euclidean. On deterministic systems the
1-Wasserstein distance between Dirac beliefs is the distance between their
points, so every bound below is checked on exact point errors.

Documentation-only symbols: the value-level Lipschitz constants L_Q, L_pi, L_V
and the performance-difference terms I_true, I_recursive, I_direct have no
executable counterpart here; this module verifies the belief-error layer those
arguments reduce to.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .numcore.rng import RngStreams

MODES = ("recursive", "direct_proxy")


class BoundViolation(AssertionError):
    """A measured recursive error exceeded its geometric bound."""

    def __init__(self, report: "BoundReport"):
        self.report = report
        bad = [r.delta for r in report.rows if r.violated]
        super().__init__(f"recursive error above the geometric bound at delta={bad}")


@dataclass
class LipschitzSystem:
    """Batched maps ``f(x, a)`` and ``f_theta(x, a)`` with certified constants."""

    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    f_theta: Callable[[np.ndarray, np.ndarray], np.ndarray]
    L_P: float
    eps_P: float
    state_dim: int
    action_dim: int = 0
    deterministic: bool = True
    state_scale: float = 1.0
    name: str = "system"


def _scalar_system(L: float, eps: float, name: str) -> LipschitzSystem:
    return LipschitzSystem(lambda x, a: L * x, lambda x, a: L * x + eps, L, eps, 1, 0,
                           name=name)


PRESETS: dict[str, Callable[[], LipschitzSystem]] = {
    "expansive": lambda: _scalar_system(1.2, 0.01, "expansive"),
    "contraction": lambda: _scalar_system(0.5, 0.01, "contraction"),
    "exact": lambda: _scalar_system(1.2, 0.0, "exact"),
}


def preset_system(name: str) -> LipschitzSystem:
    try:
        return PRESETS[name]()
    except KeyError:
        raise ValueError(f"unknown theory preset {name!r}; choose from {sorted(PRESETS)}") from None


def linear_system(A, B=None, bias=None, name: str = "linear") -> LipschitzSystem:
    """``f = Ax + Bu`` and ``f_theta = f + bias``; ``L_P`` is the larger spectral norm."""
    A = np.atleast_2d(np.asarray(A, dtype=np.float64))
    n = A.shape[0]
    B = np.zeros((n, 0)) if B is None else np.atleast_2d(np.asarray(B, dtype=np.float64))
    bias = np.zeros(n) if bias is None else np.asarray(bias, dtype=np.float64)
    L = max(np.linalg.norm(A, 2), np.linalg.norm(B, 2) if B.size else 0.0)

    def f(x, a):
        return x @ A.T + (a @ B.T if B.shape[1] else 0.0)

    return LipschitzSystem(f, lambda x, a: f(x, a) + bias, float(L),
                           float(np.linalg.norm(bias)), n, B.shape[1], name=name)


# ---------------------------------------------------------------------------
# bounds


def geometric_bound(L_P: float, eps_P: float, delta: int) -> float:
    """``sum_{k<delta} L_P^k * eps_P`` by explicit summation (exact at L_P = 1)."""
    if L_P < 0 or eps_P < 0 or delta < 1:
        raise ValueError("need L_P >= 0, eps_P >= 0 and delta >= 1")
    total, term = 0.0, 1.0
    for _ in range(int(delta)):
        total += term
        term *= L_P
    return total * eps_P


def _as_distribution(delay_dist) -> dict[int, float]:
    if hasattr(delay_dist, "probabilities"):
        delay_dist = delay_dist.probabilities()
    if isinstance(delay_dist, dict):
        dist = {int(k): float(v) for k, v in delay_dist.items()}
    else:
        dist = {i + 1: float(w) for i, w in enumerate(np.asarray(delay_dist, dtype=np.float64))}
    if any(k < 1 for k in dist) or any(w < 0 for w in dist.values()):
        raise ValueError("delays must be >= 1 with nonnegative weights")
    if abs(math.fsum(dist.values()) - 1.0) > 1e-12:
        raise ValueError("delay weights must sum to 1")
    return dist


def stochastic_bound(L_P: float, eps_P: float, delay_dist) -> float:
    """Expectation of :func:`geometric_bound` over a finite delay distribution.

    ``delay_dist`` is a weight vector over ``1..delta_max``, a ``{delta: weight}``
    dict, or a :class:`~delaybelief.delay.DelaySpec`.
    """
    dist = _as_distribution(delay_dist)
    return math.fsum(w * geometric_bound(L_P, eps_P, d) for d, w in sorted(dist.items()) if w)


def empirical_lipschitz(system: LipschitzSystem, n_pairs: int, seed: int,
                        scale: float | None = None) -> float:
    """Largest observed ``|f(x1,a1) - f(x2,a2)| / (|x1-x2| + |a1-a2|)``: a lower bound on L_P."""
    if n_pairs < 1:
        raise ValueError("n_pairs must be >= 1")
    rng = RngStreams(seed).stream("lipschitz")
    scale = system.state_scale if scale is None else scale
    x1 = rng.normal(0.0, scale, (n_pairs, system.state_dim))
    x2 = rng.normal(0.0, scale, (n_pairs, system.state_dim))
    a1 = rng.uniform(-1.0, 1.0, (n_pairs, system.action_dim))
    a2 = rng.uniform(-1.0, 1.0, (n_pairs, system.action_dim))
    num = np.linalg.norm(system.f(x1, a1) - system.f(x2, a2), axis=-1)
    den = np.linalg.norm(x1 - x2, axis=-1) + np.linalg.norm(a1 - a2, axis=-1)
    ok = den > 0
    if not ok.any():
        raise ValueError("all sampled pairs coincide")
    return float(np.max(num[ok] / den[ok]))


def w1_empirical(samples_p, samples_q) -> float:
    """1-Wasserstein distance between two 1-D empirical distributions.

    Integrates ``|F^-1(u) - G^-1(u)|`` exactly over the merged grid of quantile
    breakpoints; with equal sizes this is the mean absolute difference of the
    sorted samples.
    """
    p = np.sort(np.asarray(samples_p, dtype=np.float64).ravel())
    q = np.sort(np.asarray(samples_q, dtype=np.float64).ravel())
    if p.size == 0 or q.size == 0:
        raise ValueError("w1_empirical needs nonempty samples")
    if p.size == q.size:
        return float(np.mean(np.abs(p - q)))
    grid = np.union1d(np.arange(1, p.size + 1) / p.size, np.arange(1, q.size + 1) / q.size)
    lo = np.concatenate([[0.0], grid[:-1]])
    mid = (lo + grid) / 2.0
    ip = np.minimum((mid * p.size).astype(np.int64), p.size - 1)
    iq = np.minimum((mid * q.size).astype(np.int64), q.size - 1)
    return float(np.sum((grid - lo) * np.abs(p[ip] - q[iq])))


# ---------------------------------------------------------------------------
# experiments


@dataclass
class BoundRow:
    delta: int
    L_P: float
    eps_P: float
    geometric_bound: float
    measured_recursive: float = float("nan")
    eps_direct: float = float("nan")
    verdict: bool | None = None
    margin: float = float("nan")

    @property
    def violated(self) -> bool:
        m = self.measured_recursive
        return bool(m == m and m > self.geometric_bound * (1 + 1e-12) + 1e-15)


@dataclass
class BoundReport:
    rows: list[BoundRow] = field(default_factory=list)
    modes: set[str] = field(default_factory=set)

    def row(self, delta: int) -> BoundRow:
        for r in self.rows:
            if r.delta == delta:
                return r
        raise KeyError(delta)

    @property
    def ok(self) -> bool:
        return not any(r.violated for r in self.rows)

    def merge(self, other: "BoundReport") -> "BoundReport":
        """Combine a recursive and a direct-proxy report over matching deltas."""
        if [r.delta for r in self.rows] != [r.delta for r in other.rows]:
            raise ValueError("reports cover different deltas")
        rows = []
        for a, b in zip(self.rows, other.rows):
            pick = lambda x, y: x if x == x else y  # noqa: E731  (nan-aware)
            rows.append(BoundRow(a.delta, a.L_P, a.eps_P, a.geometric_bound,
                                 pick(a.measured_recursive, b.measured_recursive),
                                 pick(a.eps_direct, b.eps_direct)))
        return BoundReport(rows, self.modes | other.modes)


def rollout_error_experiment(system: LipschitzSystem, delta_list, mode: str = "recursive",
                             n_rollouts: int = 64, seed: int = 0, direct_curves=None,
                             bound_scale: float = 1.0, strict: bool = True) -> BoundReport:
    """Measure recursive rollout errors (or take direct-forecast errors) per delta.

    ``recursive``: iterate ``f_theta`` from true anchors under shared random
    actions and record the worst terminal error over ``n_rollouts``; raise
    :class:`BoundViolation` (when ``strict``) if any exceeds the bound.
    ``direct_proxy``: ``direct_curves[delta]`` is a trained direct forecaster's
    per-horizon error curve and its max becomes ``eps_direct``.
    ``bound_scale`` multiplies every bound (a fault-injection knob for tests).
    """
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if not system.deterministic:
        raise ValueError("bound checks need a deterministic system")
    deltas = [int(d) for d in delta_list]
    if not deltas:
        raise ValueError("delta_list is empty")
    report = BoundReport(modes={mode})
    rng = RngStreams(seed).stream("rollouts")
    for d in deltas:
        row = BoundRow(d, system.L_P, system.eps_P,
                       bound_scale * geometric_bound(system.L_P, system.eps_P, d))
        if mode == "recursive":
            x = rng.normal(0.0, system.state_scale, (n_rollouts, system.state_dim))
            acts = rng.uniform(-1.0, 1.0, (d, n_rollouts, system.action_dim))
            x_hat = x.copy()
            for k in range(d):
                x, x_hat = system.f(x, acts[k]), system.f_theta(x_hat, acts[k])
            row.measured_recursive = float(np.max(np.linalg.norm(x_hat - x, axis=-1)))
        else:
            if direct_curves is None or d not in direct_curves:
                raise ValueError(f"direct_proxy mode needs an error curve for delta={d}")
            row.eps_direct = float(np.max(np.asarray(direct_curves[d], dtype=np.float64)))
        report.rows.append(row)
    if strict and not report.ok:
        raise BoundViolation(report)
    return report


def comparison_verdict(report: BoundReport) -> list[tuple[bool, float]]:
    """Per delta: ``(eps_direct <= geometric bound, bound - eps_direct)``; boundary counts as true."""
    out = []
    for r in report.rows:
        if r.eps_direct != r.eps_direct:
            raise ValueError(f"no direct-forecast error for delta={r.delta}")
        r.margin = r.geometric_bound - r.eps_direct
        r.verdict = bool(r.eps_direct <= r.geometric_bound)
        out.append((r.verdict, r.margin))
    return out


BOUND_COLUMNS = ["delta", "L_P", "eps_P", "measured_recursive", "geometric_bound", "eps_direct",
                 "verdict", "margin"]


def write_bound_csv(path, report: BoundReport) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(BOUND_COLUMNS)
        for r in report.rows:
            verdict = "" if r.verdict is None else str(r.verdict).lower()
            w.writerow([r.delta] + [f"{v:.12g}" for v in (r.L_P, r.eps_P, r.measured_recursive,
                                                          r.geometric_bound, r.eps_direct)]
                       + [verdict, f"{r.margin:.12g}"])
