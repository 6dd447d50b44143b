"""Numerical check that the oracle DTM chain converges in mean to the FM velocity.

Starting from ``X_0 = x``, the chain takes ``k`` steps ``X += h * Y`` where each
``Y`` is an exact posterior draw of ``X_T - X_0`` given the current state. The
average increment ``(X_{kh} - x) / (kh)`` should converge in mean square to
``f_0(x) = E[X_T] - x`` as ``h -> 0`` with ``k -> inf`` and ``kh -> 0``. The
mean-square error splits into a variance term ``O(1/k)`` and a drift term
``O(kh)``; ``k = ceil(h^-1/2)`` balances them, so quartering ``h`` should roughly
halve the error.

The target is truncated to a Mahalanobis ball so the boundedness assumption on
the data holds, and the two regularity assumptions of the argument (Lipschitz
mean field, bounded second moment of the increments) are checked numerically.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .errors import ConfigError
from .oracle import GmmTarget, gaussian_posterior_sample, gmm_marginal_velocity

HARNESS_TARGET = GmmTarget.gaussian(1.0, 0.5)
HARNESS_X = (-1.0, 0.0, 2.0)
HARNESS_H = tuple(2.0 ** -e for e in range(4, 11))
TRUNCATION = 6.0
CURVE_COLUMNS = ("h", "k", "kh", "mse", "ci_lo", "ci_hi")


def sqrt_k_rule(h: float) -> int:
    """``k(h) = ceil(h^-1/2)``; the epsilon guards exact powers of four."""
    return int(math.ceil(h ** -0.5 - 1e-9))


def _start(x, target: GmmTarget) -> np.ndarray:
    x = np.atleast_1d(np.asarray(x, dtype=np.float64))
    if x.shape != (target.dim,):
        raise ConfigError(f"start point must have dimension {target.dim}")
    return x


def f0(target: GmmTarget, x) -> np.ndarray:
    """Mean increment at the start of the chain, ``E[X_T - X_0 | X_0 = x]``."""
    return gmm_marginal_velocity(target, _start(x, target), 0.0)


def chain_ratios(h: float, k: int) -> np.ndarray:
    """Ratios visited by the chain: ``0, h, ..., kh``."""
    return np.arange(k + 1) * h


def run_dtm_chain(target: GmmTarget, x, h: float, k: int, rng: np.random.Generator, n_chains: int = 1,
                  bound: float | None = TRUNCATION, return_path: bool = False):
    """Run ``n_chains`` oracle DTM chains of ``k`` steps of size ``h`` from ``x``.

    Returns ``X_{kh}`` with shape ``(n_chains, d)``; with ``return_path`` also the
    states ``(k + 1, n_chains, d)`` and the increments ``(k, n_chains, d)``.
    """
    if h <= 0 or k < 1:
        raise ConfigError("need h > 0 and k >= 1")
    if k * h > 0.5:
        raise ConfigError(f"kh = {k * h} exceeds 1/2")
    x = _start(x, target)
    state = np.tile(x, (n_chains, 1))
    ratios = chain_ratios(h, k)
    path, incs = [state.copy()], []
    for r in ratios[:-1]:
        y = gaussian_posterior_sample(target, state, r, rng, bound=bound)
        state = state + h * y
        if return_path:
            path.append(state.copy())
            incs.append(y)
    if return_path:
        return state, np.stack(path), np.stack(incs)
    return state


@dataclass
class ConvergenceRun:
    x: np.ndarray
    f0: np.ndarray
    h: np.ndarray
    k: np.ndarray
    mse: np.ndarray
    stderr: np.ndarray
    ci_lo: np.ndarray
    ci_hi: np.ndarray
    n_chains: int
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.k * self.h > 0.5):
            raise ConfigError("every h must satisfy kh <= 1/2")
        if not np.all(np.isfinite(self.mse)):
            raise ValueError("non-finite error estimate")

    @property
    def kh(self) -> np.ndarray:
        return self.k * self.h

    def quarter_ratios(self) -> np.ndarray:
        """``mse(h) / mse(h/4)`` for every pair present in the sweep."""
        out = []
        for i, h in enumerate(self.h):
            j = np.flatnonzero(np.isclose(self.h, h / 4))
            if j.size:
                out.append(self.mse[i] / self.mse[j[0]])
        return np.asarray(out)

    def weakly_decreasing(self, noise_mult: float = 2.0) -> bool:
        """Each error is at most the previous one plus ``noise_mult`` combined stderrs."""
        tol = noise_mult * np.hypot(self.stderr[1:], self.stderr[:-1])
        return bool(np.all(self.mse[1:] <= self.mse[:-1] + tol))

    def final_bound(self, rel: float = 0.05, floor: float = 1e-3) -> float:
        return rel * float(np.sum(self.f0**2)) + floor

    def rows(self) -> list[dict]:
        return [dict(zip(CURVE_COLUMNS, vals)) for vals in
                zip(self.h, self.k, self.kh, self.mse, self.ci_lo, self.ci_hi)]

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CURVE_COLUMNS)
            writer.writeheader()
            for row in self.rows():
                writer.writerow({c: repr(float(v)) if c != "k" else int(v) for c, v in row.items()})


def convergence_curve(target: GmmTarget, x, h_list: Sequence[float], k_rule: Callable[[float], int],
                      n_chains: int, rng: np.random.Generator, n_boot: int = 200,
                      bound: float | None = TRUNCATION) -> ConvergenceRun:
    """Mean-square deviation of the average chain increment from ``f_0(x)`` per ``h``.

    Confidence intervals are bootstrap percentile intervals (95%) over chains.
    """
    h_arr = np.asarray(h_list, dtype=np.float64)
    if h_arr.ndim != 1 or h_arr.size == 0 or np.any(np.diff(h_arr) >= 0):
        raise ConfigError("h list must be non-empty and strictly decreasing")
    ks = np.array([k_rule(h) for h in h_arr])
    if np.any(ks < 1) or np.any(ks * h_arr > 0.5):
        raise ConfigError("k rule must give k >= 1 and kh <= 1/2")
    x = _start(x, target)
    target_inc = f0(target, x)
    mse, se, lo, hi = [], [], [], []
    for h, k in zip(h_arr, ks):
        end = run_dtm_chain(target, x, h, int(k), rng, n_chains, bound)
        sq = np.sum(((end - x) / (k * h) - target_inc) ** 2, axis=1)
        idx = rng.integers(0, n_chains, size=(n_boot, n_chains))
        boot = sq[idx].mean(axis=1)
        mse.append(sq.mean())
        se.append(sq.std(ddof=1) / math.sqrt(n_chains))
        lo.append(np.quantile(boot, 0.025))
        hi.append(np.quantile(boot, 0.975))
    return ConvergenceRun(x, target_inc, h_arr, ks, np.array(mse), np.array(se), np.array(lo), np.array(hi),
                          n_chains)


# -- assumption checks ----------------------------------------------------------


def lipschitz_estimate(target: GmmTarget, lo: float, hi: float, r_max: float = 0.5, n_x: int = 81,
                       n_r: int = 41) -> float:
    """Largest ``|f_s(y) - f_t(x)| / (|s - t| + |x - y|)`` between neighbouring grid points.

    Grid over ``[lo, hi]`` along every axis (1-D targets only for dim > 1 cost
    reasons: the grid is on the first axis, others held at the target mean).
    """
    xs = np.linspace(lo, hi, n_x)
    rs = np.linspace(0.0, r_max, n_r)
    pts = np.tile(target.mean, (n_x, 1))
    pts[:, 0] = xs
    f = np.stack([gmm_marginal_velocity(target, pts, r) for r in rs])  # (n_r, n_x, d)
    dx = np.linalg.norm(np.diff(f, axis=1), axis=-1) / np.diff(xs)[None, :]
    dr = np.linalg.norm(np.diff(f, axis=0), axis=-1) / np.diff(rs)[:, None]
    return float(max(dx.max(), dr.max()))


def state_bound(x, radius: float) -> float:
    """Pathwise bound ``||x|| + 3r/2`` on the chain states while ``kh <= 1/2``."""
    return float(np.linalg.norm(x)) + 1.5 * radius


def second_moment_bound(x, radius: float) -> float:
    """``c(x) = 2/(1-t)^2 c~^2 + 2 (1+t)^2/(1-t)^2 r^2`` at the worst case ``t = 1/2``."""
    c_tilde = state_bound(x, radius)
    t = 0.5
    return 2.0 / (1 - t) ** 2 * c_tilde**2 + 2.0 * (1 + t) ** 2 / (1 - t) ** 2 * radius**2


@dataclass(frozen=True)
class MomentCheck:
    max_state_norm: float
    state_bound: float
    max_second_moment: float
    second_moment_bound: float

    @property
    def passed(self) -> bool:
        return self.max_state_norm <= self.state_bound and self.max_second_moment <= self.second_moment_bound


def moment_check(target: GmmTarget, x, h: float, k: int, n_chains: int, rng: np.random.Generator,
                 bound: float = TRUNCATION) -> MomentCheck:
    """Check the pathwise state bound and ``E||Y_{lh}||^2 <= c(x)`` for every step."""
    radius = float(np.max(np.linalg.norm(target.means, axis=1))
                   + bound * np.sqrt(np.max(target.variances)))
    _, path, incs = run_dtm_chain(target, x, h, k, rng, n_chains, bound, return_path=True)
    return MomentCheck(float(np.linalg.norm(path, axis=-1).max()), state_bound(x, radius),
                       float(np.sum(incs**2, axis=-1).mean(axis=1).max()), second_moment_bound(x, radius))


def fm_euler_chain(target: GmmTarget, x, h: float, k: int) -> np.ndarray:
    """Deterministic chain ``X += h u(X, lh)`` with the exact marginal velocity."""
    state = _start(x, target)
    for r in chain_ratios(h, k)[:-1]:
        state = state + h * gmm_marginal_velocity(target, state, r)
    return state


def taylor_residuals(target: GmmTarget, x, h_list: Sequence[float], k_rule: Callable[[float], int]):
    """``(kh, ||X_{kh} - x - kh f_0(x)||)`` for the deterministic Euler chain."""
    x = _start(x, target)
    kh, res = [], []
    for h in h_list:
        k = k_rule(h)
        end = fm_euler_chain(target, x, h, k)
        kh.append(k * h)
        res.append(float(np.linalg.norm(end - x - k * h * f0(target, x))))
    return np.asarray(kh), np.asarray(res)
