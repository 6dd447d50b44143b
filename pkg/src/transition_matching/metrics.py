"""Distribution distances, bootstrap calibration and experiment reports."""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numba
import numpy as np

from .errors import ShapeError
from .processes import Scheduler, independent_linear_pair, linear_pair

CSV_COLUMNS = ("metric", "value", "stderr", "n_a", "n_b", "seed", "config_hash")

# clamp tolerance for the unbiased statistic on identical inputs
CLAMP_TOL = 1e-12


@numba.njit(cache=True, fastmath=False)
def _cross_sum(a, b):
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(b.shape[0]):
            acc = 0.0
            for k in range(a.shape[1]):
                diff = a[i, k] - b[j, k]
                acc += diff * diff
            total += np.sqrt(acc)
    return total


@numba.njit(cache=True, fastmath=False)
def _within_sum(a):
    """Sum over i < j of ||a_i - a_j||."""
    total = 0.0
    for i in range(a.shape[0]):
        for j in range(i + 1, a.shape[0]):
            acc = 0.0
            for k in range(a.shape[1]):
                diff = a[i, k] - a[j, k]
                acc += diff * diff
            total += np.sqrt(acc)
    return total


def _sorted_pair_sum(x: np.ndarray) -> float:
    """Sum over i < j of |x_i - x_j| for 1-D data, via sorting."""
    x = np.sort(x)
    n = x.shape[0]
    return float(np.dot(x, 2.0 * np.arange(n) - (n - 1)))


def _as_samples(x) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=np.float64)
    return x.reshape(-1, 1) if x.ndim == 1 else x


def energy_statistic(a, b, unbiased: bool = True) -> float:
    """Raw (unclamped) energy distance ``2E|A-B| - E|A-A'| - E|B-B'|``.

    ``unbiased`` uses U-statistics for the within-set terms (needs two points per
    set); otherwise the plug-in V-statistic that includes the zero diagonal.
    """
    a, b = _as_samples(a), _as_samples(b)
    if a.shape[1] != b.shape[1]:
        raise ShapeError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    na, nb = a.shape[0], b.shape[0]
    if a.shape[1] == 1:
        sa, sb = _sorted_pair_sum(a[:, 0]), _sorted_pair_sum(b[:, 0])
        cross_sum = _sorted_pair_sum(np.concatenate([a[:, 0], b[:, 0]])) - sa - sb
    else:
        sa, sb, cross_sum = _within_sum(a), _within_sum(b), _cross_sum(a, b)
    cross = cross_sum / (na * nb)
    if unbiased:
        if na < 2 or nb < 2:
            raise ValueError("the unbiased statistic needs at least two samples per set")
        wa = 2.0 * sa / (na * (na - 1))
        wb = 2.0 * sb / (nb * (nb - 1))
    else:
        wa = 2.0 * sa / (na * na)
        wb = 2.0 * sb / (nb * nb)
    return 2.0 * cross - wa - wb


def energy_distance(a, b, unbiased: bool = True) -> float:
    """Energy distance clamped at zero (the U-statistic can dip slightly below)."""
    return max(energy_statistic(a, b, unbiased), 0.0)


def energy_bootstrap(a, b, rng: np.random.Generator, n_boot: int = 200) -> np.ndarray:
    """Energy distances of ``n_boot`` joint resamples (with replacement) of both sets."""
    a, b = _as_samples(a), _as_samples(b)
    out = np.empty(n_boot)
    for i in range(n_boot):
        ia = rng.integers(0, a.shape[0], a.shape[0])
        ib = rng.integers(0, b.shape[0], b.shape[0])
        out[i] = energy_statistic(a[ia], b[ib])
    return out


def null_threshold(sampler: Callable[[int, np.random.Generator], np.ndarray], n_a: int, n_b: int,
                   rng: np.random.Generator, n_boot: int = 200, quantile: float = 0.95) -> float:
    """``quantile`` of the energy distance between two same-law samples of sizes n_a, n_b."""
    vals = np.empty(n_boot)
    for i in range(n_boot):
        vals[i] = energy_distance(sampler(n_a, rng), sampler(n_b, rng))
    return float(np.quantile(vals, quantile))


def pooled_null_threshold(a, b, rng: np.random.Generator, n_boot: int = 200, quantile: float = 0.95) -> float:
    """Same-law threshold by resampling both sets from their pooled sample."""
    pool = np.concatenate([_as_samples(a), _as_samples(b)])
    na, nb = len(a), len(b)

    def draw(_n, r):
        idx = r.integers(0, pool.shape[0], na + nb)
        return pool[idx]

    vals = np.empty(n_boot)
    for i in range(n_boot):
        both = draw(0, rng)
        vals[i] = energy_distance(both[:na], both[na:])
    return float(np.quantile(vals, quantile))


def wasserstein1_1d(a, b) -> float:
    """1-D Wasserstein-1 via the quantile coupling."""
    a = np.sort(np.asarray(a, dtype=np.float64).ravel())
    b = np.sort(np.asarray(b, dtype=np.float64).ravel())
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    # integrate |F_a^{-1}(u) - F_b^{-1}(u)| over the merged quantile breakpoints
    u = np.union1d(np.arange(1, a.size + 1) / a.size, np.arange(1, b.size + 1) / b.size)
    widths = np.diff(np.concatenate([[0.0], u]))
    mid = u - widths / 2
    qa = a[np.minimum((mid * a.size).astype(int), a.size - 1)]
    qb = b[np.minimum((mid * b.size).astype(int), b.size - 1)]
    return float(np.sum(widths * np.abs(qa - qb)))


def config_hash(config) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class MetricReport:
    metric: str
    value: float
    stderr: float
    n_a: int
    n_b: int
    seed: int
    config_hash: str
    threshold: Optional[float] = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not np.isfinite(self.value):
            raise ValueError("metric value must be finite")
        if self.stderr < 0:
            raise ValueError("stderr must be non-negative")

    @property
    def passed(self) -> Optional[bool]:
        return None if self.threshold is None else self.value <= self.threshold

    def row(self) -> dict:
        return {k: getattr(self, k) for k in CSV_COLUMNS}


def write_reports(reports: Sequence[MetricReport], path, extra_columns: Sequence[str] = ()) -> None:
    cols = list(CSV_COLUMNS) + list(extra_columns)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for rep in reports:
            row = rep.row()
            row.update({c: rep.extra.get(c, "") for c in extra_columns})
            writer.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def energy_report(a, b, seed: int, config, metric: str = "energy_distance", n_boot: int = 200,
                  threshold: Optional[float] = None) -> MetricReport:
    """Energy distance with a bootstrap standard error drawn from stream ``seed``."""
    from .rng import rng_stream

    value = energy_distance(a, b)
    boot = energy_bootstrap(a, b, rng_stream(seed, 9001), n_boot)
    return MetricReport(metric, value, float(boot.std(ddof=1)), len(a), len(b), seed, config_hash(config),
                        threshold=threshold)


# -- experiment comparisons ---------------------------------------------------


def marginal_consistency_report(target_sampler: Callable, sched: Scheduler, n: int, seed: int,
                                n_boot: int = 200, noise_scale: float = 1.0) -> list[MetricReport]:
    """Per-t energy distance between dependent and independent ``x_t`` populations.

    ``noise_scale`` multiplies the independent process's noise; anything but 1
    is a deliberate corruption used as a negative control.
    """
    from .rng import rng_stream

    reports = []
    cfg = {"T": sched.T, "scheduler": sched.kind, "n": n, "noise_scale": noise_scale}
    r = sched.ratios()
    for t in range(sched.T + 1):
        data_rng = rng_stream(seed, (1, t))
        x_T_a = target_sampler(n, data_rng)
        x_T_b = target_sampler(n, data_rng)
        proc_rng = rng_stream(seed, (2, t))
        if t < sched.T:
            _, dep, _ = linear_pair(x_T_a, t, sched, proc_rng)
        else:
            _, _, dep = linear_pair(x_T_a, t - 1, sched, proc_rng)
        if noise_scale != 1.0:
            ind = (1.0 - r[t]) * noise_scale * proc_rng.standard_normal(x_T_b.shape) + r[t] * x_T_b
        elif t < sched.T:
            ind = independent_linear_pair(x_T_b, t, sched, proc_rng)[0]
        else:
            ind = independent_linear_pair(x_T_b, t - 1, sched, proc_rng)[1]
        thr = pooled_null_threshold(dep, ind, rng_stream(seed, (3, t)), n_boot)
        rep = MetricReport("marginal_energy", energy_distance(dep, ind), 0.0, n, n, seed, config_hash(cfg),
                           threshold=thr, extra={"t": t, "ratio": float(r[t])})
        reports.append(rep)
    return reports


def efficiency_sweep(dtm_model, dtm_cfg, fm_model, fm_cfg, target: np.ndarray, T_list: Sequence[int],
                     head_steps_list: Sequence[int], euler_list: Sequence[int], count: int, seed: int,
                     n_boot: int = 50) -> list[MetricReport]:
    """Quality (energy distance to ``target``) of every DTM (T, head) cell and FM Euler cell.

    Each report's ``extra`` carries the cell coordinates, wall time and the
    backbone-forward count per generated sample.
    """
    from .rng import rng_stream
    from .variants import dtm_sample, fm_sample

    reports = []
    for i, T in enumerate(T_list):
        for j, hs in enumerate(head_steps_list):
            rng = rng_stream(seed, (10, i, j))
            dtm_model.reset_counters()
            t0 = time.perf_counter()
            x = dtm_sample(dtm_model, dtm_cfg, count, rng, T=T, head_steps=hs)
            wall = time.perf_counter() - t0
            cfg = {"variant": "dtm", "T": T, "head_steps": hs, **dtm_cfg.to_dict()}
            rep = energy_report(x, target, seed, cfg, metric="dtm_energy", n_boot=n_boot)
            rep.extra.update(variant="dtm", T=T, head_steps=hs, wall_time=wall,
                             backbone_nfe=dtm_model.backbone_calls)
            reports.append(rep)
    for i, steps in enumerate(euler_list):
        rng = rng_stream(seed, (20, i))
        fm_model.reset_counters()
        t0 = time.perf_counter()
        x = fm_sample(fm_model, fm_cfg, count, rng, T=steps)
        wall = time.perf_counter() - t0
        cfg = {"variant": "fm", "T": steps, **fm_cfg.to_dict()}
        rep = energy_report(x, target, seed, cfg, metric="fm_energy", n_boot=n_boot)
        rep.extra.update(variant="fm", T=steps, head_steps=0, wall_time=wall, backbone_nfe=fm_model.backbone_calls)
        reports.append(rep)
    return reports


SWEEP_COLUMNS = ("variant", "T", "head_steps", "wall_time", "backbone_nfe")
