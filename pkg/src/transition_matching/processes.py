"""Supervising processes and transition-time schedulers.

States are numpy arrays whose trailing axis is the flat state dimension ``d``;
any leading axes are batch axes. ``t`` arguments are grid indices in
``0..T-1`` (scalar or one per batch row). The source distribution is always
the standard normal.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import ConfigError, ShapeError

SCHEDULERS = ("uniform", "exponential")
# 1 - 2**-k rounds to 1.0 in float64 for k >= 54, so longer ladders would repeat a ratio
EXPONENTIAL_MAX_T = 53
PROCESSES = ("dependent", "independent", "full_history")


@dataclass(frozen=True)
class State:
    """A single chain state viewed as ``n`` tokens of dimension ``d // n``."""

    tokens: np.ndarray

    def __post_init__(self):
        tok = np.asarray(self.tokens, dtype=np.float64)
        if tok.ndim != 2 or tok.shape[0] < 1:
            raise ShapeError(f"tokens must have shape (n, d/n), got {tok.shape}")
        if not np.all(np.isfinite(tok)):
            raise ValueError("state entries must be finite")
        object.__setattr__(self, "tokens", tok)

    @property
    def n(self) -> int:
        return self.tokens.shape[0]

    @property
    def d(self) -> int:
        return self.tokens.size

    @classmethod
    def from_flat(cls, x, n: int) -> "State":
        return cls(to_tokens(np.asarray(x, dtype=np.float64), n))

    def flatten(self) -> np.ndarray:
        return self.tokens.reshape(-1)


def to_tokens(x: np.ndarray, n: int) -> np.ndarray:
    """Reshape ``(..., d)`` to ``(..., n, d // n)``."""
    d = x.shape[-1]
    if n < 1 or d % n:
        raise ShapeError(f"cannot split dimension {d} into {n} tokens")
    return x.reshape(x.shape[:-1] + (n, d // n))


def from_tokens(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[:-2] + (x.shape[-2] * x.shape[-1],))


@dataclass(frozen=True)
class Scheduler:
    kind: str = "uniform"
    T: int = 1

    def __post_init__(self):
        if self.kind not in SCHEDULERS:
            raise ConfigError(f"unknown scheduler {self.kind!r}")
        if int(self.T) != self.T or self.T < 1:
            raise ConfigError(f"T must be an integer >= 1, got {self.T}")
        if self.kind == "exponential" and self.T > EXPONENTIAL_MAX_T:
            raise ConfigError(f"exponential ladder supports T <= {EXPONENTIAL_MAX_T}, got {self.T}")

    def ratios(self) -> np.ndarray:
        """All ratios ``r_0..r_T`` as a float array of length ``T + 1``."""
        k = np.arange(self.T + 1, dtype=np.float64)
        if self.kind == "uniform":
            r = k / self.T
        else:
            r = 1.0 - np.exp2(-k)
        r[-1] = 1.0
        return r

    def ratio(self, index):
        return scheduler_ratio(self, index)


def scheduler_ratio(sched: Scheduler, index):
    """Ratio ``r_index``: ``index / T`` (uniform) or ``1 - 2**-index`` capped at 1."""
    idx = np.asarray(index)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError(f"scheduler index must be an integer, got {idx.dtype}")
    if np.any(idx < 0) or np.any(idx > sched.T):
        raise IndexError(f"scheduler index out of range [0, {sched.T}]: {index}")
    r = sched.ratios()[idx]
    return float(r) if r.ndim == 0 else r


def _check_t(t, sched: Scheduler) -> np.ndarray:
    t = np.asarray(t)
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("transition index must be an integer")
    if np.any(t < 0) or np.any(t > sched.T - 1):
        raise IndexError(f"transition index must lie in [0, {sched.T - 1}], got {t}")
    return t


def _bcast(r: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Broadcast per-row ratios against ``x`` of shape (..., d)."""
    r = np.asarray(r, dtype=np.float64)
    return r.reshape(r.shape + (1,) * (x.ndim - r.ndim))


def _check_finite(x_T):
    x_T = np.asarray(x_T, dtype=np.float64)
    if not np.all(np.isfinite(x_T)):
        raise ValueError("x_T must be finite")
    return x_T


def interpolate(x0: np.ndarray, x_T: np.ndarray, r) -> np.ndarray:
    r = _bcast(r, x_T)
    return (1.0 - r) * x0 + r * x_T


def sample_index(sched: Scheduler, size, rng: np.random.Generator) -> np.ndarray:
    """Uniform transition indices in ``0..T-1``."""
    return rng.integers(0, sched.T, size=size)


def sample_continuous_ratio(size, rng: np.random.Generator) -> np.ndarray:
    """Continuous-time mode: ratios drawn from U[0, 1)."""
    return rng.random(size)


def linear_pair(x_T, t, sched: Scheduler, rng: np.random.Generator, x0: Optional[np.ndarray] = None):
    """Dependent (shared-noise) linear process.

    Returns ``(x0, x_t, x_{t+1})`` built from a single noise draw. ``x0`` can be
    injected for exact algebra checks; otherwise it is drawn from ``rng``.
    """
    x_T = _check_finite(x_T)
    t = _check_t(t, sched)
    if x0 is None:
        x0 = rng.standard_normal(x_T.shape)
    elif np.shape(x0) != x_T.shape:
        raise ShapeError(f"x0 shape {np.shape(x0)} != x_T shape {x_T.shape}")
    r = sched.ratios()
    return x0, interpolate(x0, x_T, r[t]), interpolate(x0, x_T, r[t + 1])


def linear_at_ratio(x_T, r, rng: np.random.Generator, x0: Optional[np.ndarray] = None):
    """Dependent process evaluated at arbitrary ratios ``r`` in [0, 1]."""
    x_T = _check_finite(x_T)
    if x0 is None:
        x0 = rng.standard_normal(x_T.shape)
    return x0, interpolate(x0, x_T, r)


def independent_linear_pair(x_T, t, sched: Scheduler, rng: np.random.Generator):
    """Independent linear process: fresh noise for ``x_t`` and ``x_{t+1}``."""
    x_T = _check_finite(x_T)
    t = _check_t(t, sched)
    r = sched.ratios()
    x0_t = rng.standard_normal(x_T.shape)
    x0_next = rng.standard_normal(x_T.shape)
    return interpolate(x0_t, x_T, r[t]), interpolate(x0_next, x_T, r[t + 1])


def full_history_sample(x_T, sched: Scheduler, rng: np.random.Generator) -> np.ndarray:
    """All levels ``X_0..X_T`` with independent noise per level.

    Returns an array with a new leading axis of length ``T + 1``; the last entry
    is ``x_T`` itself.
    """
    x_T = _check_finite(x_T)
    r = sched.ratios()
    noise = rng.standard_normal((sched.T + 1,) + x_T.shape)
    hist = (1.0 - r.reshape((-1,) + (1,) * x_T.ndim)) * noise + r.reshape((-1,) + (1,) * x_T.ndim) * x_T
    hist[-1] = x_T
    return hist


@dataclass
class ProcessSample:
    """One (batched) training tuple drawn from a supervising process."""

    t: np.ndarray
    x_t: np.ndarray
    y: np.ndarray
    history: Optional[np.ndarray] = field(default=None)

    def __post_init__(self):
        if np.shape(self.y) != np.shape(self.x_t):
            raise ShapeError("latent y must have the shape of x_t")
        if self.history is not None:
            if np.ndim(self.t) or len(self.history) != int(self.t) + 1:
                raise ShapeError("history must hold levels 0..t for a scalar t")


def draw_training_tuple(process: str, x_T, sched: Scheduler, rng: np.random.Generator, t=None) -> ProcessSample:
    """Sample ``(t, X_t, Y)`` for one of the three supervising processes.

    ``dependent`` pairs with the difference latent ``Y = X_T - X_0``; the other
    two pair with the next-state latent ``Y = X_{t+1}``. For ``full_history`` the
    returned history covers levels ``0..t``.
    """
    x_T = _check_finite(x_T)
    batch = x_T.shape[:-1]
    if t is None:
        t = sample_index(sched, batch, rng)
    t = _check_t(t, sched)
    if process == "dependent":
        x0, x_t, _ = linear_pair(x_T, t, sched, rng)
        return ProcessSample(t, x_t, x_T - x0)
    if process == "independent":
        x_t, x_next = independent_linear_pair(x_T, t, sched, rng)
        return ProcessSample(t, x_t, x_next)
    if process == "full_history":
        if np.ndim(t):
            raise ShapeError("full_history tuples need a scalar t")
        hist = full_history_sample(x_T, sched, rng)
        return ProcessSample(t, hist[int(t)], hist[int(t) + 1], history=hist[: int(t) + 1])
    raise ConfigError(f"unknown process {process!r}")
