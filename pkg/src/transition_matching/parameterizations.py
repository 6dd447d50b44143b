"""Latent parameterizations of the transition kernel and their inverse maps."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, ShapeError
from .processes import Scheduler

LATENTS = ("difference", "next_state")

# latent kind -> processes it may be trained with
_PAIRINGS = {
    "difference": ("dependent",),
    "next_state": ("independent", "full_history"),
}


def check_pairing(latent: str, process: str) -> None:
    if latent not in _PAIRINGS:
        raise ConfigError(f"unknown latent {latent!r}")
    if process not in _PAIRINGS[latent]:
        raise ConfigError(f"latent {latent!r} cannot be paired with the {process!r} process")


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def difference_latent(x0, x_T) -> np.ndarray:
    x0, x_T = _same_shape(x0, x_T)
    return x_T - x0


def dtm_reconstruct(x_t, y, sched: Scheduler, t) -> np.ndarray:
    """Next state ``x_t + (r_{t+1} - r_t) * y``."""
    x_t, y = _same_shape(x_t, y)
    t = np.asarray(t)
    if np.any(t < 0) or np.any(t > sched.T - 1):
        raise IndexError(f"t must lie in [0, {sched.T - 1}]")
    r = sched.ratios()
    step = r[t + 1] - r[t]
    step = np.reshape(step, np.shape(step) + (1,) * (x_t.ndim - np.ndim(step)))
    return x_t + step * y


def next_state_latent(x_next) -> np.ndarray:
    return np.asarray(x_next)


def next_state_reconstruct(x_t, y) -> np.ndarray:
    """The next-state latent is the next state; ``x_t`` is ignored."""
    return np.asarray(y)
