"""Closed-form and brute-force ground truth for the linear process.

Under ``X_t = (1 - r) X_0 + r X_T`` with ``X_0 ~ N(0, I)`` and a diagonal
Gaussian-mixture target, every quantity below is available in closed form:
for component ``k``, ``X_t | k ~ N(r mu_k, (1 - r)^2 I + r^2 Sigma_k)`` and
``X_T | X_t, k`` is Gaussian. The Monte-Carlo estimator is deliberately
independent of those formulas and only uses samples.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.special import logsumexp

from .errors import ConfigError, InsufficientDataError


@dataclass(frozen=True)
class GmmTarget:
    weights: np.ndarray
    means: np.ndarray
    variances: np.ndarray

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=np.float64))
        mu = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var = np.asarray(self.variances, dtype=np.float64)
        if var.ndim == 1:
            var = var[:, None]  # one isotropic variance per component
        var = np.broadcast_to(var, mu.shape).copy()
        if w.shape[0] != mu.shape[0]:
            raise ConfigError("one weight per component is required")
        if np.any(w <= 0) or not np.isclose(w.sum(), 1.0):
            raise ConfigError("weights must be positive and sum to one")
        if np.any(var <= 0):
            raise ConfigError("variances must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "means", mu)
        object.__setattr__(self, "variances", var)

    @classmethod
    def gaussian(cls, mean, std) -> "GmmTarget":
        mean = np.atleast_1d(np.asarray(mean, dtype=np.float64))
        std = np.broadcast_to(np.asarray(std, dtype=np.float64), mean.shape)
        return cls(np.ones(1), mean[None, :], (std**2)[None, :])

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def mean(self) -> np.ndarray:
        return self.weights @ self.means

    def sample(self, n: int, rng: np.random.Generator, bound: Optional[float] = None) -> np.ndarray:
        """Draw ``n`` points; ``bound`` truncates each draw to Mahalanobis norm <= bound."""
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        z = rng.standard_normal((n, self.dim))
        if bound is not None:
            bad = np.linalg.norm(z, axis=1) > bound
            while bad.any():
                z[bad] = rng.standard_normal((int(bad.sum()), self.dim))
                bad = np.linalg.norm(z, axis=1) > bound
        return self.means[comp] + np.sqrt(self.variances[comp]) * z


def _posterior_components(target: GmmTarget, x: np.ndarray, r: float):
    """Per-component responsibilities and E[X_T | X_t = x, k]."""
    mu, var = target.means, target.variances
    s2 = (1.0 - r) ** 2 + r**2 * var  # (K, d)
    diff = x[..., None, :] - r * mu  # (..., K, d)
    loglik = -0.5 * np.sum(diff**2 / s2 + np.log(2.0 * np.pi * s2), axis=-1)
    logw = np.log(target.weights) + loglik
    resp = np.exp(logw - logsumexp(logw, axis=-1, keepdims=True))
    cond_mean = mu + (r * var / s2) * diff
    cond_var = var * (1.0 - r) ** 2 / s2
    return resp, cond_mean, cond_var


def gmm_marginal_velocity(target: GmmTarget, x, r: float) -> np.ndarray:
    """Exact ``E[X_T - X_0 | X_t = x]`` at ratio ``r`` in [0, 1)."""
    if not 0.0 <= r < 1.0:
        raise ValueError(f"marginal velocity needs 0 <= r < 1, got {r}")
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != target.dim:
        raise ConfigError(f"x has dimension {x.shape[-1]}, target has {target.dim}")
    resp, cond_mean, _ = _posterior_components(target, x, r)
    x_T_mean = np.sum(resp[..., None] * cond_mean, axis=-2)
    # X_0 = (x - r X_T) / (1 - r)  =>  X_T - X_0 = (X_T - x) / (1 - r)
    return (x_T_mean - x) / (1.0 - r)


def gaussian_posterior_sample(target: GmmTarget, x_t, r: float, rng: np.random.Generator,
                              bound: Optional[float] = None, max_tries: int = 1000) -> np.ndarray:
    """Exact draw of ``Y = X_T - X_0`` given ``X_t = x_t`` for a single Gaussian.

    ``x_t`` may be batched ``(..., d)``; ``r`` may be a scalar or broadcast over the
    batch axes. With ``bound`` the target is truncated to Mahalanobis radius
    ``bound`` around its mean (rejection on ``X_T``); the likelihood of ``x_t``
    given ``X_T`` is untouched by the truncation, so the posterior is the
    untruncated one restricted to the same set.
    """
    if target.n_components != 1:
        raise NotImplementedError("exact posterior sampling supports a single Gaussian only")
    x_t = np.asarray(x_t, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if np.any(r < 0) or np.any(r > 1):
        raise ValueError("r must lie in [0, 1]")
    r = r.reshape(r.shape + (1,) * (x_t.ndim - r.ndim))
    mu, var = target.means[0], target.variances[0]
    r_safe = np.where(r >= 1.0, 0.5, r)  # placeholder; r = 1 handled below
    s2 = (1.0 - r_safe) ** 2 + r_safe**2 * var
    m = mu + (r_safe * var / s2) * (x_t - r_safe * mu)
    sd = np.sqrt(var) * (1.0 - r_safe) / np.sqrt(s2)
    sd = np.broadcast_to(sd, x_t.shape)
    m = np.broadcast_to(m, x_t.shape)

    z = rng.standard_normal(x_t.shape)
    x_T = m + sd * z
    if bound is not None:
        flat_T = x_T.reshape(-1, x_t.shape[-1])
        flat_m = m.reshape(flat_T.shape)
        flat_sd = sd.reshape(flat_T.shape)
        bad = np.linalg.norm((flat_T - mu) / np.sqrt(var), axis=1) > bound
        tries = 0
        while bad.any():
            tries += 1
            if tries > max_tries:
                raise RuntimeError("posterior rejection sampling did not terminate; x_t lies outside the support")
            k = int(bad.sum())
            flat_T[bad] = flat_m[bad] + flat_sd[bad] * rng.standard_normal((k, x_t.shape[-1]))
            bad = np.linalg.norm((flat_T - mu) / np.sqrt(var), axis=1) > bound
        x_T = flat_T.reshape(x_t.shape)

    at_end = np.broadcast_to(r >= 1.0, x_t.shape)
    x0 = np.where(at_end, rng.standard_normal(x_t.shape), (x_t - r_safe * x_T) / (1.0 - r_safe))
    x_T = np.where(at_end, x_t, x_T)
    return x_T - x0


@dataclass(frozen=True)
class MCEstimate:
    value: np.ndarray
    stderr: np.ndarray
    ess: float


def mc_conditional_expectation(sampler: Callable[[int, np.random.Generator], np.ndarray], x, r: float,
                               bandwidth: float, n: int, rng: np.random.Generator,
                               n_boot: int = 200, min_ess: float = 50.0) -> MCEstimate:
    """Kernel-regression estimate of ``E[X_T - X_0 | X_t = x]`` from raw samples.

    Pairs with kernel weight below 1e-12 of the maximum are dropped outright.
    The bootstrap resamples, with replacement, the pairs above 1e-4 of the
    maximum weight and holds the remaining low-weight pairs fixed; their share of
    the estimator's variance is below 1e-8 relative.
    """
    if bandwidth <= 0:
        raise ValueError("bandwidth must be positive")
    if n < 1000:
        raise ValueError("need at least 1000 samples")
    x = np.asarray(x, dtype=np.float64)
    x_T = np.asarray(sampler(n, rng), dtype=np.float64)
    x0 = rng.standard_normal(x_T.shape)
    x_t = (1.0 - r) * x0 + r * x_T
    y = x_T - x0
    logk = -0.5 * np.sum((x_t - x) ** 2, axis=1) / bandwidth**2
    keep = logk > logk.max() - np.log(1e12)
    w = np.exp(logk[keep] - logk.max())
    y = y[keep]
    ess = w.sum() ** 2 / np.sum(w**2)
    if ess < min_ess:
        raise InsufficientDataError(f"effective sample size {ess:.1f} < {min_ess}")
    value = (w @ y) / w.sum()

    active = w > 1e-4
    wa, ya = w[active], y[active]
    fixed_num = w[~active] @ y[~active]
    fixed_den = w[~active].sum()
    boot = np.empty((n_boot, y.shape[1]))
    for b in range(n_boot):
        idx = rng.integers(0, wa.shape[0], wa.shape[0])
        wb = wa[idx]
        boot[b] = (wb @ ya[idx] + fixed_num) / (wb.sum() + fixed_den)
    return MCEstimate(value, boot.std(axis=0, ddof=1), float(ess))
