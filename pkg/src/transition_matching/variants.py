"""DTM, ARTM, FHTM and the flow-matching baseline: training steps and samplers.

Each training step turns a batch of data points ``x_T`` into a :class:`~.net.Batch`
(the supervising process and latent of the variant decide what goes in it),
computes the CFM loss, and applies one Adam update. Samplers run the learned
Markov chain from standard-normal noise.

Random draws inside a step happen in a fixed order so that a given generator
state always produces the same step.
"""

from __future__ import annotations

from collections import deque
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch

from . import net
from .errors import ConfigError, NumericError
from .parameterizations import check_pairing
from .processes import (
    Scheduler,
    from_tokens,
    full_history_sample,
    independent_linear_pair,
    interpolate,
    linear_pair,
    sample_continuous_ratio,
    sample_index,
    to_tokens,
)

KINDS = ("dtm", "artm", "fhtm", "fm")
_DEFAULT_PROCESS = {"dtm": "dependent", "fm": "dependent", "artm": "independent", "fhtm": "full_history"}
_MASK = {"dtm": "full", "fm": "full", "artm": "artm_causal", "fhtm": "fh_causal"}


@dataclass(frozen=True)
class VariantConfig:
    kind: str
    T: int
    scheduler: str = "uniform"
    n: int = 2
    dim: int = 2
    head_steps: int = 4
    solver: str = "midpoint"
    continuous_time: bool = False
    process: str = ""
    allow_process_override: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown variant {self.kind!r}")
        Scheduler(self.scheduler, self.T)
        if self.n < 1 or self.dim % self.n:
            raise ConfigError(f"cannot split dimension {self.dim} into {self.n} tokens")
        if self.head_steps < 1:
            raise ConfigError("head_steps must be >= 1")
        if self.solver not in net.SOLVERS:
            raise ConfigError(f"unknown solver {self.solver!r}")
        if self.continuous_time and self.kind != "dtm":
            raise ConfigError("continuous time is only defined for dtm")
        default = _DEFAULT_PROCESS[self.kind]
        process = self.process or default
        object.__setattr__(self, "process", process)
        if process != default:
            if not self.allow_process_override:
                raise ConfigError(
                    f"{self.kind} trains on the {default!r} process; pass allow_process_override for ablations")
            if self.kind in ("dtm", "fm"):
                raise ConfigError("dtm and fm are only defined on the dependent process")
            if process not in ("dependent", "independent", "full_history"):
                raise ConfigError(f"unknown process {process!r}")
        else:
            latent = "difference" if self.kind in ("dtm", "fm") else "next_state"
            check_pairing(latent, process)

    @property
    def token_dim(self) -> int:
        return self.dim // self.n

    @property
    def sched(self) -> Scheduler:
        return Scheduler(self.scheduler, self.T)

    def to_dict(self) -> dict:
        return asdict(self)


def model_config(cfg: VariantConfig, **overrides) -> net.ModelConfig:
    """Backbone/head layout implied by a variant."""
    n = cfg.n
    max_len = {"dtm": n, "fm": n, "artm": 2 * n - 1, "fhtm": (cfg.T + 1) * n - 1}[cfg.kind]
    kw = dict(token_dim=cfg.token_dim, n_tokens=n, max_len=max(max_len, n), mask=_MASK[cfg.kind],
              head=cfg.kind != "fm", use_time=cfg.kind != "fhtm")
    kw.update(overrides)
    return net.ModelConfig(**kw)


# -- batch construction -------------------------------------------------------


def _head_noise_and_s(rng, b, p, k):
    noise = rng.standard_normal((b, p, k))
    s = rng.random((b, p))
    return noise, s


def dtm_batch(cfg: VariantConfig, x_T: np.ndarray, rng: np.random.Generator) -> net.Batch:
    b, n, k = x_T.shape[0], cfg.n, cfg.token_dim
    if cfg.continuous_time:
        r = sample_continuous_ratio(b, rng)
    else:
        r = cfg.sched.ratios()[sample_index(cfg.sched, b, rng)]
    x0 = rng.standard_normal(x_T.shape)
    x_t = interpolate(x0, x_T, r)
    y = x_T - x0
    noise, s = _head_noise_and_s(rng, b, n, k)
    return net.Batch(to_tokens(x_t, n), r, np.arange(n), to_tokens(y, n), noise, s, "full")


def fm_batch(cfg: VariantConfig, x_T: np.ndarray, rng: np.random.Generator) -> net.Batch:
    # the baseline regresses the velocity at continuous times; its T only sets the Euler grid
    r = sample_continuous_ratio(x_T.shape[0], rng)
    x0 = rng.standard_normal(x_T.shape)
    x_t = interpolate(x0, x_T, r)
    n = cfg.n
    return net.Batch(to_tokens(x_t, n), r, np.arange(n), to_tokens(x_T, n), to_tokens(x0, n), None, "full")


def _pair(cfg: VariantConfig, x_T, t, rng):
    if cfg.process == "dependent":
        _, x_t, x_next = linear_pair(x_T, t, cfg.sched, rng)
        return x_t, x_next
    return independent_linear_pair(x_T, t, cfg.sched, rng)


def artm_batch(cfg: VariantConfig, x_T: np.ndarray, rng: np.random.Generator) -> net.Batch:
    b, n, k = x_T.shape[0], cfg.n, cfg.token_dim
    t = sample_index(cfg.sched, b, rng)
    x_t, x_next = _pair(cfg, x_T, t, rng)
    cur, nxt = to_tokens(x_t, n), to_tokens(x_next, n)
    tokens = np.concatenate([cur, nxt[:, : n - 1]], axis=1)
    noise, s = _head_noise_and_s(rng, b, n, k)
    return net.Batch(tokens, cfg.sched.ratios()[t], np.arange(n - 1, 2 * n - 1), nxt, noise, s, "artm_causal")


def _history(cfg: VariantConfig, x_T, rng) -> np.ndarray:
    """Levels 0..T as ``(B, T+1, d)``."""
    if cfg.process == "dependent":
        x0 = rng.standard_normal(x_T.shape)
        r = cfg.sched.ratios()
        return np.stack([interpolate(x0, x_T, ri) for ri in r], axis=1)
    return np.swapaxes(full_history_sample(x_T, cfg.sched, rng), 0, 1)


def fhtm_batch(cfg: VariantConfig, x_T: np.ndarray, rng: np.random.Generator) -> net.Batch:
    b, n, k, T = x_T.shape[0], cfg.n, cfg.token_dim, cfg.T
    flat = to_tokens(_history(cfg, x_T, rng), n).reshape(b, (T + 1) * n, k)
    noise, s = _head_noise_and_s(rng, b, T * n, k)
    positions = np.arange(n - 1, (T + 1) * n - 1)
    return net.Batch(flat[:, :-1], None, positions, flat[:, n:], noise, s, "fh_causal")


BATCH_BUILDERS = {"dtm": dtm_batch, "artm": artm_batch, "fhtm": fhtm_batch, "fm": fm_batch}


# -- training -----------------------------------------------------------------


@dataclass
class TrainState:
    config: VariantConfig
    model: net.VelocityModel
    opt: net.OptState
    rng: np.random.Generator
    seed: int = 0
    step: int = 0
    losses: deque = field(default_factory=lambda: deque(maxlen=1000))


def init_train_state(cfg: VariantConfig, seed: int, rng: np.random.Generator, lr: float = 1e-3,
                     warmup: int = 0, total_steps: int = 0, decay: str = "none",
                     dtype=torch.float32, **model_overrides) -> TrainState:
    model = net.build_model(model_config(cfg, **model_overrides), seed=seed, dtype=dtype)
    opt = net.make_optimizer(model, lr, warmup, total_steps, decay)
    return TrainState(cfg, model, opt, rng, seed)


def train_step(state: TrainState, x_T: np.ndarray) -> float:
    """One optimisation step of the state's variant on the data batch ``x_T``."""
    cfg = state.config
    batch = BATCH_BUILDERS[cfg.kind](cfg, np.asarray(x_T, dtype=np.float64), state.rng)
    loss, grads = net.cfm_loss(state.model, batch)
    net.optimizer_step(state.model, grads, state.opt)
    net.assert_finite_parameters(state.model)
    state.step += 1
    state.losses.append(loss)
    return loss


def _checked_step(kind):
    def step(state: TrainState, x_T: np.ndarray) -> float:
        if state.config.kind != kind:
            raise ConfigError(f"{kind}_train_step called on a {state.config.kind} state")
        return train_step(state, x_T)

    step.__name__ = f"{kind}_train_step"
    step.__doc__ = f"Training step that only accepts {kind} states."
    return step


dtm_train_step = _checked_step("dtm")
artm_train_step = _checked_step("artm")
fhtm_train_step = _checked_step("fhtm")
fm_train_step = _checked_step("fm")


# -- sampling -----------------------------------------------------------------


def _tensor(model, x):
    return torch.as_tensor(x, dtype=next(model.parameters()).dtype)


def _finite_or_raise(x, step):
    if not np.all(np.isfinite(x)):
        raise NumericError("sampling chain produced a non-finite state", index=step)


@torch.no_grad()
def dtm_sample(model: Optional[net.VelocityModel], cfg: VariantConfig, count: int, rng: np.random.Generator,
               T: Optional[int] = None, head_steps: Optional[int] = None,
               posterior: Optional[Callable] = None) -> np.ndarray:
    """DTM chain: ``X_{t+1} = X_t + (r_{t+1} - r_t) Y`` with ``Y`` from the head.

    ``posterior(x_t, r_t, rng)`` replaces the learned head (and backbone) with an
    external sampler of ``Y``; it is how the exact Gaussian oracle is plugged in.
    ``T`` and ``head_steps`` override the config at sampling time.
    """
    sched = Scheduler(cfg.scheduler, T or cfg.T)
    steps = head_steps or cfg.head_steps
    r = sched.ratios()
    x = rng.standard_normal((count, cfg.dim))
    for t in range(sched.T):
        if posterior is not None:
            y = posterior(x, r[t], rng)
        else:
            rt = np.full(count, r[t])
            h = model.backbone(_tensor(model, to_tokens(x, cfg.n)), _tensor(model, rt))
            y = from_tokens(net.ode_sample(model, h, rt[:, None], steps, cfg.solver, rng))
        x = x + (r[t + 1] - r[t]) * y
        _finite_or_raise(x, t)
    return x


@torch.no_grad()
def artm_sample(model: net.VelocityModel, cfg: VariantConfig, count: int, rng: np.random.Generator,
                head_steps: Optional[int] = None) -> np.ndarray:
    """Token-by-token generation of each next state given the current one."""
    steps = head_steps or cfg.head_steps
    n, k = cfg.n, cfg.token_dim
    r = cfg.sched.ratios()
    x = rng.standard_normal((count, cfg.dim))
    for t in range(cfg.T):
        cur = to_tokens(x, n)
        rt = np.full(count, r[t])
        nxt = np.empty((count, 0, k))
        for _ in range(n):
            seq = np.concatenate([cur, nxt], axis=1)
            h = model.backbone(_tensor(model, seq), _tensor(model, rt))[:, -1]
            tok = net.ode_sample(model, h, rt, steps, cfg.solver, rng)
            nxt = np.concatenate([nxt, tok[:, None, :]], axis=1)
        x = from_tokens(nxt)
        _finite_or_raise(x, t)
    return x


@torch.no_grad()
def fhtm_sample(model: net.VelocityModel, cfg: VariantConfig, count: int, rng: np.random.Generator,
                head_steps: Optional[int] = None, return_history: bool = False):
    """Token-by-token generation conditioned on the whole history (no caching)."""
    steps = head_steps or cfg.head_steps
    n = cfg.n
    hist = to_tokens(rng.standard_normal((count, cfg.dim)), n)
    lengths = [hist.shape[1]]
    for t in range(cfg.T):
        for _ in range(n):
            h = model.backbone(_tensor(model, hist))[:, -1]
            tok = net.ode_sample(model, h, None, steps, cfg.solver, rng)
            hist = np.concatenate([hist, tok[:, None, :]], axis=1)
        lengths.append(hist.shape[1])
        _finite_or_raise(hist[:, -n:], t)
    x = from_tokens(hist[:, -n:])
    return (x, hist, lengths) if return_history else x


@torch.no_grad()
def fm_velocity(model: net.VelocityModel, cfg: VariantConfig, x: np.ndarray, r) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    rt = np.broadcast_to(np.asarray(r, dtype=np.float64), x.shape[:1]).copy()
    h = model.backbone(_tensor(model, to_tokens(x, cfg.n)), _tensor(model, rt))
    return from_tokens(model.direct_velocity(h).numpy().astype(np.float64))


def euler_transport(velocity: Callable, x: np.ndarray, sched: Scheduler) -> np.ndarray:
    """``x_{t+1} = x_t + (r_{t+1} - r_t) velocity(x_t, r_t)`` over the whole grid."""
    r = sched.ratios()
    for t in range(sched.T):
        x = x + (r[t + 1] - r[t]) * velocity(x, r[t])
        _finite_or_raise(x, t)
    return x


def fm_sample(model: net.VelocityModel, cfg: VariantConfig, count: int, rng: np.random.Generator,
              T: Optional[int] = None) -> np.ndarray:
    sched = Scheduler(cfg.scheduler, T or cfg.T)
    x = rng.standard_normal((count, cfg.dim))
    return euler_transport(lambda z, r: fm_velocity(model, cfg, z, r), x, sched)


def sample(model: net.VelocityModel, cfg: VariantConfig, count: int, rng: np.random.Generator, **kw) -> np.ndarray:
    """Dispatch to the sampler of ``cfg.kind``."""
    fn = {"dtm": dtm_sample, "artm": artm_sample, "fhtm": fhtm_sample, "fm": fm_sample}[cfg.kind]
    return fn(model, cfg, count, rng, **kw)
