"""Velocity model: a masked-attention backbone over tokens and a small per-token head.

The backbone maps a token sequence (plus an optional outer-time ratio) to one
hidden vector per position. The head is an MLP that consumes a noisy token
latent, the inner ODE time ``s``, the outer time and the backbone hidden vector,
and returns a velocity for that token. Models built without a head (the flow
matching baseline) project the hidden vectors straight to a velocity.

Three attention masks are supported:

``full``
    every position sees every position (DTM, FM).
``artm_causal``
    the first ``n_tokens`` positions (the current state) form a block that every
    position may read; the positions after it (the next-state prefix) are
    causal.
``fh_causal``
    strictly causal over the whole flattened history (FHTM).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np
import torch
from torch import nn

from .errors import ConfigError, NumericError, ShapeError

MASKS = ("full", "artm_causal", "fh_causal")
SOLVERS = ("euler", "midpoint")

# sequences up to this length use broadcast attention; beyond it, batched matmul
_BROADCAST_ATTENTION_MAX_LEN = 16


@dataclass(frozen=True)
class ModelConfig:
    token_dim: int
    n_tokens: int
    max_len: int
    mask: str = "full"
    width: int = 64
    layers: int = 2
    mlp_ratio: int = 2
    head: bool = True
    head_width: int = 64
    head_depth: int = 3
    d_time: int = 16
    use_time: bool = True
    use_positions: bool = True

    def __post_init__(self):
        if self.mask not in MASKS:
            raise ConfigError(f"unknown mask mode {self.mask!r}")
        if not 3 <= self.head_depth <= 6:
            raise ConfigError("head depth must be between 3 and 6")
        if self.d_time % 2:
            raise ConfigError("d_time must be even")
        if self.max_len < self.n_tokens:
            raise ConfigError("max_len must cover at least one state")

    def to_dict(self) -> dict:
        return asdict(self)


def time_features(r: torch.Tensor, dim: int) -> torch.Tensor:
    """Sinusoidal features of a ratio in [0, 1]; frequencies from 1 to 100 rad."""
    half = dim // 2
    freqs = torch.exp(torch.linspace(0.0, math.log(100.0), half, dtype=r.dtype))
    arg = r.unsqueeze(-1) * freqs
    return torch.cat([torch.sin(arg), torch.cos(arg)], dim=-1)


def attention_mask(length: int, mode: str, block: int) -> torch.Tensor:
    """Boolean ``(length, length)`` matrix; entry ``[i, j]`` allows i to read j."""
    i = torch.arange(length).unsqueeze(1)
    j = torch.arange(length).unsqueeze(0)
    if mode == "full":
        return torch.ones(length, length, dtype=torch.bool)
    if mode == "fh_causal":
        return j <= i
    if mode == "artm_causal":
        return (j < block) | (j <= i)
    raise ConfigError(f"unknown mask mode {mode!r}")


class _Block(nn.Module):
    def __init__(self, width: int, mlp_ratio: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.proj = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, mlp_ratio * width), nn.SiLU(), nn.Linear(mlp_ratio * width, width))

    def forward(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        q, k, v = self.qkv(self.norm1(x)).chunk(3, dim=-1)
        scale = 1.0 / math.sqrt(x.shape[-1])
        if x.shape[-2] <= _BROADCAST_ATTENTION_MAX_LEN:
            scores = (q.unsqueeze(-2) * k.unsqueeze(-3)).sum(-1) * scale
            attn = scores.masked_fill(~mask, float("-inf")).softmax(dim=-1)
            mixed = (attn.unsqueeze(-1) * v.unsqueeze(-3)).sum(-2)
        else:
            scores = (q @ k.transpose(-1, -2)) * scale
            attn = scores.masked_fill(~mask, float("-inf")).softmax(dim=-1)
            mixed = attn @ v
        x = x + self.proj(mixed)
        return x + self.mlp(self.norm2(x))


class VelocityModel(nn.Module):
    def __init__(self, config: ModelConfig, generator: Optional[torch.Generator] = None):
        super().__init__()
        self.config = c = config
        w = c.width
        self.in_proj = nn.Linear(c.token_dim, w)
        self.pos = nn.Parameter(torch.zeros(c.max_len, w)) if c.use_positions else None
        self.time_proj = nn.Linear(c.d_time, w) if c.use_time else None
        self.blocks = nn.ModuleList(_Block(w, c.mlp_ratio) for _ in range(c.layers))
        self.norm = nn.LayerNorm(w)
        if c.head:
            head_in = c.token_dim + 2 * c.d_time + w
            layers: list[nn.Module] = [nn.Linear(head_in, c.head_width), nn.SiLU()]
            for _ in range(c.head_depth - 2):
                layers += [nn.Linear(c.head_width, c.head_width), nn.SiLU()]
            layers.append(nn.Linear(c.head_width, c.token_dim))
            self.head = nn.Sequential(*layers)
            self.out_proj = None
        else:
            self.head = None
            self.out_proj = nn.Linear(w, c.token_dim)
        self.backbone_calls = 0
        self.head_calls = 0
        self._init_weights(generator)

    def _init_weights(self, generator):
        with torch.no_grad():
            for mod in self.modules():
                if isinstance(mod, nn.Linear):
                    nn.init.trunc_normal_(mod.weight, std=0.02, a=-0.04, b=0.04, generator=generator)
                    nn.init.zeros_(mod.bias)
            if self.pos is not None:
                nn.init.trunc_normal_(self.pos, std=0.02, a=-0.04, b=0.04, generator=generator)
            final = self.head[-1] if self.head is not None else self.out_proj
            nn.init.zeros_(final.weight)

    # -- parameter groups -------------------------------------------------

    def head_parameters(self):
        return [] if self.head is None else list(self.head.parameters())

    def backbone_parameters(self):
        head_ids = {id(p) for p in self.head_parameters()}
        return [p for p in self.parameters() if id(p) not in head_ids]

    # -- forward pieces ---------------------------------------------------

    def backbone(self, tokens: torch.Tensor, t: Optional[torch.Tensor] = None, mask: Optional[str] = None) -> torch.Tensor:
        """Hidden vectors ``(B, L, width)`` for tokens ``(B, L, token_dim)``."""
        c = self.config
        mode = mask or c.mask
        if tokens.ndim != 3 or tokens.shape[-1] != c.token_dim:
            raise ShapeError(f"expected tokens (B, L, {c.token_dim}), got {tuple(tokens.shape)}")
        length = tokens.shape[1]
        if length > c.max_len:
            raise ShapeError(f"sequence length {length} exceeds max_len {c.max_len}")
        if mode == "artm_causal" and length < c.n_tokens:
            raise ShapeError(f"artm sequences need the full current state ({c.n_tokens} tokens)")
        if mode == "full" and length != c.n_tokens:
            raise ShapeError(f"full-attention sequences must have exactly {c.n_tokens} tokens")
        self.backbone_calls += 1
        x = self.in_proj(tokens)
        if self.pos is not None:
            x = x + self.pos[:length]
        if self.time_proj is not None:
            if t is None:
                raise ShapeError("this model needs an outer time")
            x = x + self.time_proj(time_features(t, c.d_time)).unsqueeze(-2)
        m = attention_mask(length, mode, c.n_tokens)
        for blk in self.blocks:
            x = blk(x, m)
        return self.norm(x)

    def head_velocity(self, y: torch.Tensor, s: torch.Tensor, t: Optional[torch.Tensor], h: torch.Tensor) -> torch.Tensor:
        """Per-token velocity ``g(y, h)`` at inner time ``s`` and outer time ``t``."""
        c = self.config
        if self.head is None:
            raise ConfigError("model was built without a head")
        self.head_calls += 1
        s_feat = time_features(s, c.d_time)
        if c.use_time and t is not None:
            t_feat = time_features(torch.broadcast_to(t, s.shape), c.d_time)
        else:
            t_feat = torch.zeros_like(s_feat)
        return self.head(torch.cat([y, s_feat, t_feat, h], dim=-1))

    def direct_velocity(self, h: torch.Tensor) -> torch.Tensor:
        if self.out_proj is None:
            raise ConfigError("model has a head; use head_velocity")
        return self.out_proj(h)

    def reset_counters(self):
        self.backbone_calls = 0
        self.head_calls = 0

    def parameter_count(self) -> tuple[int, int]:
        """``(backbone, head)`` parameter counts."""
        return (sum(p.numel() for p in self.backbone_parameters()),
                sum(p.numel() for p in self.head_parameters()))


def build_model(config: ModelConfig, seed: int = 0, dtype=torch.float32) -> VelocityModel:
    gen = torch.Generator().manual_seed(int(seed))
    return VelocityModel(config, generator=gen).to(dtype)


def backbone_forward(model: VelocityModel, tokens, t=None, mask_mode: Optional[str] = None) -> torch.Tensor:
    tokens = torch.as_tensor(tokens, dtype=_dtype(model))
    if t is not None:
        t = torch.as_tensor(t, dtype=_dtype(model))
    return model.backbone(tokens, t, mask_mode)


def head_velocity(model: VelocityModel, y, s, t, h) -> torch.Tensor:
    dt = _dtype(model)
    y = torch.as_tensor(y, dtype=dt)
    s = torch.as_tensor(s, dtype=dt)
    s = torch.broadcast_to(s, y.shape[:-1])
    t = None if t is None else torch.as_tensor(t, dtype=dt)
    return model.head_velocity(y, s, t, torch.as_tensor(h, dtype=dt))


def _dtype(model: nn.Module) -> torch.dtype:
    return next(model.parameters()).dtype


# -- loss -------------------------------------------------------------------


@dataclass
class Batch:
    """One CFM batch.

    ``tokens`` is the backbone input ``(B, L, k)``; the hidden vectors at
    ``positions`` condition the head. ``target`` holds the latent ``B`` and
    ``noise`` the source sample ``B_0`` for each conditioned position; ``s`` the
    inner time. For head-less models ``tokens`` is already the interpolated
    state and ``s`` is unused.
    """

    tokens: np.ndarray
    time: Optional[np.ndarray]
    positions: np.ndarray
    target: np.ndarray
    noise: np.ndarray
    s: Optional[np.ndarray]
    mask: str = "full"

    def __post_init__(self):
        b, p = self.tokens.shape[0], len(self.positions)
        want = (b, p, self.tokens.shape[-1])
        if self.target.shape != want or self.noise.shape != want:
            raise ShapeError(f"targets/noises must have shape {want}")
        if self.time is not None and self.time.shape != (b,):
            raise ShapeError("time must hold one ratio per batch row")
        if self.s is not None:
            if self.s.shape != (b, p):
                raise ShapeError(f"s must have shape {(b, p)}")
            if np.any(self.s < 0) or np.any(self.s > 1):
                raise ValueError("inner times must lie in [0, 1]")


def cfm_residuals(model: VelocityModel, batch: Batch) -> torch.Tensor:
    """``u(B_s) - (B - B_0)`` for every conditioned position, shape ``(B, P, k)``."""
    dt = _dtype(model)
    tokens = torch.as_tensor(batch.tokens, dtype=dt)
    t = None if batch.time is None else torch.as_tensor(batch.time, dtype=dt)
    target = torch.as_tensor(batch.target, dtype=dt)
    noise = torch.as_tensor(batch.noise, dtype=dt)
    h = model.backbone(tokens, t, batch.mask)[:, torch.as_tensor(batch.positions)]
    if model.head is None:
        pred = model.direct_velocity(h)
    else:
        s = torch.as_tensor(batch.s, dtype=dt)
        b_s = (1.0 - s).unsqueeze(-1) * noise + s.unsqueeze(-1) * target
        t_rows = None if t is None else t.unsqueeze(-1).expand_as(s)
        pred = model.head_velocity(b_s, s, t_rows, h)
    return pred - (target - noise)


def cfm_objective(model: VelocityModel, batch: Batch) -> torch.Tensor:
    """Mean over rows and positions of the squared residual norm (differentiable)."""
    res = cfm_residuals(model, batch)
    per_row = res.detach().pow(2).sum(dim=(-1, -2))
    if not torch.all(torch.isfinite(per_row)):
        bad = int(torch.nonzero(~torch.isfinite(per_row))[0, 0])
        raise NumericError("non-finite CFM residual", index=bad)
    return res.pow(2).sum(-1).mean()


def cfm_loss(model: VelocityModel, batch: Batch) -> tuple[float, dict[str, torch.Tensor]]:
    """Loss value and its exact gradient for every named parameter."""
    model.zero_grad(set_to_none=True)
    loss = cfm_objective(model, batch)
    loss.backward()
    grads = {name: (p.grad if p.grad is not None else torch.zeros_like(p)) for name, p in model.named_parameters()}
    return float(loss.detach()), grads


# -- ODE sampling -------------------------------------------------------------


def integrate(field_fn: Callable, b0, steps: int, solver: str = "euler"):
    """Integrate ``db/ds = field_fn(b, s)`` from s=0 to s=1 on a uniform grid.

    Works on numpy arrays and torch tensors alike. Raises ``NumericError`` with
    the step index if the state stops being finite.
    """
    if steps < 1:
        raise ValueError("steps must be >= 1")
    if solver not in SOLVERS:
        raise ConfigError(f"unknown solver {solver!r}")
    ds = 1.0 / steps
    b = b0
    for i in range(steps):
        s = i * ds
        if solver == "euler":
            b = b + ds * field_fn(b, s)
        else:
            mid = b + (0.5 * ds) * field_fn(b, s)
            b = b + ds * field_fn(mid, s + 0.5 * ds)
        finite = torch.all(torch.isfinite(b)) if isinstance(b, torch.Tensor) else np.all(np.isfinite(b))
        if not finite:
            raise NumericError("non-finite state during ODE integration", index=i)
    return b


@torch.no_grad()
def ode_sample(model: VelocityModel, h, t, steps: int, solver: str, rng: np.random.Generator) -> np.ndarray:
    """Draw one token latent per hidden vector in ``h`` (shape ``(..., width)``)."""
    dt = _dtype(model)
    h = torch.as_tensor(h, dtype=dt)
    k = model.config.token_dim
    b0 = torch.as_tensor(rng.standard_normal(h.shape[:-1] + (k,)), dtype=dt)
    t_rows = None if t is None else torch.broadcast_to(torch.as_tensor(t, dtype=dt), h.shape[:-1])

    def field_fn(b, s):
        return model.head_velocity(b, torch.full(h.shape[:-1], s, dtype=dt), t_rows, h)

    return integrate(field_fn, b0, steps, solver).numpy().astype(np.float64)


# -- optimisation ---------------------------------------------------------------


@dataclass
class OptState:
    """Adam state plus the learning-rate schedule (linear warmup, then constant or cosine)."""

    optimizer: torch.optim.Optimizer
    lr: float
    warmup: int = 0
    total_steps: int = 0
    decay: str = "none"
    step: int = 0

    def current_lr(self) -> float:
        k = self.step + 1
        lr = self.lr
        if self.warmup and k <= self.warmup:
            return lr * k / self.warmup
        if self.decay == "cosine" and self.total_steps > self.warmup:
            frac = min(1.0, (k - self.warmup) / (self.total_steps - self.warmup))
            lr = lr * 0.5 * (1.0 + math.cos(math.pi * frac))
        return lr


def make_optimizer(model: nn.Module, lr: float, warmup: int = 0, total_steps: int = 0, decay: str = "none") -> OptState:
    # fused kernel only for float32; the float64 gradient-check models use the plain loop
    fused = _dtype(model) == torch.float32
    opt = torch.optim.Adam(model.parameters(), lr=lr, betas=(0.9, 0.999), eps=1e-8, fused=fused, foreach=False if not fused else None)
    return OptState(opt, lr, warmup, total_steps, decay)


def optimizer_step(model: nn.Module, grads: dict[str, torch.Tensor], state: OptState) -> nn.Module:
    """Apply one Adam update using ``grads`` (a name -> tensor mapping)."""
    for name, p in model.named_parameters():
        g = grads[name]
        if g.shape != p.shape:
            raise ShapeError(f"gradient for {name} has shape {tuple(g.shape)}, expected {tuple(p.shape)}")
        p.grad = g
    lr = state.current_lr()
    for group in state.optimizer.param_groups:
        group["lr"] = lr
    state.optimizer.step()
    state.step += 1
    return model


def assert_finite_parameters(model: nn.Module) -> None:
    for name, p in model.named_parameters():
        if not torch.all(torch.isfinite(p)):
            raise NumericError(f"parameter {name} became non-finite")
