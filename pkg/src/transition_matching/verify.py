"""Property suites behind ``tm verify``: each returns a list of named pass/fail checks."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass
from typing import Callable, Iterator, Optional

import numpy as np
import torch

from . import net, theorem
from .metrics import marginal_consistency_report
from .oracle import GmmTarget, gaussian_posterior_sample, gmm_marginal_velocity, mc_conditional_expectation
from .processes import Scheduler
from .rng import rng_stream
from .variants import BATCH_BUILDERS, VariantConfig, model_config

SUITES = ("gradcheck", "oracle", "theorem1", "marginals", "masks")

GRADCHECK_EPS = 1e-5
GRADCHECK_TOL = 1e-4
# relative errors use max(|analytic|, |numeric|, floor) as denominator
GRADCHECK_FLOOR = 1e-6


@dataclass(frozen=True)
class Check:
    name: str
    passed: bool
    detail: str = ""

    def line(self) -> str:
        return f"{'PASS' if self.passed else 'FAIL'} {self.name}" + (f": {self.detail}" if self.detail else "")


# -- shared helpers -------------------------------------------------------------


def tiny_variant(kind: str, T: int = 2, n: int = 2, dim: int = 2) -> VariantConfig:
    return VariantConfig(kind, T, n=n, dim=dim)


def tiny_model(cfg: VariantConfig, seed: int, randomize: bool = True, **overrides) -> net.VelocityModel:
    """Small float64 model; ``randomize`` replaces the init with N(0, 0.3^2) weights."""
    kw = dict(width=16, head_width=16, d_time=8)
    kw.update(overrides)
    model = net.build_model(model_config(cfg, **kw), seed=seed, dtype=torch.float64)
    if randomize:
        gen = torch.Generator().manual_seed(seed + 1)
        with torch.no_grad():
            for p in model.parameters():
                p.copy_(0.3 * torch.randn(p.shape, generator=gen, dtype=torch.float64))
    return model


def probe_batch(cfg: VariantConfig, size: int, rng: np.random.Generator) -> net.Batch:
    x_T = rng.standard_normal((size, cfg.dim))
    return BATCH_BUILDERS[cfg.kind](cfg, x_T, rng)


def gradient_errors(model: net.VelocityModel, batch: net.Batch, rng: np.random.Generator, n_probe: int = 10,
                    eps: float = GRADCHECK_EPS) -> dict[str, float]:
    """Worst relative error, per parameter tensor, of autograd vs central differences."""
    _, grads = net.cfm_loss(model, batch)
    errors = {}
    with torch.no_grad():
        for name, p in model.named_parameters():
            flat = p.view(-1)
            idx = rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False)
            worst = 0.0
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + eps
                up = net.cfm_objective(model, batch).item()
                flat[i] = orig - eps
                down = net.cfm_objective(model, batch).item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                analytic = grads[name].view(-1)[i].item()
                denom = max(abs(analytic), abs(numeric), GRADCHECK_FLOOR)
                worst = max(worst, abs(analytic - numeric) / denom)
            errors[name] = worst
    return errors


@contextlib.contextmanager
def patched_mask(builder: Optional[Callable]) -> Iterator[None]:
    """Temporarily replace the attention-mask builder (negative controls)."""
    if builder is None:
        yield
        return
    original = net.attention_mask
    net.attention_mask = builder
    try:
        yield
    finally:
        net.attention_mask = original


_ORIGINAL_MASK = net.attention_mask


def corrupted_mask(length: int, mode: str, block: int) -> torch.Tensor:
    """A broken builder that lets every position read one step into the future."""
    i = torch.arange(length).unsqueeze(1)
    j = torch.arange(length).unsqueeze(0)
    return _ORIGINAL_MASK(length, mode, block) | (j == i + 1)


# -- suites ---------------------------------------------------------------------


def suite_gradcheck(seed: int = 0) -> list[Check]:
    checks = []
    for k, kind in enumerate(("dtm", "artm", "fhtm", "fm")):
        cfg = tiny_variant(kind, 2)
        for randomize in (False, True):
            rng = rng_stream(seed, (11, k, int(randomize)))
            model = tiny_model(cfg, seed, randomize)
            errs = gradient_errors(model, probe_batch(cfg, 4, rng), rng)
            worst_name = max(errs, key=errs.get)
            label = "random" if randomize else "fresh"
            checks.append(Check(f"gradcheck {kind} {label} ({len(errs)} tensors)", errs[worst_name] < GRADCHECK_TOL,
                                f"max rel err {errs[worst_name]:.2e} at {worst_name}"))
    return checks


ORACLE_TARGETS = {
    "gauss1d": GmmTarget.gaussian(0.5, 0.8),
    "mix1d": GmmTarget([0.3, 0.7], [[-1.0], [1.5]], [0.25, 0.16]),
    "gauss2d": GmmTarget.gaussian([0.5, -1.0], [0.7, 1.2]),
    "mix2d": GmmTarget([0.5, 0.5], [[-1.0, 0.0], [1.0, 0.5]], [[0.3, 0.2], [0.2, 0.3]]),
}

# (target, x, r): five probes per target, twenty in total
ORACLE_PROBES = [
    ("gauss1d", [0.0], 0.0), ("gauss1d", [1.0], 0.25), ("gauss1d", [-0.5], 0.5), ("gauss1d", [0.3], 0.75),
    ("gauss1d", [0.8], 0.6),
    ("mix1d", [0.0], 0.1), ("mix1d", [0.5], 0.3), ("mix1d", [-0.5], 0.5), ("mix1d", [1.0], 0.7),
    ("mix1d", [-0.2], 0.4),
    ("gauss2d", [0.0, 0.0], 0.2), ("gauss2d", [0.5, -0.5], 0.5), ("gauss2d", [-0.3, 0.4], 0.7),
    ("gauss2d", [0.2, -1.0], 0.4), ("gauss2d", [1.0, 0.0], 0.3),
    ("mix2d", [0.0, 0.0], 0.2), ("mix2d", [0.5, 0.2], 0.5), ("mix2d", [-0.6, 0.1], 0.6),
    ("mix2d", [0.3, -0.3], 0.35), ("mix2d", [-0.2, 0.4], 0.45),
]


def suite_oracle(seed: int = 0, n_mc: int = 1_000_000, bandwidth: float = 0.05,
                 n_posterior: int = 100_000) -> list[Check]:
    checks = []
    for i, (name, x, r) in enumerate(ORACLE_PROBES):
        target = ORACLE_TARGETS[name]
        x = np.asarray(x, dtype=np.float64)
        exact = gmm_marginal_velocity(target, x, r)
        est = mc_conditional_expectation(target.sample, x, r, bandwidth, n_mc, rng_stream(seed, (21, i)))
        z = np.abs(est.value - exact) / est.stderr
        checks.append(Check(f"closed form vs Monte Carlo {name} x={x.tolist()} r={r}", bool(np.all(z < 3.0)),
                            f"max |z| {z.max():.2f} (ess {est.ess:.0f})"))
        if target.n_components == 1:
            y = gaussian_posterior_sample(target, np.tile(x, (n_posterior, 1)), r, rng_stream(seed, (22, i)))
            se = y.std(axis=0, ddof=1) / np.sqrt(n_posterior)
            z = np.abs(y.mean(axis=0) - exact) / se
            checks.append(Check(f"posterior mean vs closed form {name} x={x.tolist()} r={r}",
                                bool(np.all(z < 3.0)), f"max |z| {z.max():.2f}"))
    return checks


def suite_theorem1(seed: int = 0, n_chains: int = 20_000) -> list[Check]:
    target = theorem.HARNESS_TARGET
    checks = []
    for i, x in enumerate(theorem.HARNESS_X):
        run = theorem.convergence_curve(target, x, theorem.HARNESS_H, theorem.sqrt_k_rule, n_chains,
                                        rng_stream(seed, (31, i)))
        ratios = run.quarter_ratios()
        checks += [
            Check(f"x={x}: error weakly decreasing in h", run.weakly_decreasing(),
                  "mse " + ", ".join(f"{m:.4g}" for m in run.mse)),
            Check(f"x={x}: final error below 5% of |f0|^2 + 1e-3", bool(run.mse[-1] < run.final_bound()),
                  f"{run.mse[-1]:.4g} < {run.final_bound():.4g}"),
            Check(f"x={x}: quartering h halves the error", bool(np.all((ratios >= 1.5) & (ratios <= 3.0))),
                  "ratios " + ", ".join(f"{q:.2f}" for q in ratios)),
        ]
        mom = theorem.moment_check(target, x, theorem.HARNESS_H[2], theorem.sqrt_k_rule(theorem.HARNESS_H[2]),
                                   n_chains, rng_stream(seed, (32, i)))
        checks.append(Check(f"x={x}: bounded states and increments", mom.passed,
                            f"|X| <= {mom.max_state_norm:.3g} (bound {mom.state_bound:.3g}), "
                            f"E|Y|^2 <= {mom.max_second_moment:.3g} (bound {mom.second_moment_bound:.3g})"))
        kh, res = theorem.taylor_residuals(target, x, theorem.HARNESS_H, theorem.sqrt_k_rule)
        if np.all(res < 1e-12):
            checks.append(Check(f"x={x}: Euler chain matches x + kh f0(x)", True, "exact (straight path)"))
        else:
            slope = np.polyfit(np.log(kh), np.log(res), 1)[0]
            checks.append(Check(f"x={x}: Euler chain deviates as O((kh)^2)", bool(abs(slope - 2.0) <= 0.3),
                                f"log-log slope {slope:.3f}"))
    coarse = theorem.lipschitz_estimate(target, -3.0, 3.0)
    fine = theorem.lipschitz_estimate(target, -3.0, 3.0, n_x=161, n_r=81)
    checks.append(Check("mean field is Lipschitz on [-3, 3] x [0, 1/2]",
                        bool(np.isfinite(fine) and abs(fine - coarse) <= 0.05 * coarse),
                        f"estimate {coarse:.4g} -> {fine:.4g} on a 2x finer grid"))
    return checks


MARGINAL_TARGET = GmmTarget([0.4, 0.6], [[-1.5], [1.0]], [0.09, 0.25])


def suite_marginals(seed: int = 0, n: int = 10_000, n_boot: int = 200) -> list[Check]:
    checks = []
    for sched in (Scheduler("uniform", 16), Scheduler("exponential", 3)):
        reports = marginal_consistency_report(MARGINAL_TARGET.sample, sched, n, seed, n_boot)
        worst = max(reports, key=lambda rep: rep.value / rep.threshold)
        checks.append(Check(f"dependent and independent marginals agree ({sched.kind}, T={sched.T})",
                            all(rep.passed for rep in reports),
                            f"worst t={worst.extra['t']}: {worst.value:.2e} vs threshold {worst.threshold:.2e}"))
        bad = marginal_consistency_report(MARGINAL_TARGET.sample, sched, n, seed, n_boot, noise_scale=2.0)
        failed = [rep.extra["t"] for rep in bad if not rep.passed]
        checks.append(Check(f"2x noise corruption is detected ({sched.kind}, T={sched.T})", bool(failed),
                            f"{len(failed)} of {len(bad)} grid points flagged"))
    return checks


def suite_masks(seed: int = 0, mask_builder: Optional[Callable] = None) -> list[Check]:
    checks = []
    rng = rng_stream(seed, 51)
    with patched_mask(mask_builder), torch.no_grad():
        # fully causal history
        cfg = tiny_variant("fhtm", T=3, n=2)
        model = tiny_model(cfg, seed)
        L = model.config.max_len
        tokens = torch.as_tensor(rng.standard_normal((3, L, 1)))
        base = model.backbone(tokens)
        causal, reacts = True, True
        for j in range(L):
            pert = tokens.clone()
            pert[:, j] += 1.0
            out = model.backbone(pert)
            causal &= bool(torch.equal(out[:, :j], base[:, :j]))
            reacts &= bool(not torch.equal(out[:, j:], base[:, j:]))
        checks.append(Check("fh_causal: earlier outputs bit-identical under later perturbations", causal))
        checks.append(Check("fh_causal: outputs at and after a perturbation change", reacts))
        joint = base
        naive = torch.stack([model.backbone(tokens[:, : p + 1])[:, -1] for p in range(L)], dim=1)
        gap = float((joint - naive).abs().max())
        checks.append(Check("fh_causal: joint pass equals per-prefix recomputation", gap <= 1e-6, f"max gap {gap:.1e}"))

        # partially causal next-state sequence
        cfg = tiny_variant("artm", T=2, n=4, dim=4)
        model = tiny_model(cfg, seed)
        n, L = cfg.n, model.config.max_len
        tokens = torch.as_tensor(rng.standard_normal((3, L, 1)))
        t = torch.full((3,), 0.5, dtype=torch.float64)
        base = model.backbone(tokens, t)
        all_change, prefix_causal = True, True
        for j in range(L):
            pert = tokens.clone()
            pert[:, j] += 1.0
            out = model.backbone(pert, t)
            if j < n:
                all_change &= bool(torch.all((out - base).abs().amax(dim=-1) > 0))
            else:
                prefix_causal &= bool(torch.equal(out[:, :j], base[:, :j]))
        checks.append(Check("artm_causal: every output depends on every current-state token", all_change))
        checks.append(Check("artm_causal: next-state prefix is strictly causal", prefix_causal))

        # full attention without positions is permutation-equivariant
        cfg = tiny_variant("dtm", T=2, n=4, dim=4)
        model = tiny_model(cfg, seed, use_positions=False)
        tokens = torch.as_tensor(rng.standard_normal((3, 4, 1)))
        t = torch.full((3,), 0.25, dtype=torch.float64)
        perm = torch.as_tensor([2, 0, 3, 1])
        gap = float((model.backbone(tokens[:, perm], t) - model.backbone(tokens, t)[:, perm]).abs().max())
        checks.append(Check("full: permuting inputs permutes outputs", gap <= 1e-12, f"max gap {gap:.1e}"))
    return checks


SUITE_FUNCS = {"gradcheck": suite_gradcheck, "oracle": suite_oracle, "theorem1": suite_theorem1,
               "marginals": suite_marginals, "masks": suite_masks}


def run_suite(name: str, **kwargs) -> list[Check]:
    if name not in SUITE_FUNCS:
        raise KeyError(f"unknown suite {name!r}; expected one of {SUITES}")
    return SUITE_FUNCS[name](**kwargs)
