"""Command-line runner: ``tm train | sample | eval | verify | sweep``.

Exit codes: 0 success, 2 configuration error, 3 numeric error, 4 failed verification.
"""

from __future__ import annotations

import argparse
import csv
import sys
import time
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from . import net
from .checkpoint import load_checkpoint, save_checkpoint
from .config import RunConfig
from .datasets import NAMES, DatasetSpec, dump_csv, sample_dataset
from .errors import ConfigError, NumericError, VerificationError
from .metrics import (
    SWEEP_COLUMNS,
    MetricReport,
    config_hash,
    efficiency_sweep,
    energy_report,
    null_threshold,
    wasserstein1_1d,
    write_reports,
)
from .rng import rng_stream
from .variants import BATCH_BUILDERS, init_train_state, sample, train_step

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_VERIFY = 0, 2, 3, 4
LOSS_COLUMNS = ("step", "train_loss", "probe_loss", "checkpoint")

# rng stream ids derived from the run seed
STREAM_TRAIN, STREAM_DATA, STREAM_PROBE = 1, 2, 3
STREAM_SAMPLE, STREAM_HELDOUT, STREAM_NULL = 4, 5, 6


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, (float, np.floating)) else str(v)


def train(cfg: RunConfig, out_dir: Path, seed: Optional[int] = None) -> Path:
    """Run the configured training loop; returns the path of ``loss.csv``."""
    seed = cfg.run.seed if seed is None else seed
    o, cadence = cfg.optim, cfg.run.eval_cadence
    if o.steps % cadence:
        raise ConfigError(f"steps ({o.steps}) must be a multiple of eval_cadence ({cadence})")
    state = init_train_state(cfg.variant, seed, rng_stream(seed, STREAM_TRAIN), lr=o.lr, warmup=o.warmup,
                             total_steps=o.steps, decay=o.decay, **cfg.model_overrides())
    data_rng = rng_stream(seed, STREAM_DATA)
    probe_rng = rng_stream(seed, STREAM_PROBE)
    probe = BATCH_BUILDERS[cfg.variant.kind](cfg.variant, sample_dataset(cfg.dataset, cfg.run.probe_size, probe_rng),
                                             probe_rng)

    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.ini")
    ckpt_root = out_dir / "checkpoints"
    loss_path = out_dir / "loss.csv"
    window: list[float] = []
    with open(loss_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOSS_COLUMNS)

        def record(step):
            with torch.no_grad():
                probe_loss = float(net.cfm_objective(state.model, probe))
            path = save_checkpoint(ckpt_root / f"step_{step:08d}", state.model, cfg.variant, seed, step)
            train_loss = _fmt(np.mean(window)) if window else ""
            writer.writerow([step, train_loss, _fmt(probe_loss), path.relative_to(out_dir).as_posix()])
            fh.flush()
            window.clear()

        record(0)
        for step in range(1, o.steps + 1):
            window.append(train_step(state, sample_dataset(cfg.dataset, o.batch_size, data_rng)))
            if step % cadence == 0:
                record(step)
    save_checkpoint(out_dir / "final", state.model, cfg.variant, seed, o.steps)
    return loss_path


def _held_out(spec: DatasetSpec, count: int, seed: int) -> np.ndarray:
    return sample_dataset(spec, count, rng_stream(seed, STREAM_HELDOUT))


def cmd_train(args) -> int:
    cfg = RunConfig.load(args.config)
    out = Path(args.out) if args.out else cfg.out_dir
    loss_path = train(cfg, out, args.seed)
    print(f"wrote {loss_path}")
    return EXIT_OK


def cmd_sample(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    x = sample(ckpt.model, ckpt.variant, args.count, rng_stream(args.seed, STREAM_SAMPLE))
    dump_csv(x, args.out)
    print(f"wrote {args.count} samples to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.checkpoint)
    spec = DatasetSpec(args.dataset, dim=ckpt.variant.dim)
    x = sample(ckpt.model, ckpt.variant, args.count, rng_stream(args.seed, STREAM_SAMPLE))
    ref = _held_out(spec, args.count, args.seed)
    fingerprint = {"checkpoint": str(args.checkpoint), "variant": ckpt.variant.to_dict(), "dataset": args.dataset,
                   "count": args.count}
    if args.metric == "energy":
        null = null_threshold(lambda n, r: sample_dataset(spec, n, r), args.count, args.count,
                              rng_stream(args.seed, STREAM_NULL), args.n_boot)
        rep = energy_report(x, ref, args.seed, fingerprint, n_boot=args.n_boot, threshold=3.0 * null)
    else:
        if spec.dim != 1:
            raise ConfigError("the w1 metric needs one-dimensional data")
        rep = MetricReport("wasserstein1", wasserstein1_1d(x, ref), 0.0, len(x), len(ref), args.seed,
                           config_hash(fingerprint))
    rep.extra["passed"] = "" if rep.passed is None else str(rep.passed).lower()
    rep.extra["threshold"] = "" if rep.threshold is None else repr(rep.threshold)
    print(", ".join(f"{k}={v}" for k, v in {**rep.row(), **rep.extra}.items()))
    if args.out:
        write_reports([rep], args.out, extra_columns=("threshold", "passed"))
    return EXIT_OK


def cmd_verify(args) -> int:
    from .verify import corrupted_mask, run_suite

    kwargs = {"seed": args.seed}
    if args.corrupt_mask:
        if args.suite != "masks":
            raise ConfigError("--corrupt-mask only applies to the masks suite")
        kwargs["mask_builder"] = corrupted_mask
    t0 = time.perf_counter()
    checks = run_suite(args.suite, **kwargs)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{args.suite}: {len(checks) - failed}/{len(checks)} passed in {time.perf_counter() - t0:.1f}s")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(("suite", "check", "passed", "detail"))
            writer.writerows((args.suite, c.name, str(c.passed).lower(), c.detail) for c in checks)
    if failed:
        raise VerificationError(f"{failed} check(s) failed")
    return EXIT_OK


def cmd_sweep(args) -> int:
    cfg = RunConfig.load(args.config)
    if cfg.sweep is None:
        raise ConfigError("sweep needs a [sweep] section")
    sw = cfg.sweep
    dtm, fm = load_checkpoint(sw.dtm_checkpoint), load_checkpoint(sw.fm_checkpoint)
    if dtm.variant.kind != "dtm" or fm.variant.kind != "fm":
        raise ConfigError("sweep needs a dtm checkpoint and an fm checkpoint")
    seed = cfg.run.seed if args.seed is None else args.seed
    target = _held_out(DatasetSpec(cfg.dataset.name, dim=dtm.variant.dim), sw.count, seed)
    reports = efficiency_sweep(dtm.model, dtm.variant, fm.model, fm.variant, target, sw.T_list, sw.head_steps_list,
                               sw.euler_list, sw.count, seed, n_boot=sw.n_boot)
    out = Path(args.out) if args.out else cfg.out_dir
    out.mkdir(parents=True, exist_ok=True)
    write_reports(reports, out / "sweep.csv", extra_columns=SWEEP_COLUMNS)
    for rep in reports:
        e = rep.extra
        print(f"{e['variant']} T={e['T']} head={e['head_steps']}: energy {rep.value:.3e} +- {rep.stderr:.1e}, "
              f"nfe {e['backbone_nfe']}, {e['wall_time']:.2f}s")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tm", description="Transition-matching toy experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train the configured variant")
    t.add_argument("--config", required=True)
    t.add_argument("--out", help="output directory (default: from config)")
    t.add_argument("--seed", type=int, help="override the config seed")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw samples from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--count", type=int, default=1000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True, help="CSV file to write")
    s.set_defaults(func=cmd_sample)

    e = sub.add_parser("eval", help="compare checkpoint samples with a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True, choices=NAMES)
    e.add_argument("--metric", choices=("energy", "w1"), default="energy")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--count", type=int, default=2000)
    e.add_argument("--n-boot", type=int, default=200)
    e.add_argument("--out", help="CSV file for the report row")
    e.set_defaults(func=cmd_eval)

    v = sub.add_parser("verify", help="run a property suite")
    v.add_argument("--suite", required=True, choices=("gradcheck", "oracle", "theorem1", "marginals", "masks"))
    v.add_argument("--seed", type=int, default=0)
    v.add_argument("--out", help="CSV file for per-check results")
    v.add_argument("--corrupt-mask", action="store_true", help="negative control: break the attention mask")
    v.set_defaults(func=cmd_verify)

    w = sub.add_parser("sweep", help="DTM (T, head steps) x FM Euler-step quality sweep")
    w.add_argument("--config", required=True)
    w.add_argument("--out", help="output directory (default: from config)")
    w.add_argument("--seed", type=int)
    w.set_defaults(func=cmd_sweep)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    torch.set_num_threads(1)  # bit-reproducible reductions
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except VerificationError as exc:
        print(f"verification failed: {exc}", file=sys.stderr)
        return EXIT_VERIFY


if __name__ == "__main__":
    sys.exit(main())
