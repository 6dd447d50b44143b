"""Run configuration: INI text <-> typed dataclasses, with a bit-exact round trip.

Floats are written with ``repr`` so that parsing them back gives the same
double. The only environment input is ``TM_OUT_DIR``, which overrides the
output directory.
"""

from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from .datasets import DatasetSpec
from .errors import ConfigError
from .variants import VariantConfig

OUT_DIR_ENV = "TM_OUT_DIR"

# model fields a config may set; the rest follow from the variant
MODEL_KEYS = ("width", "layers", "mlp_ratio", "head_width", "head_depth", "d_time")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, (list, tuple)):
        return ", ".join(format_value(x) for x in v)
    return str(v)


def parse_value(text: str, kind: str):
    """Parse ``text`` as the annotated field type ``kind`` (a string annotation)."""
    text = text.strip()
    try:
        if kind == "bool":
            low = text.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind.startswith("tuple"):
            inner = "float" if "float" in kind else "int"
            return tuple(parse_value(p, inner) for p in text.split(",") if p.strip())
    except ValueError as exc:
        raise ConfigError(f"cannot parse {text!r} as {kind}") from exc
    return text


def build_dataclass(cls, values: dict, where: str):
    """Instantiate ``cls`` from string values, rejecting unknown keys."""
    types = {f.name: f.type for f in dataclasses.fields(cls)}
    unknown = set(values) - set(types)
    if unknown:
        raise ConfigError(f"unknown keys in [{where}]: {sorted(unknown)}")
    kwargs = {k: parse_value(v, str(types[k])) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"[{where}]: {exc}") from exc


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    batch_size: int = 256
    steps: int = 1000
    warmup: int = 0
    decay: str = "none"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.batch_size < 1 or self.steps < 1 or self.warmup < 0:
            raise ConfigError("batch_size and steps must be >= 1, warmup >= 0")
        if self.decay not in ("none", "cosine"):
            raise ConfigError(f"unknown decay {self.decay!r}")


@dataclass(frozen=True)
class RunSection:
    seed: int = 0
    eval_cadence: int = 100
    probe_size: int = 512
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.eval_cadence < 1:
            raise ConfigError("eval_cadence must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be non-negative")


@dataclass(frozen=True)
class SweepConfig:
    dtm_checkpoint: str
    fm_checkpoint: str
    T_list: tuple[int, ...] = (4, 8, 16, 32, 64)
    head_steps_list: tuple[int, ...] = (1, 2, 4, 8)
    euler_list: tuple[int, ...] = (4, 8, 16, 32, 64)
    count: int = 2000
    n_boot: int = 50


@dataclass(frozen=True)
class RunConfig:
    variant: VariantConfig
    dataset: DatasetSpec
    optim: OptimConfig = field(default_factory=OptimConfig)
    run: RunSection = field(default_factory=RunSection)
    model: dict = field(default_factory=dict)
    sweep: Optional[SweepConfig] = None

    def __post_init__(self):
        if self.dataset.dim != self.variant.dim:
            raise ConfigError(f"dataset dimension {self.dataset.dim} != variant dimension {self.variant.dim}")
        bad = set(self.model) - set(MODEL_KEYS)
        if bad:
            raise ConfigError(f"unknown model keys {sorted(bad)}")

    @property
    def out_dir(self) -> Path:
        return Path(os.environ.get(OUT_DIR_ENV) or self.run.out_dir)

    def model_overrides(self) -> dict:
        return dict(self.model)

    def fingerprint(self) -> dict:
        return {"variant": self.variant.to_dict(), "dataset": dataclasses.asdict(self.dataset),
                "optim": dataclasses.asdict(self.optim), "model": dict(sorted(self.model.items())),
                "seed": self.run.seed}

    def to_text(self) -> str:
        sections = {"variant": self.variant, "dataset": self.dataset, "optim": self.optim, "run": self.run}
        if self.sweep is not None:
            sections["sweep"] = self.sweep
        lines = []
        for name, obj in sections.items():
            lines.append(f"[{name}]")
            lines.extend(f"{f.name} = {format_value(getattr(obj, f.name))}" for f in dataclasses.fields(obj))
            lines.append("")
        if self.model:
            lines.append("[model]")
            lines.extend(f"{k} = {format_value(v)}" for k, v in sorted(self.model.items()))
            lines.append("")
        return "\n".join(lines)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str  # keys such as T_list are case-sensitive
        try:
            parser.read_string(text)
        except configparser.Error as exc:
            raise ConfigError(f"malformed config: {exc}") from exc
        for required in ("variant", "dataset"):
            if not parser.has_section(required):
                raise ConfigError(f"missing [{required}] section")
        extra = set(parser.sections()) - {"variant", "dataset", "optim", "run", "model", "sweep"}
        if extra:
            raise ConfigError(f"unknown sections {sorted(extra)}")

        def section(name):
            return dict(parser[name]) if parser.has_section(name) else {}

        model = {}
        for k, v in section("model").items():
            if k not in MODEL_KEYS:
                raise ConfigError(f"unknown model key {k!r}")
            model[k] = parse_value(v, "int")
        sweep = build_dataclass(SweepConfig, section("sweep"), "sweep") if parser.has_section("sweep") else None
        return cls(
            variant=build_dataclass(VariantConfig, section("variant"), "variant"),
            dataset=build_dataclass(DatasetSpec, section("dataset"), "dataset"),
            optim=build_dataclass(OptimConfig, section("optim"), "optim"),
            run=build_dataclass(RunSection, section("run"), "run"),
            model=model,
            sweep=sweep,
        )

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} does not exist")
        return cls.from_text(path.read_text())

    def save(self, path) -> None:
        Path(path).write_text(self.to_text())
