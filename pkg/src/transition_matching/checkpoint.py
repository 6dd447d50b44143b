"""Checkpoints: a text manifest plus one flat little-endian float32 blob.

``manifest.txt`` holds ``key = value`` lines (format version, variant, seed,
step, the variant and model configs, then one ``param.<name> = <shape>`` line
per tensor in storage order). ``params.f32`` is every tensor's values
concatenated in that order.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path

import numpy as np
import torch

from .config import format_value, parse_value
from .errors import ConfigError
from .net import ModelConfig, VelocityModel, build_model
from .variants import VariantConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.txt"
BLOB = "params.f32"


@dataclasses.dataclass
class Checkpoint:
    model: VelocityModel
    variant: VariantConfig
    seed: int
    step: int


def save_checkpoint(path, model: VelocityModel, variant: VariantConfig, seed: int, step: int) -> Path:
    """Write ``model`` under directory ``path`` (created if needed); returns the directory."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    lines = [f"version = {FORMAT_VERSION}", f"variant = {variant.kind}", f"seed = {seed}", f"step = {step}"]
    lines += [f"variant.{f.name} = {format_value(getattr(variant, f.name))}" for f in dataclasses.fields(variant)]
    lines += [f"model.{f.name} = {format_value(getattr(model.config, f.name))}"
              for f in dataclasses.fields(model.config)]
    chunks = []
    for name, p in model.named_parameters():
        arr = p.detach().cpu().numpy().astype("<f4")
        lines.append(f"param.{name} = {'x'.join(map(str, arr.shape)) or 'scalar'}")
        chunks.append(arr.ravel().tobytes())
    (path / BLOB).write_bytes(b"".join(chunks))
    (path / MANIFEST).write_text("\n".join(lines) + "\n")
    return path


def _read_manifest(path: Path) -> list[tuple[str, str]]:
    if not (path / MANIFEST).is_file() or not (path / BLOB).is_file():
        raise ConfigError(f"{path} is not a checkpoint directory")
    entries = []
    for raw in (path / MANIFEST).read_text().splitlines():
        if not raw.strip():
            continue
        key, sep, value = raw.partition("=")
        if not sep:
            raise ConfigError(f"malformed manifest line {raw!r}")
        entries.append((key.strip(), value.strip()))
    return entries


def _typed(cls, values: dict):
    types = {f.name: str(f.type) for f in dataclasses.fields(cls)}
    return cls(**{k: parse_value(v, types[k]) for k, v in values.items()})


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    entries = _read_manifest(path)
    head = dict(entries)
    if int(head.get("version", -1)) != FORMAT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {head.get('version')}")
    variant = _typed(VariantConfig, {k[8:]: v for k, v in entries if k.startswith("variant.")})
    mcfg = _typed(ModelConfig, {k[6:]: v for k, v in entries if k.startswith("model.")})
    shapes = [(k[6:], () if v == "scalar" else tuple(int(s) for s in v.split("x")))
              for k, v in entries if k.startswith("param.")]
    model = build_model(mcfg, seed=0, dtype=torch.float32)
    params = dict(model.named_parameters())
    if [n for n, _ in shapes] != list(params):
        raise ConfigError("checkpoint parameter names do not match the model layout")
    blob = np.frombuffer((path / BLOB).read_bytes(), dtype="<f4")
    total = sum(int(np.prod(s)) for _, s in shapes)
    if blob.size != total:
        raise ConfigError(f"parameter blob holds {blob.size} values, manifest expects {total}")
    offset = 0
    with torch.no_grad():
        for name, shape in shapes:
            size = int(np.prod(shape))
            if tuple(params[name].shape) != shape:
                raise ConfigError(f"shape mismatch for {name}")
            params[name].copy_(torch.from_numpy(blob[offset:offset + size].reshape(shape).astype(np.float32)))
            offset += size
    return Checkpoint(model, variant, int(head["seed"]), int(head["step"]))
