"""Strict JSON run configuration.

Every key is validated before any work starts and unknown keys are rejected.
Errors carry the line of the offending key so they can be fixed in place.
"""

from __future__ import annotations

import dataclasses
import json
import re
from dataclasses import dataclass, field
from pathlib import Path

from .pcm import GateConfig


class ConfigError(ValueError):
    def __init__(self, message: str, line: int | None = None, path: str | None = None):
        where = f"{path or '<config>'}:{line}: " if line else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


@dataclass
class LayoutSection:
    frames: int = 8
    height: int = 8
    width: int = 8
    channels: int = 4
    mouth_rect: list[int] | None = None
    face_rect: list[int] | None = None


@dataclass
class ModelSection:
    c_model: int = 16
    d_state: int = 8
    blocks: int = 2
    d_emb: int = 8
    d_id: int = 8
    variant: str = "full"


@dataclass
class ScheduleSection:
    T: int = 100
    beta_min: float = 1e-3
    beta_max: float = 0.2


@dataclass
class TrainingSection:
    steps: int = 2000
    batch: int = 4
    lr: float = 3e-3
    p_uncond: float = 0.1
    seed: int = 0
    optimizer: str = "adam"
    momentum: float = 0.9


@dataclass
class SamplingSection:
    ddim_steps: int = 20
    guidance: float = 2.0
    gates: list[int] = field(default_factory=lambda: [1, 1])
    count: int = 16


@dataclass
class DataSection:
    count: int = 64


@dataclass
class BenchSection:
    lengths: list[int] = field(default_factory=lambda: [2 ** k for k in range(10, 16)])
    channels: int = 16
    repeats: int = 5
    chunk: int = 64


@dataclass
class PathsSection:
    out_dir: str = "runs/default"


@dataclass
class RunConfig:
    layout: LayoutSection = field(default_factory=LayoutSection)
    model: ModelSection = field(default_factory=ModelSection)
    schedule: ScheduleSection = field(default_factory=ScheduleSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    data: DataSection = field(default_factory=DataSection)
    bench: BenchSection = field(default_factory=BenchSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @property
    def gates(self) -> GateConfig:
        return GateConfig(*self.sampling.gates)


def _line_of(text: str | None, section: str, key: str | None) -> int | None:
    if not text:
        return None
    lines = text.splitlines()
    start = 0
    pat = re.compile(r'"%s"\s*:' % re.escape(section))
    for i, ln in enumerate(lines):
        if pat.search(ln):
            start = i
            if key is None:
                return i + 1
            break
    if key is not None:
        kpat = re.compile(r'"%s"\s*:' % re.escape(key))
        for i in range(start, len(lines)):
            if kpat.search(lines[i]):
                return i + 1
    return start + 1 if start else None


def _coerce(value, annotation: str, where: str):
    if annotation == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise TypeError(f"{where} must be an integer")
        return value
    if annotation == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise TypeError(f"{where} must be a number")
        return float(value)
    if annotation == "str":
        if not isinstance(value, str):
            raise TypeError(f"{where} must be a string")
        return value
    if annotation.startswith("list[int]"):
        if value is None and annotation.endswith("None"):
            return None
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool)
                                                  for v in value):
            raise TypeError(f"{where} must be a list of integers")
        return list(value)
    raise TypeError(f"{where}: unsupported field type {annotation}")  # pragma: no cover


def from_dict(raw: dict, text: str | None = None, path: str | None = None) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", 1, path)
    cfg = RunConfig()
    sections = {f.name: f for f in dataclasses.fields(RunConfig)}
    for name, body in raw.items():
        if name not in sections:
            raise ConfigError(f"unknown section {name!r}", _line_of(text, name, None), path)
        if not isinstance(body, dict):
            raise ConfigError(f"section {name!r} must be an object", _line_of(text, name, None), path)
        target = getattr(cfg, name)
        fields = {f.name: f for f in dataclasses.fields(target)}
        for key, value in body.items():
            line = _line_of(text, name, key)
            if key not in fields:
                raise ConfigError(f"unknown key {name}.{key}", line, path)
            try:
                setattr(target, key, _coerce(value, str(fields[key].type), f"{name}.{key}"))
            except TypeError as exc:
                raise ConfigError(str(exc), line, path) from None
    _validate(cfg, text, path)
    return cfg


def _validate(cfg: RunConfig, text, path) -> None:
    def need(ok: bool, section: str, key: str, msg: str):
        if not ok:
            raise ConfigError(f"{section}.{key} {msg}", _line_of(text, section, key), path)

    lay = cfg.layout
    for k in ("frames", "height", "width", "channels"):
        need(getattr(lay, k) >= 1, "layout", k, "must be >= 1")
    for k in ("mouth_rect", "face_rect"):
        v = getattr(lay, k)
        need(v is None or len(v) == 4, "layout", k, "must be [top, left, bottom, right]")
    need((lay.mouth_rect is None) == (lay.face_rect is None), "layout", "mouth_rect",
         "and face_rect must be given together")
    m = cfg.model
    for k in ("c_model", "d_state", "blocks", "d_emb", "d_id"):
        need(getattr(m, k) >= 1, "model", k, "must be >= 1")
    need(m.d_emb % 2 == 0, "model", "d_emb", "must be even")
    from .diffusion import VARIANTS
    need(m.variant in VARIANTS, "model", "variant", f"must be one of {VARIANTS}")
    s = cfg.schedule
    need(s.T >= 1, "schedule", "T", "must be >= 1")
    need(0 < s.beta_min < 1, "schedule", "beta_min", "must lie in (0, 1)")
    need(s.beta_min < s.beta_max < 1, "schedule", "beta_max", "must lie in (beta_min, 1)")
    t = cfg.training
    need(t.steps >= 0, "training", "steps", "must be >= 0")
    need(t.batch >= 1, "training", "batch", "must be >= 1")
    need(t.lr > 0, "training", "lr", "must be positive")
    need(0 <= t.p_uncond <= 1, "training", "p_uncond", "must lie in [0, 1]")
    need(t.seed >= 0, "training", "seed", "must be >= 0")
    need(t.optimizer in ("sgd", "adam"), "training", "optimizer", "must be 'sgd' or 'adam'")
    need(0 <= t.momentum < 1, "training", "momentum", "must lie in [0, 1)")
    sp = cfg.sampling
    need(sp.ddim_steps >= 1, "sampling", "ddim_steps", "must be >= 1")
    need(sp.count >= 1, "sampling", "count", "must be >= 1")
    need(len(sp.gates) == 2, "sampling", "gates", "must be [g_audio, g_motion]")
    try:
        GateConfig(*sp.gates).validate()
    except ValueError as exc:
        raise ConfigError(f"sampling.gates: {exc}", _line_of(text, "sampling", "gates"), path) from None
    need(cfg.data.count >= 1, "data", "count", "must be >= 1")
    b = cfg.bench
    need(len(b.lengths) >= 4 and all(x < y for x, y in zip(b.lengths, b.lengths[1:])),
         "bench", "lengths", "must be >= 4 strictly increasing values")
    need(b.repeats >= 5, "bench", "repeats", "must be >= 5")
    need(b.chunk >= 1 and b.channels >= 1, "bench", "chunk", "and channels must be >= 1")


def load_config(path) -> RunConfig:
    text = Path(path).read_text()
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno, str(path)) from None
    return from_dict(raw, text, str(path))
