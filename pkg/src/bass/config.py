"""Run configuration files: ``key = value`` lines with ``#`` comments.

One flat namespace covers the model, training, inference, synthetic-data and
benchmark settings. A key shared by several sections (``seed``,
``feature_dim``, ``max_decode_len``, ``block_size_frames``) sets all of them.
Keys that are absent keep their dataclass defaults.
"""

from __future__ import annotations

import re
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, Optional, Tuple

from .data import SyntheticConfig
from .inference import InferConfig
from .model import UPDATER_KINDS, ModelConfig
from .training import TrainConfig


@dataclass
class BenchConfig:
    """Settings of the adaptation stage of the synthetic benchmark."""

    adapt_epochs: int = 20
    adapt_peak_lr: float = 1e-3
    adapt_warmup_steps: int = 400
    bench_updaters: str = "concat,gated,hierarchical"

    def __post_init__(self):
        if self.adapt_epochs < 0:
            raise ValueError("adapt_epochs must be >= 0")
        if self.adapt_peak_lr <= 0:
            raise ValueError("adapt_peak_lr must be positive")
        if self.adapt_warmup_steps < 1:
            raise ValueError("adapt_warmup_steps must be >= 1")
        if not self.updaters:
            raise ValueError("bench_updaters must name at least one updater")
        for kind in self.updaters:
            if kind not in UPDATER_KINDS:
                raise ValueError(f"bench_updaters: unknown updater {kind!r}")

    @property
    def updaters(self) -> Tuple[str, ...]:
        return tuple(k.strip() for k in self.bench_updaters.split(",") if k.strip())


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    infer: InferConfig = field(default_factory=InferConfig)
    data: SyntheticConfig = field(default_factory=SyntheticConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)


SECTIONS = {
    "model": ModelConfig,
    "train": TrainConfig,
    "infer": InferConfig,
    "data": SyntheticConfig,
    "bench": BenchConfig,
}


class ConfigError(ValueError):
    pass


def _key_types() -> Dict[str, type]:
    out: Dict[str, type] = {}
    for cls in SECTIONS.values():
        hints = typing.get_type_hints(cls)
        for f in fields(cls):
            kind = hints[f.name]
            if typing.get_origin(kind) is typing.Union:  # Optional[str]
                kind = str
            out[f.name] = kind
    return out


KEY_TYPES = _key_types()
_LINE = re.compile(r"^\s*([A-Za-z_][A-Za-z0-9_]*)\s*=\s*(.*?)\s*$")


def _convert(kind: type, raw: str):
    if kind is bool:
        if raw.lower() not in ("true", "false"):
            raise ValueError(f"expected true or false, got {raw!r}")
        return raw.lower() == "true"
    if kind is int:
        return int(raw)
    if kind is float:
        return float(raw)
    if raw == "":
        raise ValueError("empty value")
    return raw


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    """Parse configuration text; every error message names ``source:line``."""
    values: Dict[str, object] = {}
    where: Dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        body = line.split("#", 1)[0]
        if not body.strip():
            continue
        m = _LINE.match(body)
        if m is None:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, raw = m.groups()
        if key not in KEY_TYPES:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in where:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r} (first set on line {where[key]})")
        try:
            values[key] = _convert(KEY_TYPES[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
        where[key] = lineno

    built = {}
    for section, cls in SECTIONS.items():
        own = {f.name: values[f.name] for f in fields(cls) if f.name in values}
        try:
            built[section] = cls(**own)
        except ValueError as exc:
            raise ConfigError(_constraint_message(source, str(exc), own, where)) from None
    cfg = RunConfig(**built)
    needed = cfg.data.vocab_words + 4
    if "vocab_size" in values and cfg.model.vocab_size < needed:
        raise ConfigError(
            f"{source}:{where['vocab_size']}: vocab_size {cfg.model.vocab_size} is smaller than "
            f"vocab_words + 4 = {needed}"
        )
    if "vocab_size" not in values and "vocab_words" in values:
        cfg.model = replace(cfg.model, vocab_size=needed)
    return cfg


def _constraint_message(source: str, message: str, own: Dict[str, object], where: Dict[str, int]) -> str:
    lines = sorted(where[k] for k in own if re.search(rf"\b{k}\b", message))
    if not lines:
        lines = sorted(where[k] for k in own)
    loc = ",".join(str(n) for n in lines) if lines else "defaults"
    return f"{source}:{loc}: {message}"


def parse_config(path: Optional[str]) -> RunConfig:
    """Read a configuration file; ``None`` gives all defaults."""
    if path is None:
        return RunConfig()
    p = Path(path)
    try:
        text = p.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise ConfigError(f"config file {p} does not exist") from None
    except UnicodeDecodeError:
        raise ConfigError(f"config file {p} is not UTF-8") from None
    return parse_config_text(text, str(p))


def format_config(cfg: RunConfig) -> str:
    """Render a config back to ``key = value`` text; shared keys are written once."""
    seen, lines = set(), []
    for section in SECTIONS:
        obj = getattr(cfg, section)
        for f in fields(obj):
            if f.name in seen:
                continue
            seen.add(f.name)
            v = getattr(obj, f.name)
            if v is None:
                continue
            lines.append(f"{f.name} = {v}")
    return "\n".join(lines) + "\n"
