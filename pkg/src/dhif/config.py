"""Plain-text configuration: one ``section.key = value`` per line, ``#`` comments.

Sections are ``data``, ``scene``, ``train``, ``metrics`` and ``bench``.
Unknown sections or keys are rejected with the offending name in the
message, and :func:`render` output parses back to an equal config.
"""
from __future__ import annotations

from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .synth import SceneSpec
from .train import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 200
    n_test: int = 100
    seed: int = 2024


@dataclass
class MetricsConfig:
    threshold: float = 0.5
    match_distance: float = 3.0
    noise_p: float = 0.02


@dataclass
class BenchConfig:
    batch: int = 16
    height: int = 64
    width: int = 64
    channels: int = 16
    kernel_size: int = 3
    repeats: int = 5


# keys owned elsewhere are hidden from the section that also carries them
HIDDEN = {"scene": {"seed"}, "train": {"threshold", "match_distance"}}


@dataclass
class Config:
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def train_config(self) -> TrainConfig:
        return replace(self.train, threshold=self.metrics.threshold,
                       match_distance=self.metrics.match_distance)

    def validate(self) -> None:
        try:
            self.scene.validate()
            self.train_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.data.n_train < 1 or self.data.n_test < 1:
            raise ConfigError("data.n_train and data.n_test must be >= 1")
        if not 0.0 <= self.metrics.threshold <= 1.0:
            raise ConfigError("metrics.threshold must lie in [0, 1]")
        b = self.bench
        for key in ("batch", "height", "width", "channels", "kernel_size", "repeats"):
            if getattr(b, key) < 1:
                raise ConfigError(f"bench.{key} must be >= 1")


SECTIONS = tuple(f.name for f in fields(Config))


def _keys(section: str, obj) -> dict:
    hidden = HIDDEN.get(section, set())
    return {f.name: f for f in fields(obj) if f.name not in hidden}


def _format(value) -> str:
    if isinstance(value, frozenset):
        return ",".join(str(v) for v in sorted(value)) or "none"
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(text: str, default, key: str):
    try:
        if isinstance(default, bool):
            if text.lower() not in ("true", "false"):
                raise ValueError("expected true or false")
            return text.lower() == "true"
        if isinstance(default, frozenset):
            if text.lower() in ("none", ""):
                return frozenset()
            return frozenset(int(v) for v in text.split(","))
        if isinstance(default, tuple):
            kind = type(default[0]) if default else float
            return tuple(kind(v) for v in text.split(","))
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None


def parse(text: str, base: Config | None = None) -> Config:
    cfg = base if base is not None else Config()
    cfg = Config(**{s: replace(getattr(cfg, s)) for s in SECTIONS})
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        name, eq, value = line.partition("=")
        name, value = name.strip(), value.strip()
        if not eq or "." not in name:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        section, key = name.split(".", 1)
        if section not in SECTIONS:
            raise ConfigError(f"line {lineno}: unknown section {section!r} in {name}")
        obj = getattr(cfg, section)
        if key not in _keys(section, obj):
            raise ConfigError(f"line {lineno}: unknown key {name}")
        setattr(obj, key, _parse(value, getattr(obj, key), name))
    for s in SECTIONS:
        obj = getattr(cfg, s)
        if hasattr(obj, "__post_init__"):
            obj.__post_init__()
    return cfg


def render(cfg: Config) -> str:
    lines = []
    for s in SECTIONS:
        obj = getattr(cfg, s)
        for key in _keys(s, obj):
            lines.append(f"{s}.{key} = {_format(getattr(obj, key))}")
        lines.append("")
    return "\n".join(lines)


def load(path) -> Config:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"{p}: cannot read config ({exc.strerror or exc})") from None
    cfg = parse(text)
    cfg.validate()
    return cfg
