"""Plain-text run configuration.

One ``section.key = value`` per line, sections ``synth``, ``train`` and
``eval``; ``#`` starts a comment. Tuples are comma separated. Unknown keys and
unparsable values are errors, never warnings::

    synth.M = 200
    train.k = 4
    train.lr_decay_iters = 2000, 3000
    train.disable_reweighting = false
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path

from .evaluation import EvalConfig
from .synth import SynthConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    synth: SynthConfig = field(default_factory=SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def as_dict(self) -> dict:
        return {name: dataclasses.asdict(getattr(self, name)) for name in ("synth", "train", "eval")}

    def to_text(self) -> str:
        lines = []
        for section, values in self.as_dict().items():
            for key, value in values.items():
                lines.append(f"{section}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, synth=replace(self.synth, seed=seed), train=replace(self.train, seed=seed))

    def errors(self) -> list[str]:
        out = [f"synth.{e}" for e in self.synth.errors()]
        out += [f"train.{e}" for e in self.train.errors()]
        if self.eval.n_max < 2:
            out.append("eval.n_max must be >= 2")
        if self.eval.queries_per_probe < 1:
            out.append("eval.queries_per_probe must be >= 1")
        return out


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def _coerce(key: str, text: str, default):
    try:
        if isinstance(default, bool):
            lowered = text.lower()
            if lowered not in ("true", "false"):
                raise ValueError("expected true or false")
            return lowered == "true"
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(int(p) for p in text.split(",") if p.strip())
        return text
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} ({exc})") from None


def parse_config(text: str, base: RunConfig | None = None) -> RunConfig:
    base = base or RunConfig()
    updates: dict[str, dict] = {"synth": {}, "train": {}, "eval": {}}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (p.strip() for p in line.split("=", 1))
        section, _, name = key.partition(".")
        if section not in updates or not name:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        current = getattr(base, section)
        if name not in {f.name for f in dataclasses.fields(current)}:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if name in updates[section]:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        updates[section][name] = _coerce(key, value, getattr(current, name))
    config = RunConfig(**{s: replace(getattr(base, s), **u) for s, u in updates.items()})
    errors = config.errors()
    if errors:
        raise ConfigError("; ".join(errors))
    return config


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    return parse_config(Path(path).read_text())
