"""Flat ``key = value`` configuration with dotted, module-namespaced keys.

Example::

    # selection
    selector.kmax = 64
    selector.variant = S2
    stage3.epochs = 5
    bench.Ks = 32, 64, 128
    seed = 7

Every key is checked against the owning dataclass, values are coerced to the
field's type, and each section is built (and thereby validated) before any
command touches data. Errors name the offending key and, for files, the line.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace

from .aggregator import AggConfig
from .bench import BenchConfig
from .encoders import STUDENT_DEFAULT, TEACHER_DEFAULT, EncoderConfig
from .losses import DistillConfig, LossConfig
from .selector import SelectorConfig
from .synth import SynthSpec
from .training import StageConfig


class ConfigError(ValueError):
    pass


SECTIONS = {
    "selector": SelectorConfig,
    "loss": LossConfig,
    "distill": DistillConfig,
    "stage1": StageConfig,
    "stage2": StageConfig,
    "stage3": StageConfig,
    "bench": BenchConfig,
    "synth": SynthSpec,
    "teacher": EncoderConfig,
    "student": EncoderConfig,
    "aggregator": AggConfig,
}
PATH_KEYS = ("bags", "teacher", "student", "checkpoint", "out", "log")
_FIXED = {"stage1": {"stage": 1}, "stage2": {"stage": 2}, "stage3": {"stage": 3},
          "teacher": {"kind": "teacher"}, "student": {"kind": "student"}}


def _defaults() -> dict:
    return {
        "selector": SelectorConfig(),
        "loss": LossConfig(),
        "distill": DistillConfig(),
        "stage1": StageConfig(stage=1, epochs=10, warmup_epochs=0),
        "stage2": StageConfig(stage=2, epochs=10, warmup_epochs=0),
        "stage3": StageConfig(stage=3, epochs=10, warmup_epochs=5),
        "bench": BenchConfig(),
        "synth": SynthSpec(),
        "teacher": TEACHER_DEFAULT,
        "student": STUDENT_DEFAULT,
        "aggregator": AggConfig(),
    }


@dataclass
class GlobalConfig:
    selector: SelectorConfig
    loss: LossConfig
    distill: DistillConfig
    stage1: StageConfig
    stage2: StageConfig
    stage3: StageConfig
    bench: BenchConfig
    synth: SynthSpec
    teacher: EncoderConfig
    student: EncoderConfig
    aggregator: AggConfig
    paths: dict = field(default_factory=dict)
    seed: int = 0

    def section(self, name: str):
        return getattr(self, name)

    def items(self) -> list:
        """Flattened settable (key, value) pairs in a stable order."""
        out = [("seed", self.seed)]
        for name in SECTIONS:
            for f in fields(self.section(name)):
                if f.name in _FIXED.get(name, {}):
                    continue
                out.append((f"{name}.{f.name}", getattr(self.section(name), f.name)))
        out.extend((f"paths.{k}", v) for k, v in sorted(self.paths.items()))
        return out


def _coerce(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            if default and isinstance(default[0], int):
                return tuple(int(s) for s in items)
            return tuple(items)
    except ValueError:
        kind = type(default).__name__
        raise ConfigError(f"{key}: expected {kind}, got {raw!r}") from None
    return raw


def parse_lines(lines, source: str = "<config>") -> list:
    """[(key, raw_value, location)] from ``key = value`` lines."""
    out = []
    for lineno, line in enumerate(lines, 1):
        text = line.split("#", 1)[0].strip()
        if not text:
            continue
        if "=" not in text:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
        key, value = (s.strip() for s in text.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        out.append((key, value, f"{source}:{lineno}"))
    return out


def build(entries, base: GlobalConfig | None = None) -> GlobalConfig:
    """Apply (key, raw, location) entries over the defaults and validate each section."""
    sections = {k: v for k, v in _defaults().items()} if base is None else \
        {k: base.section(k) for k in SECTIONS}
    paths = dict(base.paths) if base else {}
    seed = base.seed if base else 0
    updates: dict = {k: {} for k in SECTIONS}
    for key, raw, where in entries:
        prefix = f"{where}: " if where else ""
        if key == "seed":
            try:
                seed = int(raw)
            except ValueError:
                raise ConfigError(f"{prefix}seed: expected int, got {raw!r}") from None
            continue
        if "." not in key:
            raise ConfigError(f"{prefix}unknown key {key!r} (keys are namespaced, e.g. selector.kmax)")
        name, attr = key.split(".", 1)
        if name == "paths":
            if attr not in PATH_KEYS:
                raise ConfigError(f"{prefix}unknown key {key!r}")
            paths[attr] = raw
            continue
        if name not in SECTIONS:
            raise ConfigError(f"{prefix}unknown section {name!r} in {key!r}")
        known = {f.name for f in fields(SECTIONS[name])}
        if attr not in known or attr in _FIXED.get(name, {}):
            raise ConfigError(f"{prefix}unknown key {key!r}")
        try:
            updates[name][attr] = _coerce(raw, getattr(sections[name], attr), key)
        except ConfigError as exc:
            raise ConfigError(f"{prefix}{exc}") from None
    for name, upd in updates.items():
        if not upd:
            continue
        try:
            sections[name] = replace(sections[name], **upd)
        except (ValueError, TypeError) as exc:
            msg = str(exc)
            raise ConfigError(msg if msg.startswith(f"{name}.") else f"{name}: {msg}") from None
    return GlobalConfig(**sections, paths=paths, seed=seed)


def load(path=None, overrides=(), base: GlobalConfig | None = None) -> GlobalConfig:
    """Config file (optional) then ``key=value`` overrides, in that order."""
    entries = []
    if path is not None:
        try:
            with open(path) as fh:
                entries += parse_lines(fh, str(path))
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for i, item in enumerate(overrides):
        if "=" not in item:
            raise ConfigError(f"--set {item!r}: expected key=value")
        k, v = item.split("=", 1)
        entries.append((k.strip(), v.strip(), f"--set[{i}]"))
    return build(entries, base)


def dump(cfg: GlobalConfig) -> str:
    def fmt(v):
        if isinstance(v, tuple):
            return ", ".join(str(x) for x in v)
        return str(v)

    return "".join(f"{k} = {fmt(v)}\n" for k, v in cfg.items())


def with_seed(cfg: GlobalConfig, seed: int) -> GlobalConfig:
    """Thread one seed into every stochastic section."""
    out = dataclasses.replace(cfg, seed=seed)
    for name in ("stage1", "stage2", "stage3", "bench", "synth"):
        setattr(out, name, replace(out.section(name), seed=seed))
    return out
