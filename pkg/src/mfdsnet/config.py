"""Run configuration as flat ``section.key = value`` text.

Example::

    # comments start with '#'
    train.epochs = 5
    train.learning_rate = 0.001
    synth.size = 64
    model.grids = 1,2,4,8
"""
import typing
from dataclasses import asdict, dataclass, field, fields, replace

from .datakit import SynthConfig
from .losses import SupervisionConfig
from .network import ModelConfig


@dataclass
class EvalConfig:
    threshold: float = 0.5
    batch_size: int = 4


@dataclass
class PathConfig:
    data: str = "data"
    out: str = "runs"
    split_train: str = "train"
    split_val: str = "val"
    split_test: str = "test"


@dataclass
class RunConfig:
    train: SupervisionConfig = field(default_factory=SupervisionConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathConfig = field(default_factory=PathConfig)

    def to_text(self) -> str:
        lines = []
        for sec in fields(self):
            for key, value in asdict(getattr(self, sec.name)).items():
                lines.append(f"{sec.name}.{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def with_overrides(self, overrides: dict) -> "RunConfig":
        """Return a copy with ``{"section.key": raw_string_or_value}`` applied."""
        sections = {sec.name: getattr(self, sec.name) for sec in fields(self)}
        pending = {}
        for dotted, raw in overrides.items():
            if "." not in dotted:
                raise KeyError(f"config key '{dotted}' needs a section prefix (e.g. train.{dotted})")
            sec, key = dotted.split(".", 1)
            if sec not in sections:
                raise KeyError(f"unknown config section '{sec}'")
            types = typing.get_type_hints(type(sections[sec]))
            if key not in types:
                raise KeyError(f"unknown config key '{dotted}'")
            pending.setdefault(sec, {})[key] = _parse(raw, types[key]) if isinstance(raw, str) else raw
        new = {name: replace(obj, **pending.get(name, {})) for name, obj in sections.items()}
        return RunConfig(**new)


def _format(value):
    if isinstance(value, (list, tuple)):
        return ",".join(str(v) for v in value)
    return str(value)


def _parse(raw: str, tp):
    raw = raw.strip()
    origin = typing.get_origin(tp)
    if origin is tuple or tp is tuple:
        args = typing.get_args(tp)
        elem = args[0] if args else str
        parts = [p.strip() for p in raw.split(",") if p.strip()]
        return tuple(_parse(p, elem) for p in parts)
    if origin is typing.Union:
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _parse(raw, args[0])
    if tp is bool:
        if raw.lower() in ("1", "true", "yes", "on"):
            return True
        if raw.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if tp is int:
        return int(raw)
    if tp is float:
        return float(raw)
    return raw


def parse_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'section.key = value', got {line!r}")
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def load_config(path=None, overrides=None) -> RunConfig:
    cfg = RunConfig()
    if path:
        with open(path) as fh:
            cfg = cfg.with_overrides(parse_text(fh.read()))
    if overrides:
        cfg = cfg.with_overrides(overrides)
    return cfg
