"""Plain ``key = value`` run configuration with dotted section prefixes.

Example::

    seed = 3
    data.n_train = 100
    augment.d_min = 0.2
    run.source_domains = 0,1,2,3

Blank lines and ``#`` comments are ignored. Every key has a default; unknown
keys are rejected.
"""
from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .augment import AugmentationConfig
from .connectivity import ConnectivityConfig
from .data import DomainShiftSpec
from .models import ModelSpec
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; the CLI maps it to exit code 2."""


@dataclass(frozen=True)
class ModelOptions:
    kind: str = "tiny_cnn"
    hidden: tuple[int, ...] = (8, 16)
    input_offset: float = 0.5


@dataclass(frozen=True)
class RunOptions:
    source_domains: tuple[int, ...] = (0, 1, 2, 3)
    target_domains: tuple[int, ...] = (4, 5)
    # seed of the generated dataset, independent of the training seed
    data_seed: int = 0
    ablation_seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    report_seeds: tuple[int, ...] = (0, 1, 2)
    preview_pairs: int = 4


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    out: str = "runs"
    data: DomainShiftSpec = field(default_factory=DomainShiftSpec)
    model: ModelOptions = field(default_factory=ModelOptions)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    connectivity: ConnectivityConfig = field(default_factory=ConnectivityConfig)
    run: RunOptions = field(default_factory=RunOptions)

    def train_config(self, seed: int | None = None) -> TrainConfig:
        return replace(self.train, augment=self.augment, seed=self.seed if seed is None else seed)

    def model_spec(self) -> ModelSpec:
        d = self.data
        return ModelSpec(self.model.kind, (d.channels, d.image_size, d.image_size), d.num_classes,
                         self.model.hidden, self.model.input_offset)


SECTIONS = ("data", "model", "augment", "train", "connectivity", "run")
TOP_LEVEL = ("seed", "out")
# owned elsewhere in RunConfig, so not settable under the train section
_SKIP = {("train", "augment"), ("train", "seed")}


def _section_fields(name: str):
    cls = typing.get_type_hints(RunConfig)[name]
    hints = typing.get_type_hints(cls)
    return cls, [(f.name, hints[f.name]) for f in fields(cls) if (name, f.name) not in _SKIP]


def _expected(tp) -> str:
    if tp is bool:
        return "true or false"
    if tp is int:
        return "an integer"
    if tp is float:
        return "a number"
    if tp is str:
        return "a string"
    origin = typing.get_origin(tp)
    if origin is tuple:
        return "comma-separated integers (e.g. 0,1,2)"
    if origin in (typing.Union, types.UnionType):
        return "a number or none"
    return str(tp)


def _parse_value(text: str, tp):
    origin = typing.get_origin(tp)
    if tp is bool:
        low = text.lower()
        if low not in ("true", "false"):
            raise ValueError(text)
        return low == "true"
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    if origin is tuple:
        return tuple(int(t) for t in text.split(",") if t.strip()) if text.strip() else ()
    # float | None
    if text.lower() == "none":
        return None
    return float(text)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _key_types() -> dict[str, object]:
    hints = typing.get_type_hints(RunConfig)
    out = {k: hints[k] for k in TOP_LEVEL}
    for sec in SECTIONS:
        for name, tp in _section_fields(sec)[1]:
            out[f"{sec}.{name}"] = tp
    return out


def parse_config_text(text: str, source: str = "<config>") -> RunConfig:
    key_types = _key_types()
    values: dict[str, object] = {}
    lines: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        if key not in key_types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}; expected one of section.key with "
                              f"sections {', '.join(SECTIONS)} or a top-level key ({', '.join(TOP_LEVEL)})")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: key {key!r} already set on line {lines[key]}")
        try:
            values[key] = _parse_value(val, key_types[key])
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: {key} = {val!r} is invalid; expected {_expected(key_types[key])}") from None
        lines[key] = lineno
    return build_config(values, lines, source)


def _where(key: str, lines: dict[str, int], source: str) -> str:
    return f"{source}:{lines[key]}" if key in lines else f"{source} (default)"


def build_config(values: dict[str, object], lines: dict[str, int] | None = None, source: str = "<config>") -> RunConfig:
    """Apply ``values`` over the defaults and validate cross-field rules."""
    lines = lines or {}
    d_min = values.get("augment.d_min", AugmentationConfig.d_min)
    d_max = values.get("augment.d_max", AugmentationConfig.d_max)
    if d_min > d_max:
        raise ConfigError(f"augment.d_min = {d_min} ({_where('augment.d_min', lines, source)}) exceeds "
                          f"augment.d_max = {d_max} ({_where('augment.d_max', lines, source)}); need d_min <= d_max")
    src = values.get("run.source_domains", RunOptions.source_domains)
    tgt = values.get("run.target_domains", RunOptions.target_domains)
    if set(src) & set(tgt):
        raise ConfigError(f"run.source_domains {src} and run.target_domains {tgt} overlap; they must be disjoint")
    if not src or not tgt:
        raise ConfigError("run.source_domains and run.target_domains must each list at least one domain")
    kwargs: dict[str, object] = {k: values[k] for k in TOP_LEVEL if k in values}
    for sec in SECTIONS:
        cls, _ = _section_fields(sec)
        sec_vals = {k.split(".", 1)[1]: v for k, v in values.items() if k.startswith(sec + ".")}
        try:
            kwargs[sec] = cls(**sec_vals)
        except ValueError as exc:
            keys = ", ".join(f"{sec}.{k} ({_where(f'{sec}.{k}', lines, source)})" for k in sec_vals) or "defaults"
            raise ConfigError(f"invalid {sec} section [{keys}]: {exc}") from None
    cfg = RunConfig(**kwargs)
    try:
        cfg.model_spec()
    except ValueError as exc:
        raise ConfigError(f"invalid model section: {exc}") from None
    return cfg


def parse_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from None
    return parse_config_text(text, str(path))


def serialize_config(cfg: RunConfig) -> str:
    """Every key, one per line, in a fixed order; floats use ``repr`` so parsing is exact."""
    out = [f"{k} = {_format_value(getattr(cfg, k))}" for k in TOP_LEVEL]
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        for name, _ in _section_fields(sec)[1]:
            out.append(f"{sec}.{name} = {_format_value(getattr(obj, name))}")
    return "\n".join(out) + "\n"


def config_hash(cfg: RunConfig) -> str:
    """Hash of everything that affects results; the output directory is left out."""
    text = serialize_config(replace(cfg, out=""))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


def override(cfg: RunConfig, **top) -> RunConfig:
    return dataclasses.replace(cfg, **{k: v for k, v in top.items() if v is not None})
