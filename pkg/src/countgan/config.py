"""Flat ``key = value`` run configuration shared by every CLI command.

Keys are ``section.field`` where the section maps onto one config dataclass
(``train.epochs``, ``mnist.max_count``...) plus a few top-level keys. Values
are parsed according to the dataclass field type; tuples are comma separated
and ``none`` stands for a missing optional value.
"""

from __future__ import annotations

import dataclasses
import hashlib
import types
import typing
from pathlib import Path
from typing import Any, Iterable

from .datasets.core import atomic_write_text
from .datasets.crops import CropSpec
from .datasets.synth import MultiMnistSpec, ShapeCountSpec
from .errors import InvalidConfig
from .experiments import AugmentationDesign
from .training import PredictorConfig, TrainConfig

CONFIG_NAME = "run.cfg"


@dataclasses.dataclass
class GlobalOptions:
    seed: int = 0
    output_dir: str = ""


@dataclasses.dataclass
class DataOptions:
    glyphs: str = "data/mnist5k"
    annotations: str = ""
    images: str = ""


@dataclasses.dataclass
class SplitOptions:
    exclusions: str = ""
    mode: str = "interpolation"


@dataclasses.dataclass
class EvalOptions:
    samples_per_count: int = 100
    seed: int = 0
    fid: bool = True


@dataclasses.dataclass
class ExperimentOptions:
    seeds: tuple[int, ...] = (0, 1, 2)
    validation_fraction: float = 0.1
    ablation_axes: tuple[str, ...] = ("count_loss",)


SECTIONS: dict[str, type] = {
    "": GlobalOptions,
    "data": DataOptions,
    "mnist": MultiMnistSpec,
    "shapes": ShapeCountSpec,
    "crop": CropSpec,
    "split": SplitOptions,
    "train": TrainConfig,
    "predictor": PredictorConfig,
    "eval": EvalOptions,
    "experiment": ExperimentOptions,
    "augment": AugmentationDesign,
}
# dataclass seed fields come from the single top-level seed
_SEEDED = {"mnist", "shapes", "crop", "train", "predictor"}


def _field_types(cls) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _allowed_keys() -> dict[str, Any]:
    keys = {}
    for section, cls in SECTIONS.items():
        for name, tp in _field_types(cls).items():
            if section in _SEEDED and name == "seed":
                continue
            keys[f"{section}.{name}" if section else name] = tp
    return keys


ALLOWED = _allowed_keys()


def _parse_scalar(text: str, tp) -> Any:
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    if tp is str:
        return text
    raise ValueError(f"unsupported type {tp}")


def parse_value(text: str, tp) -> Any:
    text = text.strip()
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if text.lower() == "none":
            return None
        return parse_value(text, args[0])
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if len(args) == 2 and args[1] is Ellipsis:
            return tuple(_parse_scalar(p, args[0]) for p in parts)
        if len(parts) == 1 and len(args) > 1:
            parts = parts * len(args)
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(_parse_scalar(p, a) for p, a in zip(parts, args))
    return _parse_scalar(text, tp)


def format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    return str(value)


class RunConfig:
    """Validated key/value settings; unset keys fall back to dataclass defaults."""

    def __init__(self, values: dict[str, Any] | None = None):
        self.values: dict[str, Any] = {}
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key: str, value) -> None:
        if key not in ALLOWED:
            raise InvalidConfig(f"unknown config key {key!r}")
        if isinstance(value, str):
            try:
                value = parse_value(value, ALLOWED[key])
            except ValueError as e:
                raise InvalidConfig(f"bad value for {key}: {e}") from None
        self.values[key] = value

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        cfg = cls()
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise InvalidConfig(f"line {lineno}: expected key = value, got {raw!r}")
            key, value = (s.strip() for s in line.split("=", 1))
            cfg.set(key, value)
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise InvalidConfig(f"cannot read config {path}: {e}") from None
        return cls.from_text(text)

    def override(self, assignments: Iterable[str]) -> "RunConfig":
        out = RunConfig(dict(self.values))
        for a in assignments:
            if "=" not in a:
                raise InvalidConfig(f"override must look like key=value, got {a!r}")
            k, v = a.split("=", 1)
            out.set(k.strip(), v)
        return out

    def get(self, key: str):
        if key not in ALLOWED:
            raise InvalidConfig(f"unknown config key {key!r}")
        if key in self.values:
            return self.values[key]
        section, _, name = key.rpartition(".")
        f = {f.name: f for f in dataclasses.fields(SECTIONS[section])}[name]
        return f.default if f.default is not dataclasses.MISSING else f.default_factory()

    @property
    def seed(self) -> int:
        return int(self.get("seed"))

    def section(self, name: str):
        """Build the dataclass for ``name`` from explicit values over defaults."""
        cls = SECTIONS[name]
        kwargs = {k.split(".", 1)[1]: v for k, v in self.values.items()
                  if k.startswith(name + ".")}
        if name in _SEEDED:
            kwargs["seed"] = self.seed
        try:
            return cls(**kwargs)
        except (TypeError, ValueError) as e:
            raise InvalidConfig(f"invalid [{name}] settings: {e}") from None

    def resolved(self, sections: Iterable[str]) -> dict[str, str]:
        """Every key of the given sections (plus top-level keys) with its effective value."""
        wanted = {""} | set(sections)
        out = {}
        for key in ALLOWED:
            section = key.rpartition(".")[0]
            if section in wanted:
                out[key] = format_value(self.get(key))
        return out

    def to_text(self, sections: Iterable[str] = tuple(SECTIONS)) -> str:
        items = self.resolved(sections)
        return "".join(f"{k} = {v}\n" for k, v in sorted(items.items()))

    def hash(self, sections: Iterable[str] = tuple(SECTIONS)) -> str:
        items = {k: v for k, v in self.resolved(sections).items() if k != "output_dir"}
        blob = "".join(f"{k}={v}\n" for k, v in sorted(items.items()))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def write(self, out_dir, sections: Iterable[str] = tuple(SECTIONS)) -> Path:
        sections = tuple(sections)
        path = Path(out_dir) / CONFIG_NAME
        text = f"# config_hash = {self.hash(sections)}\n" + self.to_text(sections)
        atomic_write_text(path, text)
        return path


def parse_exclusions(text: str) -> list[tuple[int, int]]:
    """``"3:1;2:2"`` -> ``[(3, 1), (2, 2)]``."""
    out = []
    for part in text.replace(" ", "").split(";"):
        if not part:
            continue
        try:
            k, v = part.split(":")
            out.append((int(k), int(v)))
        except ValueError:
            raise InvalidConfig(f"bad exclusion {part!r}; expected class:count") from None
    return out


__all__ = ["RunConfig", "CONFIG_NAME", "SECTIONS", "ALLOWED", "parse_value", "format_value",
           "parse_exclusions"]
