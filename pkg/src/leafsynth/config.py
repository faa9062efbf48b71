"""Pipeline configuration: built-in defaults < TOML file < ``L2L_*`` env vars < CLI overrides.

Unknown sections or keys are rejected. A section's ``seed`` that is not set
explicitly is derived from the root ``seed`` and the section name.
"""

from __future__ import annotations

import dataclasses
import os
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from ._util import derive_seed
from .anomaly import AEConfig
from .dataset import Mode
from .pix2pix import TranslatorConfig
from .resvae import VAEConfig

ENV_PREFIX = "L2L_"


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    size: int = 256
    mode: str = "RGB"
    augment_factor: int = 3
    hot_pixel_k: float = 1.5
    seed: int = 0

    def __post_init__(self) -> None:
        self.mode = Mode(self.mode).value
        if self.size <= 0 or self.size & (self.size - 1):
            raise ValueError("size must be a positive power of two")
        if self.augment_factor < 1:
            raise ValueError("augment_factor must be >= 1")
        if not self.hot_pixel_k > 1:
            raise ValueError("hot_pixel_k must exceed 1")


@dataclass
class GenerateConfig:
    threshold: float = 0.5
    refine: bool = True
    refine_colorized: bool = False
    dropout: bool = True
    background_threshold: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0 < self.threshold < 1:
            raise ValueError("threshold must lie in (0, 1)")


SECTIONS: dict[str, type] = {
    "dataset": DatasetConfig,
    "vae": VAEConfig,
    "translator": TranslatorConfig,
    "eval": AEConfig,
    "generate": GenerateConfig,
}


@dataclass
class PipelineConfig:
    seed: int = 0
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    vae: VAEConfig = field(default_factory=VAEConfig)
    translator: TranslatorConfig = field(default_factory=TranslatorConfig)
    eval: AEConfig = field(default_factory=AEConfig)
    generate: GenerateConfig = field(default_factory=GenerateConfig)

    def to_dict(self) -> dict[str, Any]:
        out: dict[str, Any] = {"seed": self.seed}
        for name in SECTIONS:
            d = dataclasses.asdict(getattr(self, name))
            out[name] = {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
        return out


def _field_types(cls: type) -> dict[str, Any]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def _coerce(value: Any, tp: Any, where: str) -> Any:
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin is typing.Union or (sys.version_info >= (3, 10) and origin is __import__("types").UnionType):
        if value is None or (isinstance(value, str) and value.lower() in ("none", "null", "")):
            return None
        inner = [a for a in args if a is not type(None)][0]
        return _coerce(value, inner, where)
    try:
        if tp is bool:
            if isinstance(value, bool):
                return value
            if isinstance(value, str) and value.lower() in ("true", "1", "yes", "on", "false", "0", "no", "off"):
                return value.lower() in ("true", "1", "yes", "on")
            raise ValueError(f"not a boolean: {value!r}")
        if tp is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if tp is float:
            if isinstance(value, bool):
                raise ValueError(f"not a number: {value!r}")
            return float(value)
        if tp is str:
            if not isinstance(value, str):
                raise ValueError(f"not a string: {value!r}")
            return value
        if origin is tuple:
            items = value.split(",") if isinstance(value, str) else list(value)
            if len(items) != len(args):
                raise ValueError(f"expected {len(args)} values, got {len(items)}")
            return tuple(_coerce(v, a, where) for v, a in zip(items, args))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from None
    raise ConfigError(f"{where}: unsupported field type {tp}")


def _merge(layers: list[tuple[str, Mapping[str, Any]]]) -> tuple[dict[str, Any], set[str]]:
    """Fold override layers into one nested dict, validating every key path."""
    merged: dict[str, Any] = {"seed": 0, **{s: {} for s in SECTIONS}}
    explicit: set[str] = set()
    for origin, layer in layers:
        for key, value in layer.items():
            if key == "seed":
                merged["seed"] = _coerce(value, int, f"{origin}: seed")
                explicit.add("seed")
                continue
            if key not in SECTIONS:
                raise ConfigError(f"{origin}: unknown key {key!r}")
            if not isinstance(value, Mapping):
                raise ConfigError(f"{origin}: {key!r} must be a section table")
            types = _field_types(SECTIONS[key])
            for sub, v in value.items():
                if sub not in types:
                    raise ConfigError(f"{origin}: unknown key '{key}.{sub}'")
                merged[key][sub] = _coerce(v, types[sub], f"{origin}: {key}.{sub}")
                explicit.add(f"{key}.{sub}")
    return merged, explicit


def parse_override(text: str) -> tuple[str, str]:
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like section.key=value")
    key, value = text.split("=", 1)
    return key.strip(), value.strip()


def _nest(pairs: list[tuple[str, str]], origin: str) -> dict[str, Any]:
    out: dict[str, Any] = {}
    for key, value in pairs:
        if key == "seed":
            out["seed"] = value
            continue
        if "." not in key:
            raise ConfigError(f"{origin}: unknown key {key!r}")
        section, sub = key.split(".", 1)
        out.setdefault(section, {})[sub] = value
    return out


def env_overrides(environ: Mapping[str, str] | None = None) -> list[tuple[str, str]]:
    """``L2L_SEED=3`` → seed; ``L2L_VAE_BETA=10`` → vae.beta."""
    environ = os.environ if environ is None else environ
    pairs = []
    for name, value in sorted(environ.items()):
        if not name.startswith(ENV_PREFIX):
            continue
        rest = name[len(ENV_PREFIX):].lower()
        if rest == "seed":
            pairs.append(("seed", value))
            continue
        section, _, key = rest.partition("_")
        if not key:
            raise ConfigError(f"environment: cannot map {name} to a config key")
        pairs.append((f"{section}.{key}", value))
    return pairs


def build_config(merged: dict[str, Any], explicit: set[str]) -> PipelineConfig:
    root = merged["seed"]
    sections = {}
    for name, cls in SECTIONS.items():
        values = dict(merged[name])
        if f"{name}.seed" not in explicit:
            values["seed"] = derive_seed(root, name)
        try:
            sections[name] = cls(**values)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"{name}: {exc}") from None
    return PipelineConfig(seed=root, **sections)


def load_config(path: str | Path | None = None, overrides: list[str] | None = None,
                environ: Mapping[str, str] | None = None) -> PipelineConfig:
    layers: list[tuple[str, Mapping[str, Any]]] = []
    if path is not None:
        path = Path(path)
        try:
            with open(path, "rb") as fh:
                layers.append((str(path), tomllib.load(fh)))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: parse error: {exc}") from None
        except OSError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    layers.append(("environment", _nest(env_overrides(environ), "environment")))
    layers.append(("command line", _nest([parse_override(o) for o in overrides or []], "command line")))
    return build_config(*_merge(layers))
