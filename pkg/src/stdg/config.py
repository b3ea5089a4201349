"""Run configuration: one YAML document, strict keys, every key defaulted.

Sections and their keys mirror the dataclasses they build:

``seed``, ``out``, ``threads``
    global seed, output directory, worker threads (``None`` = leave alone)
``data``
    ``n_train``, ``n_test`` for generated data; ``manifest`` to read a saved
    or external dataset instead
``scene``
    :class:`stdg.scenes.generate.SceneConfig`
``camera``
    ``focal_px``, ``cx``, ``cy``; ``null`` derives the camera from ``scene``
``hha``
    :class:`stdg.hha.HhaParams`
``network``
    :class:`stdg.model.NetworkConfig`
``regime`` / ``teacher_regime``
    :class:`stdg.model.Regime`; ``teacher_regime: null`` reuses ``regime``
``plan``
    :class:`stdg.teach.TeachingPlan`
``eval``
    :class:`stdg.eval.DecodeOptions` plus ``ks`` and ``tasks``
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .eval import KS, TASKS, DecodeOptions
from .hha import CameraModel, HhaParams
from .model import NetworkConfig, Regime
from .scenes.generate import SceneConfig
from .teach import TeachingPlan


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    n_train: int = 500
    n_test: int = 100
    manifest: str | None = None


@dataclass
class EvalConfig:
    ks: tuple[int, ...] = KS
    tasks: tuple[str, ...] = tuple(t.value for t in TASKS)
    decode: DecodeOptions = field(default_factory=DecodeOptions)


EXECUTION_KEYS = ("out", "threads")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    threads: int | None = None
    data: DataConfig = field(default_factory=DataConfig)
    scene: SceneConfig = field(default_factory=SceneConfig)
    camera: CameraModel | None = None
    hha: HhaParams = field(default_factory=HhaParams)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    regime: Regime = field(default_factory=Regime)
    teacher_regime: Regime | None = None
    plan: TeachingPlan = field(default_factory=TeachingPlan)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def __post_init__(self):
        if self.scene.num_classes != self.network.num_classes or self.scene.num_predicates != self.network.num_predicates:
            raise ConfigError(
                f"scene vocabulary ({self.scene.num_classes} classes, {self.scene.num_predicates} predicates) does not match "
                f"network ({self.network.num_classes}, {self.network.num_predicates})"
            )
        if self.scene.stride != self.network.stride:
            raise ConfigError(f"scene stride {self.scene.stride} differs from network stride {self.network.stride}")

    def camera_model(self) -> CameraModel:
        return self.camera or self.scene.camera()

    def effective_teacher_regime(self) -> Regime:
        return self.teacher_regime or self.regime

    def to_dict(self) -> dict:
        return _plain(dataclasses.asdict(self))

    def content_dict(self) -> dict:
        """Everything that can change a result; where it runs and on how many threads cannot."""
        return {k: v for k, v in self.to_dict().items() if k not in EXECUTION_KEYS}

    def config_hash(self) -> str:
        blob = json.dumps(self.content_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def dumps(self, full: bool = False) -> str:
        return yaml.safe_dump(self.to_dict() if full else self.content_dict(), sort_keys=True)


def _plain(x):
    if isinstance(x, dict):
        return {k: _plain(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_plain(v) for v in x]
    return x


def _tupled(value, default):
    """Lists from YAML become tuples wherever the default is a tuple (recursively)."""
    if isinstance(value, list) and isinstance(default, tuple):
        inner = default[0] if default else None
        return tuple(_tupled(v, inner) if isinstance(inner, tuple) or isinstance(v, list) else v for v in value)
    return value


def _build(cls, raw: Any, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected a mapping, got {type(raw).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - set(fields))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}; allowed: {', '.join(fields)}")
    proto = cls()
    kwargs = {}
    for k, v in raw.items():
        default = getattr(proto, k)
        if dataclasses.is_dataclass(default):
            kwargs[k] = _build(type(default), v, f"{where}.{k}")
        else:
            kwargs[k] = _tupled(v, default) if not (k == "embargo" and isinstance(v, list)) else tuple(tuple(t) for t in v)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"{where}: {err}") from err


_SECTIONS = {
    "data": DataConfig,
    "scene": SceneConfig,
    "hha": HhaParams,
    "network": NetworkConfig,
    "regime": Regime,
    "plan": TeachingPlan,
    "eval": EvalConfig,
}
_OPTIONAL = {"camera": CameraModel, "teacher_regime": Regime}
_SCALARS = {"seed": int, "out": str, "threads": (int, type(None))}


def config_from_dict(raw: dict | None) -> RunConfig:
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a mapping")
    allowed = set(_SECTIONS) | set(_OPTIONAL) | set(_SCALARS)
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level key(s) {', '.join(unknown)}; allowed: {', '.join(sorted(allowed))}")
    kwargs: dict[str, Any] = {}
    for k, typ in _SCALARS.items():
        if k in raw:
            if not isinstance(raw[k], typ) or isinstance(raw[k], bool):
                raise ConfigError(f"{k}: wrong type {type(raw[k]).__name__}")
            kwargs[k] = raw[k]
    for k, cls in _SECTIONS.items():
        if k in raw:
            kwargs[k] = _build(cls, raw[k], k)
    for k, cls in _OPTIONAL.items():
        if raw.get(k) is not None:
            if k == "camera":
                c = raw[k]
                if not isinstance(c, dict) or set(c) != {"focal_px", "cx", "cy"}:
                    raise ConfigError("camera: needs exactly focal_px, cx, cy")
                try:
                    kwargs[k] = CameraModel(float(c["focal_px"]), float(c["cx"]), float(c["cy"]))
                except ValueError as err:
                    raise ConfigError(f"camera: {err}") from err
            else:
                kwargs[k] = _build(cls, raw[k], k)
    try:
        return RunConfig(**kwargs)
    except ValueError as err:
        raise ConfigError(str(err)) from err


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        raw = yaml.safe_load(Path(path).read_text())
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    except yaml.YAMLError as err:
        raise ConfigError(f"invalid YAML in {path}: {err}") from err
    return config_from_dict(raw)
