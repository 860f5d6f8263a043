"""Experiment manifests: a TOML file with ``[config]``, ``[data]`` and
``[model]`` sections that fully determines a run.

Every key is optional; an empty file is a valid manifest describing the
default synthetic experiment. Unknown keys and ill-typed values are rejected
with the dotted key name in the error.
"""
from __future__ import annotations

import os
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np
import tomli_w

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .adapt import AdaptationConfig, ConfigError
from .data import (DomainDataset, balance_source, load_idx, load_rudx, make_synthetic_pair,
                   resample_linear_decay, subset_partial)
from .nets import ClassifierSpec, DiscriminatorSpec, EncoderSpec

DATA_DIR_ENV = "RUDA_DATA_DIR"
DATA_KINDS = ("synthetic", "idx", "rudx")


@dataclass
class DataSpec:
    kind: str = "synthetic"
    # synthetic pair
    num_classes: int = 5
    per_class: int = 200
    dim: int = 2
    shift: list = field(default_factory=lambda: [3.0, 0.0])
    rotation: float = 0.4
    noise_sd: float = 0.5
    radius: float = 4.0
    seed: int = 0
    # idx / rudx files (relative paths resolve against $RUDA_DATA_DIR)
    source_images: str = ""
    source_labels: str = ""
    target_images: str = ""
    target_labels: str = ""
    source_path: str = ""
    target_path: str = ""
    source_limit: int = 0
    target_limit: int = 0
    # label-distribution shaping, applied after loading
    target_decay_start: float = 1.0
    target_decay_end: float = 1.0
    target_classes: list = field(default_factory=list)
    balance_source: bool = False

    def validate(self):
        if self.kind not in DATA_KINDS:
            raise ConfigError("data.kind", f"must be one of {DATA_KINDS}, got {self.kind!r}")
        if self.kind == "synthetic":
            if self.num_classes < 2:
                raise ConfigError("data.num_classes", "must be >= 2")
            if self.per_class < 1:
                raise ConfigError("data.per_class", "must be >= 1")
            if self.dim < 2:
                raise ConfigError("data.dim", "must be >= 2")
            if len(self.shift) not in (2, self.dim):
                raise ConfigError("data.shift", f"must have 2 or {self.dim} entries")
            if self.noise_sd < 0:
                raise ConfigError("data.noise_sd", "must be nonnegative")
        if self.kind == "idx":
            for key in ("source_images", "source_labels", "target_images", "target_labels"):
                if not getattr(self, key):
                    raise ConfigError(f"data.{key}", "required for idx data")
        if self.kind == "rudx":
            for key in ("source_path", "target_path"):
                if not getattr(self, key):
                    raise ConfigError(f"data.{key}", "required for rudx data")
        for key in ("source_limit", "target_limit", "seed"):
            if getattr(self, key) < 0:
                raise ConfigError(f"data.{key}", "must be nonnegative")
        if not 0 < self.target_decay_end <= self.target_decay_start <= 1:
            raise ConfigError("data.target_decay_end", "need 0 < end <= start <= 1")
        if any(c < 0 for c in self.target_classes):
            raise ConfigError("data.target_classes", "class indices must be nonnegative")


@dataclass
class ModelSpec:
    encoder: str = "mlp"
    feature_dim: int = 500
    hidden_sizes: list = field(default_factory=lambda: [64, 64])
    discriminator_hidden: list = field(default_factory=lambda: [500, 500])
    seed: int = 0

    def validate(self):
        if self.encoder not in ("mlp", "conv_lenet"):
            raise ConfigError("model.encoder", f"must be 'mlp' or 'conv_lenet', got {self.encoder!r}")
        if self.feature_dim < 2:
            raise ConfigError("model.feature_dim", "must be >= 2")
        for key in ("hidden_sizes", "discriminator_hidden"):
            if any(h < 1 for h in getattr(self, key)):
                raise ConfigError(f"model.{key}", "layer sizes must be positive")
        if self.seed < 0:
            raise ConfigError("model.seed", "must be nonnegative")


@dataclass
class ExperimentManifest:
    config: AdaptationConfig = field(default_factory=AdaptationConfig)
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    output_dir: str = "runs/default"
    description: str = ""

    def to_dict(self) -> dict:
        return {
            "description": self.description,
            "output_dir": self.output_dir,
            "config": self.config.to_dict(),
            "data": {f.name: getattr(self.data, f.name) for f in fields(self.data)},
            "model": {f.name: getattr(self.model, f.name) for f in fields(self.model)},
        }

    def to_toml(self) -> str:
        return tomli_w.dumps(self.to_dict())

    def write(self, path):
        Path(path).write_text(self.to_toml())

    def with_config(self, **changes) -> "ExperimentManifest":
        """Copy with config fields replaced; derived defaults are re-resolved
        for fields that were not given explicitly."""
        base = self.config.to_dict()
        if "gamma_dec" in changes and "gamma_dis" not in changes:
            changes["gamma_dis"] = None
        if "mode" in changes:
            changes.setdefault("mix_ratio", None)
            if changes["mode"] == "partial" and "i_adv" not in changes:
                changes["i_adv"] = None
        base.update(changes)
        return replace(self, config=_build(AdaptationConfig, base, "config"))


_SCALARS = {"float": float, "int": int, "str": str, "bool": bool}


def _check_type(value, annotation: str, key: str):
    ann = annotation.replace("Optional[", "").rstrip("]") if annotation.startswith("Optional[") else annotation
    if ann == "list":
        if not isinstance(value, list):
            raise ConfigError(key, f"expected a list, got {type(value).__name__}")
        for v in value:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(key, "list entries must be numbers")
        return list(value)
    if ann == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(key, f"expected a number, got {value!r}")
        return float(value)
    if ann == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(key, f"expected an integer, got {value!r}")
        return value
    expected = _SCALARS[ann]
    if not isinstance(value, expected):
        raise ConfigError(key, f"expected {ann}, got {value!r}")
    return value


def _build(cls, values: dict, section: str):
    hints = {f.name: f.type for f in fields(cls)}
    kwargs = {}
    for key, value in values.items():
        dotted = f"{section}.{key}"
        if key not in hints:
            raise ConfigError(dotted, "unknown key")
        kwargs[key] = None if value is None else _check_type(value, hints[key], dotted)
    try:
        obj = cls(**kwargs)
    except ConfigError as exc:
        if not exc.key.startswith(section + "."):
            raise ConfigError(f"{section}.{exc.key}", str(exc).split(": ", 1)[-1]) from None
        raise
    if hasattr(obj, "validate") and cls is not AdaptationConfig:
        obj.validate()
    return obj


def manifest_from_dict(raw: dict) -> ExperimentManifest:
    allowed = {"config", "data", "model", "output_dir", "description"}
    for key in raw:
        if key not in allowed:
            raise ConfigError(key, "unknown key")
    for key in ("output_dir", "description"):
        if key in raw and not isinstance(raw[key], str):
            raise ConfigError(key, "expected a string")
    sections = {}
    for name, cls in (("config", AdaptationConfig), ("data", DataSpec), ("model", ModelSpec)):
        section = raw.get(name, {})
        if not isinstance(section, dict):
            raise ConfigError(name, "expected a table")
        sections[name] = _build(cls, section, name)
    return ExperimentManifest(
        output_dir=raw.get("output_dir", "runs/default"),
        description=raw.get("description", ""),
        **sections,
    )


def parse_manifest(path) -> ExperimentManifest:
    text = Path(path).read_text()
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(str(path), f"not valid TOML: {exc}") from None
    return manifest_from_dict(raw)


# -- materializing datasets and model specs ------------------------------------

def resolve_data_path(path: str) -> Path:
    p = Path(path)
    if not p.is_absolute() and os.environ.get(DATA_DIR_ENV):
        p = Path(os.environ[DATA_DIR_ENV]) / p
    return p


def _limit(ds: DomainDataset, n: int, seed: int) -> DomainDataset:
    if n <= 0 or n >= len(ds):
        return ds
    idx = np.sort(np.random.default_rng(seed).choice(len(ds), size=n, replace=False))
    return ds.take(idx)


def load_domains(spec: DataSpec) -> tuple[DomainDataset, DomainDataset]:
    """Return ``(source, target)``; the target keeps labels for evaluation only."""
    spec.validate()
    if spec.kind == "synthetic":
        source, target = make_synthetic_pair(spec.num_classes, spec.per_class, spec.dim,
                                             spec.shift, spec.rotation, spec.noise_sd,
                                             spec.seed, spec.radius)
    elif spec.kind == "idx":
        source = load_idx(resolve_data_path(spec.source_images), resolve_data_path(spec.source_labels))
        target = load_idx(resolve_data_path(spec.target_images), resolve_data_path(spec.target_labels))
    else:
        source = load_rudx(resolve_data_path(spec.source_path))
        target = load_rudx(resolve_data_path(spec.target_path))
    source = _limit(source, spec.source_limit, spec.seed)
    target = _limit(target, spec.target_limit, spec.seed + 1)
    if spec.target_decay_end < 1.0 or spec.target_decay_start < 1.0:
        target = resample_linear_decay(target, spec.target_decay_start, spec.target_decay_end, spec.seed)
    if spec.target_classes:
        target = subset_partial(target, spec.target_classes)
    if spec.balance_source:
        source = balance_source(source, spec.seed)
    return source, target


def model_specs(model: ModelSpec, input_shape: tuple, num_classes: int):
    enc = EncoderSpec(model.encoder, tuple(input_shape), model.feature_dim, tuple(model.hidden_sizes))
    return (enc, ClassifierSpec(model.feature_dim, num_classes),
            DiscriminatorSpec(model.feature_dim, tuple(model.discriminator_hidden)))
