"""Strict JSON configuration for the command-line pipeline.

Every section is optional and falls back to the defaults below; unknown keys
anywhere are rejected so misspelled hyperparameters fail loudly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .bwr import BwrParams
from .errors import DomainError, FormatError


@dataclass(frozen=True)
class RoiConfig:
    out_h: int = 32
    out_w: int = 64
    grid_h: int = 8
    grid_w: int = 16
    lam: float = 1.0


@dataclass(frozen=True)
class DerConvConfig:
    channels: int = 64
    init_seed: int = 0


@dataclass(frozen=True)
class EvalConfig:
    n_keys: int = 5
    n_bins: int = 100
    master_seed: int = 0
    workers: int = 1


@dataclass(frozen=True)
class PathsConfig:
    dataset: str | None = None
    models: str | None = None
    keys: str | None = None
    out: str | None = None


@dataclass(frozen=True)
class Config:
    bwr: BwrParams = field(default_factory=BwrParams)
    roi: RoiConfig = field(default_factory=RoiConfig)
    derconv: DerConvConfig = field(default_factory=DerConvConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_json(self) -> dict:
        b = self.bwr
        return {
            "bwr": {"b": b.b, "s": b.s, "o": b.o, "r": b.r, "symmetric_offsets": b.symmetric_offsets},
            "roi": {"out_h": self.roi.out_h, "out_w": self.roi.out_w, "grid_h": self.roi.grid_h,
                    "grid_w": self.roi.grid_w, "lambda": self.roi.lam},
            "derconv": {"C": self.derconv.channels, "init_seed": self.derconv.init_seed},
            "eval": {"n_keys": self.eval.n_keys, "n_bins": self.eval.n_bins,
                     "master_seed": self.eval.master_seed, "workers": self.eval.workers},
            "paths": {k: getattr(self.paths, k) for k in ("dataset", "models", "keys", "out")},
        }


# json key -> (attribute, type)
_SECTIONS = {
    "bwr": {"b": ("b", int), "s": ("s", int), "o": ("o", float), "r": ("r", float),
            "symmetric_offsets": ("symmetric_offsets", bool)},
    "roi": {"out_h": ("out_h", int), "out_w": ("out_w", int), "grid_h": ("grid_h", int),
            "grid_w": ("grid_w", int), "lambda": ("lam", float)},
    "derconv": {"C": ("channels", int), "init_seed": ("init_seed", int)},
    "eval": {"n_keys": ("n_keys", int), "n_bins": ("n_bins", int),
             "master_seed": ("master_seed", int), "workers": ("workers", int)},
    "paths": {"dataset": ("dataset", str), "models": ("models", str), "keys": ("keys", str),
              "out": ("out", str)},
}


def _coerce(section: str, name: str, value, kind):
    where = f"{section}.{name}"
    if kind is bool:
        if not isinstance(value, bool):
            raise DomainError(f"{where} must be a boolean")
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise DomainError(f"{where} must be an integer")
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise DomainError(f"{where} must be a number")
        return float(value)
    if value is not None and not isinstance(value, str):
        raise DomainError(f"{where} must be a string")
    return value


def config_from_dict(doc) -> Config:
    if not isinstance(doc, dict):
        raise DomainError("config must be a JSON object")
    unknown = set(doc) - set(_SECTIONS)
    if unknown:
        raise DomainError(f"unknown config section(s): {', '.join(sorted(unknown))}")
    parsed = {}
    for section, fields in _SECTIONS.items():
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise DomainError(f"{section} must be a JSON object")
        extra = set(body) - set(fields)
        if extra:
            raise DomainError(f"unknown key(s) in {section}: {', '.join(sorted(extra))}")
        parsed[section] = {attr: _coerce(section, key, body[key], kind)
                           for key, (attr, kind) in fields.items() if key in body}

    bwr = BwrParams(**parsed["bwr"])  # BwrParams validates its own invariants
    roi = RoiConfig(**parsed["roi"])
    if min(roi.out_h, roi.out_w, roi.grid_h, roi.grid_w) < 1:
        raise DomainError("roi sizes must be >= 1")
    if roi.lam < 0:
        raise DomainError("roi.lambda must be >= 0")
    if roi.out_h % bwr.b or roi.out_w % bwr.b:
        raise DomainError(f"b={bwr.b} must divide the compressed map {roi.out_h}x{roi.out_w}")
    der = DerConvConfig(**parsed["derconv"])
    if der.channels < 8 or der.channels % 8:
        raise DomainError(f"derconv.C must be a positive multiple of 8, got {der.channels}")
    if not 0 <= der.init_seed < 2**64:
        raise DomainError("derconv.init_seed must be a 64-bit unsigned integer")
    ev = EvalConfig(**parsed["eval"])
    if ev.n_keys < 2:
        raise DomainError("eval.n_keys must be >= 2")
    if ev.n_bins < 2:
        raise DomainError("eval.n_bins must be >= 2")
    if ev.workers < 1:
        raise DomainError("eval.workers must be >= 1")
    if not 0 <= ev.master_seed < 2**64:
        raise DomainError("eval.master_seed must be a 64-bit unsigned integer")
    return Config(bwr, roi, der, ev, PathsConfig(**parsed["paths"]))


def load_config(path) -> Config:
    try:
        doc = json.loads(Path(path).read_text())
    except OSError as exc:
        raise FormatError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"config {path} is not valid JSON: {exc}") from exc
    return config_from_dict(doc)
