"""System-parameter schemas, vectors, uniform randomization and error metrics.

A parameter vector is a float64 numpy array indexed by a :class:`ParamSchema`.
All values are kept strictly positive; anything that could push a value to
or below zero is clamped at :data:`PARAM_FLOOR`.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PARAM_FLOOR = 1e-4
KINDS = ("dynamics", "visual")

MISPARAM_PRESETS = {
    "2x-0.5x": (2.0, 0.5),
    "4/3x-3/4x": (4.0 / 3.0, 3.0 / 4.0),
    "3/2x-2/3x": (3.0 / 2.0, 2.0 / 3.0),
}


@dataclass(frozen=True)
class ParamSchema:
    names: tuple[str, ...]
    kinds: tuple[str, ...]
    reference_scale: tuple[float, ...]
    units: tuple[str, ...] = ()

    def __post_init__(self):
        n = len(self.names)
        if n < 1:
            raise ValueError("schema needs at least one parameter")
        if any(not name for name in self.names) or len(set(self.names)) != n:
            raise ValueError(f"parameter names must be unique and non-empty: {self.names}")
        if len(self.kinds) != n or any(k not in KINDS for k in self.kinds):
            raise ValueError(f"kinds must be one of {KINDS} per parameter")
        if len(self.reference_scale) != n or any(s <= 0 for s in self.reference_scale):
            raise ValueError("reference_scale must be positive per parameter")
        if not self.units:
            object.__setattr__(self, "units", ("",) * n)
        elif len(self.units) != n:
            raise ValueError("units length must match names")

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        return self.names.index(name)

    def indices(self, kind: str) -> list[int]:
        return [i for i, k in enumerate(self.kinds) if k == kind]

    def vector(self, values) -> np.ndarray:
        """Validate ``values`` against the schema and return a read-only copy."""
        v = np.array(values, dtype=np.float64).reshape(-1)
        if v.shape[0] != len(self):
            raise ValueError(f"expected {len(self)} parameters, got {v.shape[0]}")
        if not np.all(np.isfinite(v)) or np.any(v <= 0):
            raise ValueError(f"parameters must be finite and strictly positive: {v}")
        v.flags.writeable = False
        return v

    def to_dict(self, values) -> dict:
        """Serialize a vector as ``name -> {value, units, kind}``."""
        v = self.vector(values)
        return {
            name: {"value": float(x), "units": unit, "kind": kind}
            for name, x, unit, kind in zip(self.names, v, self.units, self.kinds)
        }

    def from_dict(self, data: dict) -> np.ndarray:
        unknown = set(data) - set(self.names)
        if unknown:
            raise ValueError(f"unknown parameters: {sorted(unknown)}")
        missing = [n for n in self.names if n not in data]
        if missing:
            raise ValueError(f"missing parameters: {missing}")
        out = []
        for name, kind in zip(self.names, self.kinds):
            entry = data[name]
            if isinstance(entry, dict):
                if "kind" in entry and entry["kind"] != kind:
                    raise ValueError(f"{name}: kind {entry['kind']!r} does not match schema {kind!r}")
                entry = entry["value"]
            out.append(float(entry))
        return self.vector(out)


@dataclass(frozen=True)
class ParamDistribution:
    """Independent uniforms with support ``mean * [1 - r/2, 1 + r/2]``."""

    mean: np.ndarray
    range_fraction: float
    floor: float = PARAM_FLOOR

    def __post_init__(self):
        mean = np.array(self.mean, dtype=np.float64).reshape(-1)
        if np.any(mean <= 0) or not np.all(np.isfinite(mean)):
            raise ValueError("distribution mean must be finite and positive")
        if self.range_fraction < 0:
            raise ValueError("range_fraction must be non-negative")
        mean.flags.writeable = False
        object.__setattr__(self, "mean", mean)

    @property
    def low(self) -> np.ndarray:
        return np.maximum(self.mean * (1.0 - self.range_fraction / 2.0), self.floor)

    @property
    def high(self) -> np.ndarray:
        return np.maximum(self.mean * (1.0 + self.range_fraction / 2.0), self.floor)


def sample_params(dist: ParamDistribution, rng: np.random.Generator) -> np.ndarray:
    low, high = dist.low, dist.high
    v = low + (high - low) * rng.random(low.shape[0])
    return np.maximum(v, dist.floor)


def percent_error(mean, real) -> np.ndarray:
    mean = np.asarray(mean, dtype=np.float64)
    real = np.asarray(real, dtype=np.float64)
    if mean.shape != real.shape:
        raise ValueError(f"shape mismatch {mean.shape} vs {real.shape}")
    if np.any(real <= 0):
        raise ValueError("reference parameters must be strictly positive")
    return 100.0 * np.abs(mean - real) / real


def misparametrize(real, factors=None, rng=None, preset="2x-0.5x") -> np.ndarray:
    """Scale ``real`` element-wise, by explicit ``factors`` or a per-parameter coin flip.

    The coin picks between the preset's high and low factor.
    """
    real = np.asarray(real, dtype=np.float64)
    if factors is None:
        if rng is None:
            raise ValueError("need either explicit factors or an rng")
        high, low = MISPARAM_PRESETS[preset]
        factors = np.where(rng.random(real.shape[0]) < 0.5, high, low)
    factors = np.asarray(factors, dtype=np.float64)
    if factors.shape != real.shape:
        raise ValueError("one factor per parameter required")
    if np.any(factors <= 0):
        raise ValueError("factors must be positive")
    return real * factors
