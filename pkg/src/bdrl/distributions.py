"""Categorical return distributions on a shared, uniformly spaced atom grid.

Two layers live here. ``SupportGrid`` / ``CategoricalReturn`` are immutable
value types used at API boundaries; the ``*_array`` helpers work on raw
probability arrays with arbitrary leading batch dimensions and are what the
training loop calls in its inner loop.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from typing import Union

import numpy as np

SUM_TOL = 1e-9
DRIFT_TOL = 1e-6


class SupportMismatchError(ValueError):
    """Raised when two distributions do not share the same atom grid."""


@dataclass(frozen=True)
class SupportGrid:
    z_min: float
    z_max: float
    n_atoms: int

    def __post_init__(self):
        if int(self.n_atoms) != self.n_atoms or self.n_atoms < 2:
            raise ValueError("n_atoms must be an integer >= 2")
        if not (math.isfinite(self.z_min) and math.isfinite(self.z_max)):
            raise ValueError("grid bounds must be finite")
        if not self.z_max > self.z_min:
            raise ValueError("z_max must exceed z_min")
        object.__setattr__(self, "z_min", float(self.z_min))
        object.__setattr__(self, "z_max", float(self.z_max))
        object.__setattr__(self, "n_atoms", int(self.n_atoms))

    @property
    def delta_z(self) -> float:
        return (self.z_max - self.z_min) / (self.n_atoms - 1)

    @property
    def atoms(self) -> np.ndarray:
        z = self.z_min + self.delta_z * np.arange(self.n_atoms, dtype=np.float64)
        z[-1] = self.z_max
        z.flags.writeable = False
        return z

    def to_dict(self) -> dict:
        return {"z_min": self.z_min, "z_max": self.z_max, "atoms": self.n_atoms}

    @classmethod
    def from_dict(cls, d: dict) -> "SupportGrid":
        return cls(float(d["z_min"]), float(d["z_max"]), int(d["atoms"]))


def normalize_probs(p, tol: float = SUM_TOL, drift_tol: float = DRIFT_TOL) -> np.ndarray:
    """Validate a probability array along its last axis.

    Sums off by more than ``tol`` are renormalized; off by more than
    ``drift_tol`` raise. Negative round-off above -1e-12 is clipped to zero.
    """
    p = np.array(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] < 1:
        raise ValueError("probability vector must be non-empty")
    if not np.all(np.isfinite(p)):
        raise ValueError("probabilities must be finite")
    if np.any(p < -1e-12):
        raise ValueError("probabilities must be nonnegative")
    p = np.clip(p, 0.0, None)
    s = p.sum(axis=-1, keepdims=True)
    err = np.abs(s - 1.0)
    if np.any(err > drift_tol):
        raise ValueError(f"probabilities sum to {s.ravel()[np.argmax(err.ravel())]!r}, not 1")
    if np.any(err > tol):
        p = p / s
    return p


class CategoricalReturn:
    """Immutable probability vector over a ``SupportGrid``."""

    __slots__ = ("_grid", "_probs")

    def __init__(self, grid: SupportGrid, probs):
        p = normalize_probs(probs)
        if p.ndim != 1 or p.shape[0] != grid.n_atoms:
            raise ValueError(f"expected {grid.n_atoms} probabilities, got shape {p.shape}")
        p.flags.writeable = False
        self._grid = grid
        self._probs = p

    @classmethod
    def point_mass(cls, grid: SupportGrid, index: int) -> "CategoricalReturn":
        p = np.zeros(grid.n_atoms)
        p[index] = 1.0
        return cls(grid, p)

    @classmethod
    def uniform(cls, grid: SupportGrid) -> "CategoricalReturn":
        return cls(grid, np.full(grid.n_atoms, 1.0 / grid.n_atoms))

    @property
    def grid(self) -> SupportGrid:
        return self._grid

    @property
    def probs(self) -> np.ndarray:
        return self._probs

    def cdf(self) -> np.ndarray:
        return cdf_array(self._probs)

    def __eq__(self, other):
        if not isinstance(other, CategoricalReturn):
            return NotImplemented
        return self._grid == other._grid and np.array_equal(self._probs, other._probs)

    def __hash__(self):
        return hash((self._grid, self._probs.tobytes()))

    def __repr__(self):
        return f"CategoricalReturn(grid={self._grid!r}, mean={expectation(self):.6g})"

    def to_dict(self) -> dict:
        return {"grid": self._grid.to_dict(), "probs": [float(x) for x in self._probs]}

    def to_json(self) -> str:
        # repr-based float encoding round-trips float64 exactly
        return json.dumps(self.to_dict())

    @classmethod
    def from_dict(cls, d: dict) -> "CategoricalReturn":
        return cls(SupportGrid.from_dict(d["grid"]), d["probs"])

    @classmethod
    def from_json(cls, s: str) -> "CategoricalReturn":
        return cls.from_dict(json.loads(s))


@dataclass(frozen=True)
class MixWeight:
    value: float

    def __post_init__(self):
        v = float(self.value)
        if not (0.0 <= v <= 1.0):
            raise ValueError(f"mix weight must lie in [0, 1], got {self.value!r}")
        object.__setattr__(self, "value", v)

    def __float__(self):
        return self.value


Weight = Union[float, MixWeight]


def _same_grid(a: CategoricalReturn, b: CategoricalReturn) -> SupportGrid:
    if a.grid != b.grid:
        raise SupportMismatchError(f"grid mismatch: {a.grid} vs {b.grid}")
    return a.grid


# ---------------------------------------------------------------------------
# array-level kernels (last axis = atoms)


def cdf_array(p: np.ndarray) -> np.ndarray:
    return np.cumsum(p, axis=-1)


def w2_squared_array(p: np.ndarray, q: np.ndarray, delta_z: float) -> np.ndarray:
    diff = np.cumsum(p - q, axis=-1)[..., :-1]
    return delta_z * delta_z * np.einsum("...d,...d->...", diff, diff)


def w2_array(p: np.ndarray, q: np.ndarray, delta_z: float) -> np.ndarray:
    return np.sqrt(w2_squared_array(p, q, delta_z))


def kl_array(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    pos = p > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(pos, p * (np.log(np.where(pos, p, 1.0)) - np.log(q)), 0.0)
    return terms.sum(axis=-1)


def js_array(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    m = 0.5 * (p + q)
    return 0.5 * kl_array(p, m) + 0.5 * kl_array(q, m)


# ---------------------------------------------------------------------------
# value-level operations


def expectation(z: CategoricalReturn) -> float:
    return float(z.probs @ z.grid.atoms)


def w2_distance(a: CategoricalReturn, b: CategoricalReturn) -> float:
    """2-Wasserstein discrepancy computed from CDF differences.

    ``W2 = dz * sqrt(sum_{d<D} (F_a(z_d) - F_b(z_d))**2)``; the last atom is
    skipped because both CDFs equal one there.
    """
    grid = _same_grid(a, b)
    return float(w2_array(a.probs, b.probs, grid.delta_z))


def kl_divergence(a: CategoricalReturn, b: CategoricalReturn) -> float:
    _same_grid(a, b)
    return float(kl_array(a.probs, b.probs))


def js_divergence(a: CategoricalReturn, b: CategoricalReturn) -> float:
    _same_grid(a, b)
    return float(min(max(js_array(a.probs, b.probs), 0.0), math.log(2.0)))


def mix(a: CategoricalReturn, b: CategoricalReturn, w: Weight) -> CategoricalReturn:
    """Return ``w * a + (1 - w) * b``."""
    grid = _same_grid(a, b)
    w = float(w if isinstance(w, MixWeight) else MixWeight(w))
    return CategoricalReturn(grid, w * a.probs + (1.0 - w) * b.probs)
