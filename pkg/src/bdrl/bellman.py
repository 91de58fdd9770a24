"""One-step categorical Bellman targets and greedy action selection."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .distributions import CategoricalReturn, SupportGrid, expectation, normalize_probs


@dataclass(frozen=True)
class Transition:
    state: int
    action: int
    reward: float
    next_state: int
    done: bool = False  # next_state is absorbing with zero future return

    def __post_init__(self):
        if not math.isfinite(self.reward):
            raise ValueError("transition reward must be finite")

    def to_dict(self) -> dict:
        return {"s": self.state, "a": self.action, "r": self.reward,
                "s_next": self.next_state, "done": self.done}


@dataclass(frozen=True)
class BellmanTarget:
    grid: SupportGrid
    m: np.ndarray

    def __post_init__(self):
        m = normalize_probs(self.m)
        m.flags.writeable = False
        object.__setattr__(self, "m", m)

    def as_return(self) -> CategoricalReturn:
        return CategoricalReturn(self.grid, self.m)


def project_values(values: np.ndarray, probs: np.ndarray, grid: SupportGrid) -> np.ndarray:
    """Project masses sitting at arbitrary ``values`` onto ``grid``.

    Each mass is clamped into ``[z_min, z_max]`` and split between its two
    bracketing atoms in inverse proportion to distance. Works on any leading
    batch shape; ``values`` and ``probs`` must broadcast together.
    """
    values, probs = np.broadcast_arrays(np.asarray(values, dtype=np.float64),
                                        np.asarray(probs, dtype=np.float64))
    n = grid.n_atoms
    lead = values.shape[:-1]
    rows = int(np.prod(lead)) if lead else 1
    v = values.reshape(rows, -1)
    p = probs.reshape(rows, -1)

    b = (np.clip(v, grid.z_min, grid.z_max) - grid.z_min) / grid.delta_z
    b = np.clip(b, 0.0, n - 1)
    lo = np.floor(b).astype(np.int64)
    lo = np.minimum(lo, n - 2)
    frac = b - lo
    offset = (np.arange(rows, dtype=np.int64) * n)[:, None]
    out = np.bincount((lo + offset).ravel(), weights=(p * (1.0 - frac)).ravel(),
                      minlength=rows * n)
    out += np.bincount((lo + 1 + offset).ravel(), weights=(p * frac).ravel(),
                       minlength=rows * n)
    return out.reshape(*lead, n) if lead else out.reshape(n)


def project_target(next_z: CategoricalReturn, reward: float, gamma: float,
                   done: bool = False) -> BellmanTarget:
    """Distributional Bellman target of ``reward + gamma * next_z`` on the grid.

    With ``done`` the next-state return is identically zero, so the target is
    the projection of a point mass at ``reward``.
    """
    if not math.isfinite(reward):
        raise ValueError("reward must be finite")
    if not 0.0 < gamma <= 1.0:
        raise ValueError("gamma must lie in (0, 1]")
    grid = next_z.grid
    if done:
        m = project_values(np.array([reward]), np.array([1.0]), grid)
    else:
        m = project_values(reward + gamma * grid.atoms, next_z.probs, grid)
    return BellmanTarget(grid, m)


def greedy_action(returns_for_state: Sequence[CategoricalReturn]) -> int:
    """Index of the action with the largest expected return; ties go low."""
    if len(returns_for_state) == 0:
        raise ValueError("greedy_action needs at least one action")
    means = [expectation(z) for z in returns_for_state]
    return int(np.argmax(means))
