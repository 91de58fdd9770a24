"""Post-update projection toward a frozen group reference.

Three outcomes per call: the provisional estimate is *accepted* when it is
already within ``epsilon`` of the reference; otherwise the one-variable
convex QP over the mixing weight is *solved* in closed form; if the QP has
no feasible point in (0, 1) the estimate *falls back* to a fixed
``rho``-mixture with the reference.

Mixtures follow ``alpha * z_old + (1 - alpha) * z_new``. With CDF gaps
``a_d = F_old - F_new`` and ``b_d = F_new - F_ref`` (d < D), the squared
distance of the mixture to the reference is ``dz**2 * (A a^2 + 2 B a + C)``
and its distance to ``z_new`` is ``dz * alpha * sqrt(A)``, so the smallest
feasible alpha is optimal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .distributions import (
    CategoricalReturn,
    MixWeight,
    SupportMismatchError,
    mix,
    w2_array,
)

# smallest alpha used when the feasible set reaches down to 0 (open interval)
ALPHA_EPS = 1e-12


class Branch(str, Enum):
    ACCEPTED = "accepted"
    SOLVED = "solved"
    FALLBACK = "fallback"


BRANCH_CODES = (Branch.ACCEPTED, Branch.SOLVED, Branch.FALLBACK)


@dataclass(frozen=True)
class ProjectionConfig:
    epsilon: float
    rho: float
    alpha_floor: float = 0.0

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be > 0")
        if not 0.0 < self.rho < 1.0:
            raise ValueError("rho must lie in (0, 1)")
        if not 0.0 <= self.alpha_floor < 1.0:
            raise ValueError("alpha_floor must lie in [0, 1)")

    @property
    def enabled(self) -> bool:
        return math.isfinite(self.epsilon)


@dataclass(frozen=True)
class QpCoefficients:
    A: float
    B: float
    C: float
    bound: float


@dataclass(frozen=True)
class ProjectionOutcome:
    result: CategoricalReturn
    branch: Branch
    alpha_used: Optional[MixWeight] = None


def _check(*zs: CategoricalReturn):
    g = zs[0].grid
    for z in zs[1:]:
        if z.grid != g:
            raise SupportMismatchError(f"grid mismatch: {g} vs {z.grid}")
    return g


def qp_coefficients_array(p_old, p_new, p_ref, delta_z: float, epsilon):
    """Vectorized QP coefficients; returns ``(A, B, C, bound)`` arrays."""
    f_old = np.cumsum(p_old, axis=-1)[..., :-1]
    f_new = np.cumsum(p_new, axis=-1)[..., :-1]
    f_ref = np.cumsum(p_ref, axis=-1)[..., :-1]
    a = f_old - f_new
    b = f_new - f_ref
    A = np.einsum("...d,...d->...", a, a)
    B = np.einsum("...d,...d->...", a, b)
    C = np.einsum("...d,...d->...", b, b)
    bound = np.asarray(epsilon, dtype=np.float64) ** 2 / delta_z**2
    return A, B, C, np.broadcast_to(bound, np.shape(A))


def qp_coefficients(z_old: CategoricalReturn, z_new: CategoricalReturn,
                    z_ref: CategoricalReturn, epsilon: float) -> QpCoefficients:
    grid = _check(z_old, z_new, z_ref)
    if not epsilon > 0:
        raise ValueError("epsilon must be > 0")
    A, B, C, bound = qp_coefficients_array(z_old.probs, z_new.probs, z_ref.probs,
                                           grid.delta_z, epsilon)
    return QpCoefficients(float(A), float(B), float(C), float(bound))


def feasible_alpha(A, B, C, bound, alpha_floor: float = 0.0):
    """Smallest feasible mixing weight in (0, 1), or NaN when none exists.

    Solves ``A x^2 + 2 B x + (C - bound) <= 0`` over the open unit interval.
    Callers only reach here when ``x = 0`` is infeasible or on the boundary,
    i.e. ``C >= bound``.
    """
    A, B, C, bound = np.broadcast_arrays(*(np.asarray(x, dtype=np.float64)
                                           for x in (A, B, C, bound)))
    with np.errstate(invalid="ignore", divide="ignore"):
        return _lower_root(A, B, C - bound, alpha_floor)


def _lower_root(A, B, c, alpha_floor):
    disc = B * B - A * c
    ok = (A > 0) & (disc >= 0)
    root = np.sqrt(np.where(ok, disc, 0.0))
    # q = -(B + sign(B) sqrt(disc)); roots are q / A and c / q without cancellation
    q = -(B + np.where(B < 0, -root, root))
    ok &= q != 0
    q_safe = np.where(ok, q, 1.0)
    r1 = q_safe / np.where(ok, A, 1.0)
    r2 = c / q_safe
    lo = np.minimum(r1, r2)
    hi = np.maximum(r1, r2)
    lo = np.maximum(lo, ALPHA_EPS)
    ok &= (lo < 1.0) & (lo <= hi)
    alpha = np.where(ok, lo, np.nan)
    if alpha_floor > 0:
        raise_to_floor = ok & (alpha < alpha_floor) & (hi >= alpha_floor)
        alpha = np.where(raise_to_floor, alpha_floor, alpha)
    return alpha


def solve_projection_array(p_old, p_new, p_ref, delta_z: float, cfg: ProjectionConfig):
    """Batched post-update projection.

    Returns ``(result, branch, alpha, d_before, d_after)`` with ``branch``
    holding indices into ``BRANCH_CODES`` and ``alpha`` NaN outside the solved
    branch.
    """
    p_old = np.asarray(p_old, dtype=np.float64)
    p_new = np.asarray(p_new, dtype=np.float64)
    p_ref = np.asarray(p_ref, dtype=np.float64)
    d_before = w2_array(p_old, p_ref, delta_z)
    d_new = w2_array(p_new, p_ref, delta_z)
    accepted = d_new < cfg.epsilon

    A, B, C, bound = qp_coefficients_array(p_old, p_new, p_ref, delta_z, cfg.epsilon)
    alpha = feasible_alpha(A, B, C, bound, cfg.alpha_floor)
    solved = ~accepted & np.isfinite(alpha)
    fallback = ~accepted & ~solved

    a = np.where(solved, alpha, 0.0)[..., None]
    result = np.where(accepted[..., None], p_new, a * p_old + (1.0 - a) * p_new)
    result = np.where(fallback[..., None], cfg.rho * p_old + (1.0 - cfg.rho) * p_ref, result)
    result = result / result.sum(axis=-1, keepdims=True)

    branch = np.where(accepted, 0, np.where(solved, 1, 2)).astype(np.int8)
    d_after = np.where(accepted, d_new, w2_array(result, p_ref, delta_z))
    return result, branch, np.where(solved, alpha, np.nan), d_before, d_after


def solve_projection(z_old: CategoricalReturn, z_new: CategoricalReturn,
                     z_ref: CategoricalReturn, cfg: ProjectionConfig) -> ProjectionOutcome:
    grid = _check(z_old, z_new, z_ref)
    result, branch, alpha, _, _ = solve_projection_array(
        z_old.probs, z_new.probs, z_ref.probs, grid.delta_z, cfg)
    br = BRANCH_CODES[int(branch)]
    if br is Branch.ACCEPTED:
        return ProjectionOutcome(z_new, br, None)
    if br is Branch.SOLVED:
        return ProjectionOutcome(CategoricalReturn(grid, result), br, MixWeight(float(alpha)))
    return ProjectionOutcome(CategoricalReturn(grid, result), br, None)


def contraction_step(z: CategoricalReturn, z_ref: CategoricalReturn, rho: float) -> CategoricalReturn:
    """Fallback update ``rho * z + (1 - rho) * z_ref``."""
    _check(z, z_ref)
    if not 0.0 < rho < 1.0:
        raise ValueError("rho must lie in (0, 1)")
    return mix(z, z_ref, rho)


def fallback_steps_bound(d0: float, epsilon: float, rho: float) -> int:
    """Steps after which ``rho**(n/2) * d0 <= epsilon`` is guaranteed."""
    if d0 <= epsilon:
        return 0
    return math.ceil(math.log(epsilon**2 / d0**2) / math.log(rho))
