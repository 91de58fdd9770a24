import math

import numpy as np
import pytest

from bdrl.distributions import CategoricalReturn, SupportGrid, SupportMismatchError, mix, w2_distance
from bdrl.projection import (
    Branch,
    ProjectionConfig,
    contraction_step,
    fallback_steps_bound,
    qp_coefficients,
    solve_projection,
    solve_projection_array,
)

from instances import GRID51, brute_force_alpha, dirichlet, projection_instance

UNIT2 = SupportGrid(0.0, 1.0, 2)


def cr(p, grid=GRID51):
    return CategoricalReturn(grid, p)


class TestConfig:
    @pytest.mark.parametrize("kw", [dict(epsilon=0, rho=0.5), dict(epsilon=1, rho=1.0),
                                    dict(epsilon=1, rho=0.5, alpha_floor=1.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            ProjectionConfig(**kw)


class TestQpCoefficients:
    def test_no_update(self):
        rng = np.random.default_rng(0)
        z, ref = cr(dirichlet(rng, 51)), cr(dirichlet(rng, 51))
        q = qp_coefficients(z, z, ref, 0.1)
        assert q.A == 0 and q.B == 0
        assert q.C == pytest.approx(w2_distance(z, ref) ** 2 / GRID51.delta_z**2, rel=1e-12)
        assert q.bound == pytest.approx(0.01 / GRID51.delta_z**2)

    def test_new_equals_ref(self):
        rng = np.random.default_rng(1)
        old, new = cr(dirichlet(rng, 51)), cr(dirichlet(rng, 51))
        q = qp_coefficients(old, new, new, 0.1)
        assert q.B == 0 and q.C == 0

    def test_quadratic_identity_and_cauchy_schwarz(self):
        rng = np.random.default_rng(2)
        dz = GRID51.delta_z
        for _ in range(20):
            old, new, ref = (cr(p) for p in dirichlet(rng, 51, size=3))
            q = qp_coefficients(old, new, ref, 0.5)
            assert q.B**2 <= q.A * q.C + 1e-9
            for a in rng.random(100):
                quad = dz**2 * (q.A * a * a + 2 * q.B * a + q.C)
                assert quad == pytest.approx(w2_distance(mix(old, new, a), ref) ** 2, abs=1e-9)

    def test_grid_mismatch(self):
        z = CategoricalReturn.uniform(UNIT2)
        with pytest.raises(SupportMismatchError):
            qp_coefficients(z, z, CategoricalReturn.uniform(GRID51), 0.1)


class TestSolveProjection:
    cfg = ProjectionConfig(epsilon=0.5, rho=0.9)

    def test_accepts_when_close(self):
        rng = np.random.default_rng(3)
        old, new = cr(dirichlet(rng, 51)), cr(dirichlet(rng, 51))
        out = solve_projection(old, new, new, self.cfg)
        assert out.branch is Branch.ACCEPTED and out.result == new and out.alpha_used is None

    def test_hand_solved_instance(self):
        old = CategoricalReturn.point_mass(UNIT2, 1)
        new = CategoricalReturn.point_mass(UNIT2, 0)
        out = solve_projection(old, new, old, self.cfg)
        assert out.branch is Branch.SOLVED
        assert out.alpha_used.value == pytest.approx(0.5, abs=1e-12)
        assert np.allclose(out.result.probs, [0.5, 0.5])
        oracle = brute_force_alpha(old.probs, new.probs, old.probs, 0.5, 1.0)
        assert oracle == pytest.approx(0.5, abs=1e-5)

    def test_infeasible_falls_back(self):
        old = CategoricalReturn.point_mass(UNIT2, 0)
        ref = CategoricalReturn.point_mass(UNIT2, 1)
        out = solve_projection(old, old, ref, self.cfg)
        assert out.branch is Branch.FALLBACK
        assert out.result == mix(old, ref, 0.9)
        assert brute_force_alpha(old.probs, old.probs, ref.probs, 0.5, 1.0) is None

    def test_alpha_floor_raises_alpha(self):
        old = CategoricalReturn.point_mass(UNIT2, 1)
        new = CategoricalReturn.point_mass(UNIT2, 0)
        out = solve_projection(old, new, old, ProjectionConfig(0.5, 0.9, alpha_floor=0.7))
        assert out.alpha_used.value == pytest.approx(0.7)
        # infeasible floor leaves the optimum untouched
        ref = CategoricalReturn(UNIT2, [0.6, 0.4])
        out = solve_projection(new, old, ref, ProjectionConfig(0.05, 0.9, alpha_floor=0.9))
        assert out.branch is Branch.SOLVED and out.alpha_used.value < 0.9

    def test_infinite_epsilon_always_accepts(self):
        rng = np.random.default_rng(4)
        old, new, ref = (cr(p) for p in dirichlet(rng, 51, size=3))
        out = solve_projection(old, new, ref, ProjectionConfig(math.inf, 0.9))
        assert out.branch is Branch.ACCEPTED

    def test_stability_and_branch_exclusivity(self):
        rng = np.random.default_rng(5)
        seen = set()
        for _ in range(2000):
            p_old, p_new, p_ref, eps = projection_instance(rng)
            cfg = ProjectionConfig(eps, rng.uniform(0.05, 0.95))
            res, br, alpha, d0, d1 = solve_projection_array(p_old, p_new, p_ref, GRID51.delta_z, cfg)
            seen.add(int(br))
            assert d1 <= max(d0, eps) + 1e-9
            if br == 1:
                assert d1 <= eps + 1e-9 and 0 < alpha < 1
            else:
                assert np.isnan(alpha)
        assert seen == {0, 1, 2}

    def test_matches_brute_force_oracle(self):
        rng = np.random.default_rng(6)
        dz = GRID51.delta_z
        checked = 0
        for _ in range(100):
            p_old, p_new, p_ref, eps = projection_instance(rng)
            res, br, alpha, _, _ = solve_projection_array(
                p_old, p_new, p_ref, dz, ProjectionConfig(eps, 0.9))
            if br == 0:
                continue
            oracle = brute_force_alpha(p_old, p_new, p_ref, eps, dz)
            if br == 2:
                assert oracle is None
                continue
            assert oracle is not None
            assert abs(alpha - oracle) <= 1e-4
            obj = w2_distance(cr(res), cr(p_new))
            obj_oracle = dz * oracle * math.sqrt(np.sum(np.cumsum(p_old - p_new)[:-1] ** 2))
            assert obj == pytest.approx(obj_oracle, abs=1e-4)
            checked += 1
        assert checked > 10


class TestContraction:
    def test_quarter_step(self):
        z = CategoricalReturn.point_mass(UNIT2, 0)
        ref = CategoricalReturn.point_mass(UNIT2, 1)
        out = contraction_step(z, ref, 0.25)
        assert np.allclose(out.probs, [0.25, 0.75])
        assert w2_distance(out, ref) == pytest.approx(0.25)
        assert w2_distance(out, ref) <= math.sqrt(0.25) * 1.0

    def test_fixed_point(self):
        ref = CategoricalReturn.uniform(GRID51)
        out = contraction_step(ref, ref, 0.3)
        assert out == ref and w2_distance(out, ref) == 0

    def test_step_count(self):
        assert fallback_steps_bound(1.0, 0.1, 0.9) == 44
        z = CategoricalReturn.point_mass(UNIT2, 0)
        ref = CategoricalReturn.point_mass(UNIT2, 1)
        d0 = w2_distance(z, ref)
        for t in range(1, 45):
            z = contraction_step(z, ref, 0.9)
            assert w2_distance(z, ref) <= 0.9 ** (t / 2) * d0 + 1e-12
        assert w2_distance(z, ref) <= 0.1

    def test_rho_range(self):
        z = CategoricalReturn.uniform(UNIT2)
        with pytest.raises(ValueError):
            contraction_step(z, z, 1.0)
