import itertools

import numpy as np
import pytest

from bdrl.bellman import Transition, greedy_action, project_target, project_values
from bdrl.distributions import CategoricalReturn, SupportGrid, expectation, mix

from instances import GRID51, dirichlet

GRID3 = SupportGrid(0.0, 2.0, 3)


def test_identity_transport():
    z = CategoricalReturn(GRID3, [0.2, 0.3, 0.5])
    assert np.allclose(project_target(z, 0.0, 1.0).m, z.probs, atol=1e-15)


def test_half_atom_shift_splits_evenly():
    z = CategoricalReturn.point_mass(GRID3, 1)
    m = project_target(z, 0.5, 1.0).m
    assert np.allclose(m, [0.0, 0.5, 0.5], atol=1e-15)


def test_half_atom_shift_is_minimal_spread():
    # among grid distributions with mean 1.5, (0, .5, .5) has least variance
    best, best_var = None, np.inf
    for i, j in itertools.product(range(101), repeat=2):
        p = np.array([i, j, 100 - i - j]) / 100
        if p[2] < 0 or abs(p @ GRID3.atoms - 1.5) > 1e-12:
            continue
        var = p @ (GRID3.atoms - 1.5) ** 2
        if var < best_var:
            best, best_var = p, var
    z = CategoricalReturn.point_mass(GRID3, 1)
    assert np.allclose(project_target(z, 0.5, 1.0).m, best, atol=1e-12)


def test_clamps_to_top_atom():
    z = CategoricalReturn.uniform(GRID51)
    m = project_target(z, 100.0, 0.9).m
    assert m[-1] == pytest.approx(1.0, abs=1e-12)


def test_terminal_transition_projects_reward_only():
    z = CategoricalReturn.uniform(GRID3)
    m = project_target(z, 0.25, 0.9, done=True).m
    assert np.allclose(m, [0.75, 0.25, 0.0])


def test_nonfinite_reward():
    with pytest.raises(ValueError):
        project_target(CategoricalReturn.uniform(GRID3), float("nan"), 0.9)
    with pytest.raises(ValueError):
        Transition(0, 0, float("inf"), 1)


def test_mass_expectation_and_linearity():
    rng = np.random.default_rng(0)
    atoms = GRID51.atoms
    for _ in range(500):
        p, q = dirichlet(rng, 51), dirichlet(rng, 51)
        gamma = rng.uniform(0.01, 0.99)
        r = rng.uniform(-5, 5)
        m = project_values(r + gamma * atoms, p, GRID51)
        assert abs(m.sum() - 1) < 1e-9
        assert np.all(m >= 0)
        w = rng.random()
        mpq = project_values(r + gamma * atoms, w * p + (1 - w) * q, GRID51)
        mq = project_values(r + gamma * atoms, q, GRID51)
        assert np.allclose(mpq, w * m + (1 - w) * mq, atol=1e-9)
        # no clamping when all shifted atoms stay inside the grid
        r_in = rng.uniform(0, 34 * (1 - gamma))
        m_in = project_values(r_in + gamma * atoms, p, GRID51)
        assert m_in @ atoms == pytest.approx(r_in + gamma * (p @ atoms), abs=1e-9)


def test_batched_matches_single():
    rng = np.random.default_rng(1)
    p = dirichlet(rng, 51, size=(4, 3))
    vals = rng.uniform(-3, 40, size=(4, 3, 51))
    batched = project_values(vals, p, GRID51)
    for idx in np.ndindex(4, 3):
        assert np.allclose(batched[idx], project_values(vals[idx], p[idx], GRID51))


class TestGreedy:
    def test_single_action(self):
        assert greedy_action([CategoricalReturn.uniform(GRID3)]) == 0

    def test_tie_breaks_low(self):
        zs = [CategoricalReturn.point_mass(GRID3, k) for k in (1, 2, 2)]
        assert greedy_action(zs) == 1

    def test_empty(self):
        with pytest.raises(ValueError):
            greedy_action([])

    def test_matches_brute_force(self):
        rng = np.random.default_rng(2)
        for _ in range(50):
            zs = [CategoricalReturn(GRID51, p) for p in dirichlet(rng, 51, size=7)]
            means = [expectation(z) for z in zs]
            best = max(range(7), key=lambda k: (means[k], -k))
            assert greedy_action(zs) == best
