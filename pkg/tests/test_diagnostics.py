import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from coxmeta import diagnostics as dg
from coxmeta.errors import DataError
from coxmeta.grid import build_grid
from coxmeta.model import StudySet
from conftest import fake_draws
from oracles import brute_l_function


def test_acf_examples(rng):
    x = rng.normal(size=500)
    assert dg.acf(x, 5)[0] == 1.0
    alt = np.tile([1.0, -1.0], 500)
    assert dg.acf(alt, 1)[1] == pytest.approx(-1.0, abs=2e-3)
    with pytest.raises(ValueError):
        dg.acf(np.ones(10), 2)
    with pytest.raises(ValueError):
        dg.acf(x[:3], 3)


def test_l_function_trivial_patterns():
    d = np.array([0.0, 3.0, 10.0])
    assert np.array_equal(dg.l_function_at(np.zeros((0, 3)), [], d, 1.0), np.zeros(3))
    assert np.array_equal(dg.l_function_at([[1, 2, 3]], [1.0], d, 1.0), np.zeros(3))


def test_l_function_closed_form():
    vol = 4 * math.pi / 3 * 1000
    pts = [[0, 0, 0], [5, 0, 0]]
    L = dg.l_function_at(pts, [1.0, 1.0], [4.99, 5.0, 7.0], vol)
    expected = (2 * 3 / (4 * math.pi * vol)) ** (1 / 3)
    assert L[0] == 0.0
    assert L[1] == pytest.approx(expected, rel=1e-14)
    assert L[2] == pytest.approx(expected, rel=1e-14)


def test_l_function_matches_brute_force(rng):
    pts = rng.uniform(0, 60, (50, 3))
    lam = rng.uniform(0.001, 0.01, 50)
    d = np.arange(0, 80, 2.5)
    ours = dg.l_function_at(pts, lam, d, 216000.0)
    ref = brute_l_function(pts, lam, d, 216000.0)
    assert np.max(np.abs(ours - ref)) <= 1e-12


def test_l_function_zero_intensity_error():
    with pytest.raises(DataError):
        dg.l_function_at([[0, 0, 0], [1, 0, 0]], [1.0, 0.0], [2.0], 1.0)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), n=st.integers(0, 25))
def test_l_function_monotone_in_distance(seed, n):
    r = np.random.default_rng(seed)
    L = dg.l_function_at(r.uniform(0, 30, (n, 3)), r.uniform(0.1, 1, n),
                         np.linspace(0, 60, 31), 1000.0)
    assert np.all(np.diff(L) >= 0)


def test_l_function_on_grid(rng):
    g = build_grid({"dims": [5, 5, 5], "voxel_size_mm": 2.0})
    lam = rng.uniform(0.1, 1.0, g.n_masked)
    v = rng.choice(g.n_voxels, 12)
    pts = g.centers(v)
    ours = dg.l_function(pts, lam, g, [0.0, 3.0, 6.0])
    ref = brute_l_function(pts, lam[v], [0.0, 3.0, 6.0], g.domain_volume)
    assert np.allclose(ours, ref, rtol=0, atol=1e-12)


@pytest.fixture
def grid():
    return build_grid({"dims": [4, 4, 4], "voxel_size_mm": 3.0})


def test_ppc_zero_intensity_covers_empty_studies(grid):
    d = fake_draws(grid, np.full((20, 1, grid.n_masked), -1e3))
    obs = StudySet(["a", "b"], [[], []], np.ones((2, 1)), k_star=0)
    cov = dg.ppc_counts(d, {"r": [0, 1, 2]}, obs, np.random.default_rng(0))
    assert cov.regions == ["brain", "r"]
    assert cov.covered.all()
    assert cov.fraction_studies_covering(0.9) == 1.0


def test_ppc_far_above_not_covered(grid):
    d = fake_draws(grid, np.full((20, 1, grid.n_masked), -1e3))
    obs = StudySet(["a", "b"], [[], [5] * 30], np.ones((2, 1)), k_star=0)
    cov = dg.ppc_counts(d, {}, obs, np.random.default_rng(0))
    assert cov.covered[:, 0].tolist() == [True, False]
    assert cov.region_coverage["brain"] == 0.5
    assert np.all((cov.study_coverage >= 0) & (cov.study_coverage <= 1))


def test_ppc_reproducible(grid, rng):
    d = fake_draws(grid, rng.normal(-3, 0.3, (10, 1, grid.n_masked)))
    obs = StudySet(["a", "b", "c"], [[1, 2], [3], []], np.ones((3, 1)), k_star=0)
    a = dg.ppc_counts(d, {"r": [0, 1]}, obs, np.random.default_rng(5))
    b = dg.ppc_counts(d, {"r": [0, 1]}, obs, np.random.default_rng(5))
    assert np.array_equal(a.lower, b.lower) and np.array_equal(a.upper, b.upper)


def test_l_diff_identical_replicate_gives_zero(grid, rng):
    d = fake_draws(grid, rng.normal(-3, 0.3, (8, 1, grid.n_masked)))
    foci = [rng.choice(grid.n_voxels, 6), rng.choice(grid.n_voxels, 3)]
    obs = StudySet(["a", "b"], foci, np.ones((2, 1)), k_star=0)
    calls = iter([0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1])

    def same(lam, g, r):
        i = next(calls)
        return g.centers(obs.foci[i]), obs.foci[i]
    rep = dg.l_diff_report(obs, d, np.arange(0, 20, 2.0), rng, replicate=same)
    assert np.all(rep.lower == 0) and np.all(rep.upper == 0)
    assert rep.contains_zero.all()
    assert rep.curves()["prop_zero"].tolist() == [1.0] * 10


def test_l_diff_at_zero_distance(grid, rng):
    d = fake_draws(grid, rng.normal(-2, 0.3, (6, 1, grid.n_masked)))
    pts = rng.uniform(0, 9, (5, 3))
    from coxmeta.grid import world_to_voxels
    obs = StudySet(["a"], [world_to_voxels(grid, pts)], np.ones((1, 1)), k_star=0,
                   points=[pts])
    rep = dg.l_diff_report(obs, d, [0.0], rng)
    assert rep.lower[0, 0] == 0.0 and rep.upper[0, 0] == 0.0


def test_l_diff_antisymmetry(rng):
    vol = 1000.0
    x, y = rng.uniform(0, 10, (7, 3)), rng.uniform(0, 10, (9, 3))
    lx, ly = rng.uniform(0.5, 1, 7), rng.uniform(0.5, 1, 9)
    d = np.linspace(0, 12, 7)
    a = dg.l_function_at(x, lx, d, vol) - dg.l_function_at(y, ly, d, vol)
    b = dg.l_function_at(y, ly, d, vol) - dg.l_function_at(x, lx, d, vol)
    assert np.array_equal(a, -b)


def test_default_distance_grid():
    assert dg.DEFAULT_DISTANCES[0] == 0 and dg.DEFAULT_DISTANCES[-1] == 200
    assert len(dg.DEFAULT_DISTANCES) == 101
