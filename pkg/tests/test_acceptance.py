"""Acceptance criteria, one reported PASS/FAIL line each.

The recovery chain (criterion 5) is the expensive part; criterion 8 reuses
its posterior draws.
"""

import json
import math
import time

import numpy as np
import pytest

from coxmeta import diagnostics as dg
from coxmeta import pointgen
from coxmeta import summaries as sm
from coxmeta.cli import main
from coxmeta.grid import build_grid
from coxmeta.io import _ball_mask
from coxmeta.kernel import correlation_apply, drho_apply, make_kernel, sqrt_apply
from coxmeta.model import LGCPModel, PriorConfig, pack
from coxmeta.sampler import HmcConfig, adapt_stepsize, leapfrog, run_chain, sample
from conftest import fake_draws, random_instance, report
from oracles import (brute_l_function, central_difference, dense_correlation, dense_sqrt,
                     fd_relative_error)

RECOVERY_DATA_SEED = 1
RECOVERY_CHAIN_SEED = 0
RECOVERY_TRUTH = {"mu": -9.0, "sigma": 1.0, "rho_scaled": 1.5, "beta": 0.5}


def test_c1_gradient_matches_finite_differences():
    t0 = time.perf_counter()
    grid, studies, state = random_instance(np.random.default_rng(11), dims=(6, 6, 6),
                                           n_studies=3, k_star=1, n_global=1)
    m = LGCPModel(grid, studies, PriorConfig(tau2=10.0))
    g = m.grad(state)
    fd = central_difference(lambda x: m.log_posterior(m.unpack(x)), pack(state), h=1e-5)
    worst = fd_relative_error(g, fd).max()
    dt = time.perf_counter() - t0
    ok = worst <= 1e-5 and dt < 10
    report("C1 gradient", ok, f"max rel err {worst:.2e} (tol 1e-5), {dt:.1f}s (limit 10s)")
    assert ok


def test_c2_spectral_operators_match_dense_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    grid = build_grid({"dims": [4, 4, 4], "voxel_size_mm": 1.0})
    rho = 0.5
    C = dense_correlation(grid.ext_dims, 1.0, rho)
    R, _ = dense_sqrt(C)
    k = make_kernel(grid, rho)
    gamma = rng.standard_normal(grid.n_ext)
    e_sqrt = np.abs(sqrt_apply(k, gamma) - R @ gamma).max()
    e_two = np.abs(sqrt_apply(k, sqrt_apply(k, gamma)) - C @ gamma).max()
    e_corr = np.abs(correlation_apply(k, gamma) - C @ gamma).max()
    h = 1e-5
    e_fd = 0.0
    for r in (0.4, 0.5, 1.0, 3.0):
        fd = (sqrt_apply(make_kernel(grid, r + h), gamma)
              - sqrt_apply(make_kernel(grid, r - h), gamma)) / (2 * h)
        an = -0.5 * drho_apply(make_kernel(grid, r), gamma)
        e_fd = max(e_fd, (np.abs(an - fd) / np.maximum(np.abs(fd), 1.0)).max())
    dt = time.perf_counter() - t0
    ok = max(e_sqrt, e_two, e_corr) <= 1e-8 and e_fd <= 1e-5 and dt < 30
    report("C2 spectral operators", ok,
           f"sqrt {e_sqrt:.1e}, R^1/2R^1/2 {e_two:.1e}, R {e_corr:.1e} (tol 1e-8); "
           f"d/drho rel {e_fd:.1e} (tol 1e-5); {dt:.1f}s (limit 30s)")
    assert ok


def test_c3_integrator_properties():
    rng = np.random.default_rng(3)
    prec = rng.uniform(0.5, 2.0, 8)
    grad = lambda q: -prec * q
    q0, p0 = rng.standard_normal(8), rng.standard_normal(8)
    q1, p1 = leapfrog(q0, p0, 0.1, 40, grad, np.ones(8))
    q2, p2 = leapfrog(q1, -p1, 0.1, 40, grad, np.ones(8))
    rev = max(np.abs(q2 - q0).max(), np.abs(p2 + p0).max())

    def herr(eps, n):
        q, p = leapfrog(np.array([1.0]), np.array([0.5]), eps, n, lambda x: -x, [1.0])
        return abs(0.5 * (q[0] ** 2 + p[0] ** 2) - 0.5 * (1.0 + 0.25))
    ratio = herr(0.1, 10) / herr(0.05, 20)
    ok = rev <= 1e-10 and 3.5 <= ratio <= 4.5
    report("C3 integrator", ok,
           f"reversibility err {rev:.1e} (tol 1e-10); energy-error ratio {ratio:.3f} "
           "(band [3.5, 4.5])")
    assert ok


def test_c4_sampler_statistical_validity():
    t0 = time.perf_counter()
    cfg = HmcConfig(n_iter=22_000, n_burnin=2_000, thin=1, seed=4)

    def vg(q):
        return -0.5 * float(q @ q), -q
    kept, _, _ = sample(vg, np.zeros(5), cfg, np.ones(5))
    mean_err = np.abs(kept.mean(axis=0)).max()
    var_err = np.abs(kept.var(axis=0) - 1.0).max()
    steps = [adapt_stepsize(0.1, r) for r in (0.5, 0.65, 0.8)]
    dt = time.perf_counter() - t0
    ok = (kept.shape[0] == 20_000 and mean_err <= 0.05 and var_err <= 0.10
          and steps == [0.09, 0.1, 0.11000000000000001] and dt < 60)
    report("C4 sampler validity", ok,
           f"max |mean| {mean_err:.3f} (tol 0.05), max |var-1| {var_err:.3f} (tol 0.10), "
           f"adapt {steps}, {dt:.1f}s (limit 60s)")
    assert ok


@pytest.fixture(scope="module")
def recovery():
    mask = _ball_mask([12, 12, 12], 4.0, [0, 0, 0], radius=24.0)
    grid = build_grid({"dims": [12, 12, 12], "voxel_size_mm": 4.0}, mask.tobytes())
    rng = np.random.default_rng(RECOVERY_DATA_SEED)
    t = RECOVERY_TRUTH
    truth = pointgen.LGCPTruth(mu=[t["mu"]], sigma=[t["sigma"]], rho_scaled=[t["rho_scaled"]],
                               beta_global=[t["beta"]])
    studies, _ = pointgen.simulate_lgcp_dataset(
        truth, lambda r, n: {"x": r.uniform(-1, 1, n)}, 200, grid, rng, [], ["x"])
    model = LGCPModel(grid, studies)
    cfg = HmcConfig(n_iter=6_000, n_burnin=2_000, thin=10, seed=RECOVERY_CHAIN_SEED)
    t0 = time.perf_counter()
    draws = run_chain(model, cfg)
    return grid, studies, draws, time.perf_counter() - t0


@pytest.mark.slow
def test_c5_parameter_recovery(recovery):
    grid, studies, draws, dt = recovery
    post = slice(2_000, None)
    series = {"mu": draws.mu[post, 0], "sigma": draws.sigma[post, 0],
              "rho_scaled": draws.rho_scaled[post, 0], "beta": draws.beta[post, 0]}
    parts, ok = [], True
    for name, x in series.items():
        lo, hi = np.quantile(x, [0.025, 0.975])
        cover = lo <= RECOVERY_TRUTH[name] <= hi
        ok &= cover
        parts.append(f"{name} {RECOVERY_TRUTH[name]} in [{lo:.3f}, {hi:.3f}]"
                     f"{'' if cover else ' MISSED'}")
    acc = draws.acceptance_rate(2_000)
    ok = ok and dt < 20 * 60
    report("C5 parameter recovery", ok,
           f"{'; '.join(parts)}; acceptance {acc:.2f}; {grid.n_masked} voxels, "
           f"{studies.counts.sum()} foci; {dt / 60:.1f} min (limit 20 min)")
    assert ok


@pytest.mark.slow
def test_recovery_acceptance_rate_settles(recovery):
    _, _, draws, _ = recovery
    acc = draws.acceptance_rate(2_000)
    assert 0.55 <= acc <= 0.80, f"post-burn-in acceptance {acc:.3f}"


def test_c6_poisson_moments():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    grid = build_grid({"dims": [6, 6, 6], "voxel_size_mm": 2.0},
                      _ball_mask([6, 6, 6], 2.0, [0, 0, 0]).tobytes())
    lam = rng.uniform(0.001, 0.02, grid.n_masked)
    regions = {"mask": np.arange(grid.n_masked), "half": np.arange(grid.n_masked // 2),
               "voxel": np.array([5])}
    R = 10_000
    counts = {k: np.empty(R) for k in regions}
    for r in range(R):
        c = pointgen.sample_voxel_counts(lam, grid, rng)
        for k, pos in regions.items():
            counts[k][r] = c[pos].sum()
    parts, ok = [], True
    for k, pos in regions.items():
        Lam = grid.voxel_volume * lam[pos].sum()
        z = (counts[k].mean() - Lam) / math.sqrt(Lam / R)
        ok &= abs(z) <= 3
        parts.append(f"{k} z={z:+.2f}")
    dt = time.perf_counter() - t0
    ok = ok and dt < 60
    report("C6 Poisson moments", ok, f"{', '.join(parts)} (|z| <= 3); {dt:.1f}s (limit 60s)")
    assert ok


def test_c7_summary_formulas():
    grid = build_grid({"dims": [4, 4, 2], "voxel_size_mm": 2.0})
    region = np.arange(8)
    ln2 = fake_draws(grid, np.full((1, 1, grid.n_masked),
                                   math.log(math.log(2) / (8 * grid.voxel_volume))))
    p = float(sm.prob_at_least_one(ln2, region, 0)[0])
    rng = np.random.default_rng(7)
    d = fake_draws(grid, rng.normal(size=(12, 2, grid.n_masked)))
    b1, b2 = np.arange(0, 10), np.arange(10, 25)
    add = np.abs(sm.conditional_focus_prob(d, b1, 0) + sm.conditional_focus_prob(d, b2, 0)
                 - sm.conditional_focus_prob(d, np.arange(25), 0)).max()
    a, _ = sm.standardized_difference(d, 0, 1)
    b, _ = sm.standardized_difference(d, 1, 0)
    anti = np.abs(a + b).max()
    ok = abs(p - 0.5) <= 1e-15 and add <= 1e-12 and anti == 0.0
    report("C7 summary formulas", ok,
           f"P(N>=1 | Lambda=ln2) = {p!r}; additivity err {add:.1e}; antisymmetry err {anti:.1e}")
    assert ok


@pytest.mark.slow
def test_c8_diagnostics_self_consistency(recovery):
    grid, studies, draws, _ = recovery
    t0 = time.perf_counter()
    rng = np.random.default_rng(8)
    pts = rng.uniform(0, 40, (50, 3))
    lam = rng.uniform(0.001, 0.01, 50)
    dist = np.arange(0, 60, 2.0)
    brute = np.abs(dg.l_function_at(pts, lam, dist, grid.domain_volume)
                   - brute_l_function(pts, lam, dist, grid.domain_volume)).max()
    cov = dg.ppc_counts(draws, {}, studies, rng)
    brain = cov.region_coverage["brain"]
    d = np.arange(0, 40 + 1e-9, 2.0)
    rep = dg.l_diff_report(studies, draws, d, rng)
    zero = rep.curves()["prop_zero"]
    dt = time.perf_counter() - t0
    ok = brute <= 1e-12 and brain >= 0.80 and zero.min() >= 0.85 and dt < 600
    report("C8 diagnostics", ok,
           f"brain count coverage {brain:.3f} (>= 0.80); min L-diff zero coverage over "
           f"d<=40mm {zero.min():.3f} (>= 0.85); brute-force L err {brute:.1e} (tol 1e-12); "
           f"{draws.n_draws} draws; {dt:.0f}s (limit 600s)")
    assert ok


def test_c9_fit_determinism_across_threads(tmp_path):
    def write(name, obj):
        (tmp_path / name).write_text(json.dumps(obj))
        return str(tmp_path / name)
    write("sim.json", {"grid": {"dims": [6, 6, 5], "voxel_size_mm": 4.0, "mask": "ball"},
                       "output": "data", "n_studies": 20, "covariates": "setup1",
                       "model": {"spatial": ["z1"], "global": ["z3"]},
                       "truth": {"mu": [-6.0, 0.3], "sigma": [0.5, 0.5],
                                 "rho_scaled": [6.0, 6.0], "beta_global": [0.2]}})
    assert main(["simulate", "--config", str(tmp_path / "sim.json")]) == 0
    base = {"grid": {"header": "data/grid.json", "mask": "data/mask.raw"},
            "foci": "data/foci.csv", "covariates": "data/covariates.csv",
            "model": {"spatial": ["z1"], "global": ["z3"]},
            "hmc": {"n_iter": 30, "n_burnin": 10, "thin": 2, "leapfrog_steps": 5,
                    "eps0": 0.01}}
    a = write("a.json", dict(base, output="out1"))
    b = write("b.json", dict(base, output="out2"))
    assert main(["fit", "--config", a, "--seed", "42", "--threads", "1"]) == 0
    assert main(["fit", "--config", b, "--seed", "42", "--threads", "4"]) == 0
    files = sorted(p.name for p in (tmp_path / "out1").iterdir())
    same = [(tmp_path / "out1" / f).read_bytes() == (tmp_path / "out2" / f).read_bytes()
            for f in files]
    ok = all(same) and len(files) >= 7
    report("C9 determinism", ok,
           f"{sum(same)}/{len(files)} output files byte-identical (threads 1 vs 4)")
    assert ok
