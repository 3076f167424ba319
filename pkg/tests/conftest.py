import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from coxmeta.grid import build_grid  # noqa: E402
from coxmeta.model import ModelState, StudySet  # noqa: E402


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_instance(rng, dims=(6, 6, 6), a=2.0, n_studies=3, k_star=1, n_global=1,
                    mask_fraction=0.7, rho_scaled=None, mean_foci=3):
    """Random grid, study set and state for gradient and oracle checks."""
    n = int(np.prod(dims))
    mask = (rng.random(n) < mask_fraction).astype(np.uint8)
    mask[0] = 1
    grid = build_grid({"dims": list(dims), "voxel_size_mm": a, "origin_mm": [0, 0, 0]},
                      mask.tobytes())
    S = k_star + 1
    foci = [rng.choice(grid.mask_index, size=rng.poisson(mean_foci)) for _ in range(n_studies)]
    z = np.column_stack([np.ones(n_studies), rng.integers(0, 2, (n_studies, k_star)),
                         rng.uniform(-1, 1, (n_studies, n_global))])
    studies = StudySet([f"s{i}" for i in range(n_studies)], foci, z, k_star=k_star)
    if rho_scaled is None:
        rho_scaled = rng.uniform(15, 60, S)
    state = ModelState(mu=rng.normal(-3, 0.5, S), sigma=rng.normal(0, 0.7, S),
                       rho_scaled=rho_scaled, gamma=rng.standard_normal((S, grid.n_ext)),
                       beta_global=rng.normal(0, 0.5, n_global))
    return grid, studies, state


@pytest.fixture
def small_instance(rng):
    return random_instance(rng)


def fake_draws(grid, fields, beta=None, names=None):
    """ChainDraws holding the given effect fields (T, S, V_B) and global betas (T, G)."""
    from coxmeta.sampler import ChainDraws

    fields = np.asarray(fields, dtype=float)
    T, S, _ = fields.shape
    beta = np.zeros((T, 0)) if beta is None else np.asarray(beta, dtype=float).reshape(T, -1)
    names = names or ["intercept"] + [f"z{k}" for k in range(1, S + beta.shape[1])]
    return ChainDraws(mu=np.zeros((T, S)), sigma=np.ones((T, S)), rho_scaled=np.ones((T, S)),
                      beta=beta, logpost=np.zeros(T), accepted=np.ones(T, bool),
                      eps=np.ones(T), draw_iters=np.arange(1, T + 1), fields=fields,
                      names=names, meta={"k_star": S - 1}, grid=grid)


ACCEPTANCE_LINES = []


def report(criterion: str, ok: bool, detail: str) -> None:
    """Record one acceptance line; it is printed again in the terminal summary."""
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
