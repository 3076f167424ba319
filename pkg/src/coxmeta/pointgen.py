"""Forward simulation of point patterns on a voxel grid."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import DataError
from .grid import VoxelGrid
from .kernel import make_kernel
from .model import RHO_SCALE, LGCPModel, ModelState, StudySet

log = logging.getLogger(__name__)

__all__ = [
    "sample_voxel_counts",
    "sample_poisson_process",
    "LGCPTruth",
    "simulate_lgcp_dataset",
    "setup1_covariates",
    "setup2_covariates",
    "RegionMixtureSpec",
    "setup2_spec",
    "simulate_region_mixture",
    "negative_binomial_counts",
]


def sample_voxel_counts(lam: np.ndarray, grid: VoxelGrid, rng: np.random.Generator) -> np.ndarray:
    """Poisson counts per masked voxel with means ``A * lam``."""
    lam = np.asarray(lam, dtype=float)
    if lam.shape[-1] != grid.n_masked:
        raise ValueError(f"intensity has {lam.shape[-1]} voxels, mask has {grid.n_masked}")
    if np.any(lam < 0) or np.any(np.isnan(lam)):
        raise ValueError("intensity must be non-negative")
    return rng.poisson(grid.voxel_volume * lam)


def _place_in_voxels(voxels: np.ndarray, grid: VoxelGrid, rng) -> np.ndarray:
    centers = grid.centers(voxels)
    jitter = rng.random(centers.shape) - 0.5
    return centers + grid.voxel_size_mm * jitter


def sample_poisson_process(lam: np.ndarray, grid: VoxelGrid, rng: np.random.Generator,
                           return_voxels: bool = False):
    """Realise a Poisson process with piecewise-constant intensity ``lam``.

    ``lam`` holds one value per masked voxel. Each voxel receives a
    ``Poisson(A * lam_v)`` number of points placed uniformly in its cube.
    Returns an ``(n, 3)`` array of world coordinates, plus the linear voxel
    index of each point when ``return_voxels`` is true.
    """
    counts = sample_voxel_counts(lam, grid, rng)
    voxels = np.repeat(grid.mask_index, counts)
    pts = _place_in_voxels(voxels, grid, rng)
    return (pts, voxels) if return_voxels else pts


def setup1_covariates(rng: np.random.Generator, n: int) -> dict:
    """Two study types plus one continuous and one binary covariate.

    ``z1 ~ Bernoulli(0.5)``, ``z2 = 1 - z1``, ``z3 ~ U[-1, 1]``,
    ``z4 ~ Bernoulli(0.5)``.
    """
    z1 = rng.integers(0, 2, n).astype(float)
    z3 = rng.uniform(-1.0, 1.0, n)
    z4 = rng.integers(0, 2, n).astype(float)
    return {"z1": z1, "z2": 1.0 - z1, "z3": z3, "z4": z4}


def setup2_covariates(rng: np.random.Generator, n: int) -> dict:
    return {"z3": rng.uniform(-1.0, 1.0, n), "z4": rng.integers(0, 2, n).astype(float)}


@dataclass
class LGCPTruth:
    """Scalar parameters of a simulated LGCP; one entry per spatial effect."""

    mu: list
    sigma: list
    rho_scaled: list
    beta_global: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {k: [float(x) for x in getattr(self, k)]
                for k in ("mu", "sigma", "rho_scaled", "beta_global")}


def _design(cov: dict, spatial: list, global_: list, n: int) -> np.ndarray:
    cols = [np.ones(n)]
    for name in list(spatial) + list(global_):
        if name not in cov:
            raise DataError(f"covariate sampler did not produce column {name!r}")
        cols.append(np.asarray(cov[name], dtype=float))
    return np.column_stack(cols)


def simulate_lgcp_dataset(truth: LGCPTruth, covariates: Callable | dict, n_studies: int,
                          grid: VoxelGrid, rng: np.random.Generator,
                          spatial: list = (), global_: list = (), delta: float = 2.0):
    """Draw latent fields from their prior and sample ``n_studies`` patterns.

    Parameters
    ----------
    truth : LGCPTruth
        ``len(truth.mu) == len(spatial) + 1`` (the intercept field first) and
        ``len(truth.beta_global) == len(global_)``.
    covariates : callable ``(rng, n) -> dict`` or dict of columns
    spatial, global_ : list of str
        Covariate columns with spatially varying and global effects.

    Returns
    -------
    studies : StudySet
    record : dict
        Ground truth: scalars, ``gamma`` on the torus and the masked
        spatial-effect fields.
    """
    spatial, global_ = list(spatial), list(global_)
    S = len(spatial) + 1
    if not (len(truth.mu) == len(truth.sigma) == len(truth.rho_scaled) == S):
        raise ValueError(f"truth must have {S} spatial effects")
    if len(truth.beta_global) != len(global_):
        raise ValueError(f"truth must have {len(global_)} global coefficients")
    cov = covariates(rng, n_studies) if callable(covariates) else covariates
    z = _design(cov, spatial, global_, n_studies)
    gamma = rng.standard_normal((S, grid.n_ext))
    state = ModelState(mu=truth.mu, sigma=truth.sigma, rho_scaled=truth.rho_scaled,
                       gamma=gamma, beta_global=truth.beta_global)
    ids = [f"S{i + 1:04d}" for i in range(n_studies)]
    empty = StudySet(ids, [[] for _ in ids], z, k_star=S - 1,
                     names=["intercept"] + spatial + global_)
    model = LGCPModel(grid, empty, delta=delta)
    kernels = [make_kernel(grid, r / RHO_SCALE, delta, derivative=False) for r in truth.rho_scaled]
    lam = model.intensity(state, kernels)
    raw, _ = model.spatial_fields(state, kernels)
    foci, points = [], []
    for i in range(n_studies):
        pts, vox = sample_poisson_process(lam[i], grid, rng, return_voxels=True)
        foci.append(vox)
        points.append(pts)
    studies = StudySet(ids, foci, z, k_star=S - 1, names=empty.names, points=points)
    record = {
        "truth": truth.to_dict(),
        "gamma": gamma,
        "effects": np.asarray(truth.mu)[:, None] + np.asarray(truth.sigma)[:, None] * raw,
        "expected_counts": lam.sum(axis=1) * grid.voxel_volume,
        "covariates": cov,
    }
    return studies, record


def negative_binomial_counts(mean: np.ndarray, variance: np.ndarray,
                             rng: np.random.Generator) -> np.ndarray:
    """Counts with the given mean and variance.

    Uses size ``r = m**2 / (v - m)`` and success probability ``r / (r + m)``.
    Where ``v <= m`` no negative binomial exists and a Poisson draw is used.
    """
    mean = np.asarray(mean, dtype=float)
    var = np.broadcast_to(np.asarray(variance, dtype=float), mean.shape)
    if np.any(mean < 0):
        raise ValueError("count means must be non-negative")
    out = np.empty(mean.shape, dtype=np.int64)
    over = var > mean
    if np.any(~over):
        log.warning("variance <= mean for %d studies; drawing Poisson counts instead",
                    int(np.sum(~over)))
        out[~over] = rng.poisson(mean[~over])
    if np.any(over):
        m = mean[over]
        r = m ** 2 / (var[over] - m)
        out[over] = rng.negative_binomial(r, r / (r + m))
    return out


@dataclass
class RegionMixtureSpec:
    """Region-mixture generator settings.

    Attributes
    ----------
    types : list of list of (voxel indices, probability)
        For each study type, the regions its foci fall in and their weights.
        The leftover probability goes to the rest of the mask (outside that
        type's regions).
    count_intercept : float
    count_coef : dict
        Mean count is ``count_intercept + sum(coef * z[name])``.
    dispersion : float
        Count variance is ``mean**2 / dispersion``.
    """

    types: list
    count_intercept: float
    count_coef: dict
    dispersion: float = 20.0

    def validate(self, grid: VoxelGrid) -> None:
        if not self.types:
            raise DataError("at least one study type is required")
        for t, regions in enumerate(self.types):
            total = 0.0
            for vox, p in regions:
                vox = np.asarray(vox)
                if vox.size == 0:
                    raise DataError(f"type {t + 1}: empty region")
                if not np.all(grid.mask[vox]):
                    raise DataError(f"type {t + 1}: region extends outside the mask")
                if not 0.0 <= p <= 1.0:
                    raise DataError(f"type {t + 1}: probability {p} outside [0, 1]")
                total += p
            if total > 1.0 + 1e-12:
                raise DataError(f"type {t + 1}: region probabilities sum to {total} > 1")
        if not self.dispersion > 0:
            raise DataError("dispersion must be positive")

    def mean_count(self, cov: dict) -> np.ndarray:
        n = len(next(iter(cov.values()))) if cov else 0
        mu = np.full(n, float(self.count_intercept))
        for name, c in self.count_coef.items():
            mu += c * np.asarray(cov[name], dtype=float)
        return mu


def setup2_spec(right: np.ndarray, left: np.ndarray, shared: np.ndarray,
                dispersion: float = 20.0) -> RegionMixtureSpec:
    """Two-type mixture: 55% in a type-specific region, 30% in a shared one.

    Mean count ``6 + 2 z3 - 1{z4 = 0} + 1{z4 = 1}``, i.e. ``5 + 2 z3 + 2 z4``.
    """
    return RegionMixtureSpec(
        types=[[(right, 0.55), (shared, 0.30)], [(left, 0.55), (shared, 0.30)]],
        count_intercept=5.0, count_coef={"z3": 2.0, "z4": 2.0}, dispersion=dispersion)


def simulate_region_mixture(spec: RegionMixtureSpec, covariates: Callable | dict,
                            n_studies: int, grid: VoxelGrid,
                            rng: np.random.Generator) -> StudySet:
    """Studies whose foci fall in fixed regions with type-specific weights.

    The returned study set has type indicators ``type2..typeT`` as spatial
    covariates and the sampled covariates as global ones.
    """
    spec.validate(grid)
    cov = covariates(rng, n_studies) if callable(covariates) else covariates
    mean = spec.mean_count(cov)
    counts = negative_binomial_counts(mean, mean ** 2 / spec.dispersion, rng)
    n_types = len(spec.types)
    types = rng.integers(0, n_types, n_studies)

    pools = []
    for regions in spec.types:
        vox = [np.asarray(r, dtype=np.int64) for r, _ in regions]
        probs = [float(p) for _, p in regions]
        rest = 1.0 - sum(probs)
        used = np.unique(np.concatenate(vox))
        other = np.setdiff1d(grid.mask_index, used)
        if rest > 1e-12:
            if other.size == 0:
                raise DataError("regions cover the whole mask but leave probability unassigned")
            vox.append(other)
            probs.append(rest)
        probs = np.array(probs) / np.sum(probs)
        pools.append((vox, probs))

    foci, points = [], []
    for i in range(n_studies):
        vox, probs = pools[types[i]]
        which = rng.choice(len(vox), size=counts[i], p=probs)
        chosen = np.array([vox[w][rng.integers(vox[w].size)] for w in which], dtype=np.int64)
        foci.append(chosen)
        points.append(_place_in_voxels(chosen, grid, rng))

    names = ["intercept"] + [f"type{t + 1}" for t in range(1, n_types)] + sorted(cov)
    cols = [np.ones(n_studies)]
    cols += [(types == t).astype(float) for t in range(1, n_types)]
    cols += [np.asarray(cov[k], dtype=float) for k in sorted(cov)]
    return StudySet([f"S{i + 1:04d}" for i in range(n_studies)], foci, np.column_stack(cols),
                    k_star=n_types - 1, names=names, points=points)
