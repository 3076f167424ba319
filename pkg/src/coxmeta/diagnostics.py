"""Convergence and posterior-predictive diagnostics."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist

from .errors import DataError
from .grid import VoxelGrid, world_to_voxels
from .model import StudySet
from .pointgen import sample_poisson_process, sample_voxel_counts
from .summaries import intensity_draws, region_positions

__all__ = [
    "acf",
    "l_function",
    "l_function_at",
    "ppc_counts",
    "CountCoverage",
    "l_diff_report",
    "LDiffReport",
    "DEFAULT_DISTANCES",
]

DEFAULT_DISTANCES = np.arange(0.0, 200.0 + 1e-9, 2.0)


def acf(series, max_lag: int) -> np.ndarray:
    """Sample autocorrelation for lags ``0..max_lag`` (divide-by-n autocovariance)."""
    x = np.asarray(series, dtype=float).ravel()
    n = x.size
    if not 0 <= max_lag < n:
        raise ValueError(f"max_lag must be in [0, {n - 1}]")
    x = x - x.mean()
    c0 = np.dot(x, x) / n
    if not c0 > 0:
        raise ValueError("series has zero variance")
    out = np.empty(max_lag + 1)
    for k in range(max_lag + 1):
        out[k] = np.dot(x[: n - k], x[k:]) / n / c0
    return out


def l_function_at(points, lam_at_points, distances, domain_volume: float) -> np.ndarray:
    """Inhomogeneous L-function from per-point intensities.

    ``L(d) = [3 / (4 pi |B|) * sum_{y1 != y2} 1{|y1 - y2| <= d} / (lam(y1) lam(y2))]^(1/3)``,
    summing over ordered pairs of distinct points.
    """
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    lam = np.asarray(lam_at_points, dtype=float).ravel()
    d = np.asarray(distances, dtype=float)
    if pts.shape[0] < 2:
        return np.zeros(d.shape)
    if np.any(lam <= 0):
        raise DataError("a point lies in a voxel with zero intensity")
    dist = pdist(pts)
    inv = 1.0 / lam
    n = lam.size
    i, j = np.triu_indices(n, k=1)
    w = inv[i] * inv[j]
    order = np.argsort(dist, kind="stable")
    cum = np.concatenate([[0.0], np.cumsum(w[order])])
    k = np.searchsorted(dist[order], d, side="right")
    total = 2.0 * cum[k]
    return np.cbrt(3.0 * total / (4.0 * np.pi * domain_volume))


def l_function(points, lam: np.ndarray, grid: VoxelGrid, distances=DEFAULT_DISTANCES):
    """L-function of a pattern under a masked intensity field (distances in mm)."""
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    if pts.shape[0] == 0:
        return np.zeros(np.shape(distances))
    pos = grid.compressed[world_to_voxels(grid, pts)]
    if np.any(pos < 0):
        raise DataError("a point lies outside the mask")
    return l_function_at(pts, np.asarray(lam)[pos], distances, grid.domain_volume)


def _study_rows(studies: StudySet):
    rows, inverse = np.unique(studies.z, axis=0, return_inverse=True)
    return rows, inverse.ravel()


@dataclass
class CountCoverage:
    """Posterior-predictive count coverage.

    Attributes
    ----------
    regions : list of str
    lower, upper : ndarray, shape (I, R)
        Predictive interval bounds for each study's region counts.
    observed : ndarray, shape (I, R)
    covered : ndarray of bool, shape (I, R)
    """

    regions: list
    lower: np.ndarray
    upper: np.ndarray
    observed: np.ndarray
    covered: np.ndarray

    @property
    def region_coverage(self) -> dict:
        """Fraction of studies whose count lies inside the interval, per region."""
        return {r: float(self.covered[:, k].mean()) for k, r in enumerate(self.regions)}

    @property
    def study_coverage(self) -> np.ndarray:
        """Fraction of regions covered, per study."""
        return self.covered.mean(axis=1)

    def fraction_studies_covering(self, at_least: float = 0.9) -> float:
        return float(np.mean(self.study_coverage >= at_least))


def ppc_counts(draws, regions: dict, observed: StudySet, rng: np.random.Generator,
               level: float = 0.95, include_brain: bool = True) -> CountCoverage:
    """Compare observed region counts with posterior-predictive replicates.

    For every saved draw a replicate pattern is simulated for each distinct
    covariate row; a study's count in each region is covered when it lies in
    the central ``level`` interval of the replicate counts for its row. The
    whole mask is added as region ``"brain"`` unless ``include_brain`` is false.
    """
    if draws.n_draws == 0:
        raise DataError("no saved field draws")
    grid = draws.grid
    names = (["brain"] if include_brain else []) + list(regions)
    pos = ([np.arange(grid.n_masked)] if include_brain else []) + [
        region_positions(grid, regions[r]) for r in regions]
    rows, inv = _study_rows(observed)
    T, R = draws.n_draws, len(names)
    a = (1.0 - level) / 2
    lower = np.empty((len(rows), R))
    upper = np.empty((len(rows), R))
    for u, z in enumerate(rows):
        lam = intensity_draws(draws, z)
        rep = np.empty((T, R))
        for t in range(T):
            c = sample_voxel_counts(lam[t], grid, rng)
            rep[t] = [c[p].sum() for p in pos]
        lower[u], upper[u] = np.quantile(rep, [a, 1 - a], axis=0)
    obs = np.empty((observed.n_studies, R))
    for i, f in enumerate(observed.foci):
        cnt = np.bincount(grid.compressed[f], minlength=grid.n_masked)
        obs[i] = [cnt[p].sum() for p in pos]
    lo, hi = lower[inv], upper[inv]
    return CountCoverage(names, lo, hi, obs, (obs >= lo) & (obs <= hi))


@dataclass
class LDiffReport:
    """Posterior-predictive L-function differences.

    ``lower``/``upper`` have shape (I, D): the interval of
    ``L(d | observed) - L(d | replicate)`` over draws for each study.
    """

    distances: np.ndarray
    lower: np.ndarray
    upper: np.ndarray

    @property
    def contains_zero(self) -> np.ndarray:
        return (self.lower <= 0.0) & (self.upper >= 0.0)

    def curves(self, rows=None) -> dict:
        """Median bounds and zero-coverage proportion across (a subset of) studies."""
        sel = slice(None) if rows is None else rows
        return {
            "d": self.distances,
            "median_lo": np.median(self.lower[sel], axis=0),
            "median_hi": np.median(self.upper[sel], axis=0),
            "prop_zero": self.contains_zero[sel].mean(axis=0),
        }


def _study_points(studies: StudySet, grid: VoxelGrid, i: int) -> np.ndarray:
    if studies.points is not None:
        return np.asarray(studies.points[i], dtype=float).reshape(-1, 3)
    return grid.centers(studies.foci[i])


def l_diff_report(observed: StudySet, draws, distances=DEFAULT_DISTANCES,
                  rng: np.random.Generator | None = None, level: float = 0.95,
                  replicate=None) -> LDiffReport:
    """L-function differences between each study and replicates from its own intensity.

    ``replicate(lam, grid, rng)`` returns ``(points, voxels)`` for one
    replicate pattern; it defaults to a Poisson process with intensity ``lam``.
    """
    if draws.n_draws == 0:
        raise DataError("no saved field draws")
    rng = rng if rng is not None else np.random.default_rng()
    if replicate is None:
        def replicate(lam, grid, rng):
            return sample_poisson_process(lam, grid, rng, return_voxels=True)
    grid = draws.grid
    d = np.asarray(distances, dtype=float)
    rows, inv = _study_rows(observed)
    T, I = draws.n_draws, observed.n_studies
    a = (1.0 - level) / 2
    lower = np.empty((I, d.size))
    upper = np.empty((I, d.size))
    lam_rows = [intensity_draws(draws, z) for z in rows]
    vol = grid.domain_volume
    for i in range(I):
        lam = lam_rows[inv[i]]
        x = _study_points(observed, grid, i)
        xpos = grid.compressed[observed.foci[i]]
        delta = np.empty((T, d.size))
        for t in range(T):
            l_obs = l_function_at(x, lam[t][xpos], d, vol)
            y, yv = replicate(lam[t], grid, rng)
            l_rep = l_function_at(y, lam[t][grid.compressed[yv]], d, vol)
            delta[t] = l_obs - l_rep
        lower[i], upper[i] = np.quantile(delta, [a, 1 - a], axis=0)
    return LDiffReport(d, lower, upper)
