"""Posterior functionals computed from saved chain draws.

Intensities are rebuilt on demand from the stored spatial effects, so any
covariate row can be summarised from the same draws. A "row" is a full
covariate vector ``z`` (intercept first); an integer ``k`` instead selects
the k-th spatial effect on its own, ``lam = exp(beta_k(v))``.
"""

from __future__ import annotations

import numpy as np

from .errors import DataError
from .grid import VoxelGrid
from .model import StudySet

__all__ = [
    "log_intensity_draws",
    "intensity_draws",
    "region_positions",
    "posterior_intensity_quantiles",
    "expected_count",
    "prob_at_least_one",
    "conditional_focus_prob",
    "interval",
    "standardized_difference",
    "exceedance_prob",
    "empirical_prob_at_least_one",
    "roi_report",
]

DEGENERATE_SD = 1e-12


def _require_draws(draws, n: int = 1):
    if draws.n_draws < n:
        raise DataError(f"need at least {n} saved field draws, have {draws.n_draws}")


def log_intensity_draws(draws, z) -> np.ndarray:
    """Log-intensity on masked voxels for every saved draw, shape (T, V_B)."""
    _require_draws(draws)
    S = draws.n_spatial
    if isinstance(z, (int, np.integer)):
        if not 0 <= z < S:
            raise ValueError(f"spatial effect index {z} out of range [0, {S})")
        return draws.fields[:, int(z)].astype(float)
    z = np.asarray(z, dtype=float)
    n_cols = S + draws.beta.shape[1]
    if z.shape != (n_cols,):
        raise ValueError(f"covariate row must have {n_cols} entries")
    out = np.zeros((draws.n_draws, draws.fields.shape[2]))
    for k in range(S):
        if z[k] != 0.0:
            out += z[k] * draws.fields[:, k]
    if n_cols > S:
        glob = np.sum(draws.draw_beta * z[S:], axis=1)
        out += glob[:, None]
    return out


def intensity_draws(draws, z) -> np.ndarray:
    return np.exp(log_intensity_draws(draws, z))


def region_positions(grid: VoxelGrid, region) -> np.ndarray:
    """Masked-array positions of a region given as linear voxel indices."""
    region = np.asarray(region, dtype=np.int64).ravel()
    if region.size and (region.min() < 0 or region.max() >= grid.n_voxels):
        raise DataError("region index outside the grid")
    pos = grid.compressed[region]
    if np.any(pos < 0):
        raise DataError("region includes voxels outside the mask")
    return pos


def posterior_intensity_quantiles(draws, z, q) -> np.ndarray:
    """Per-voxel posterior quantiles of the intensity, shape (len(q), V_B).

    Uses linear interpolation between order statistics.
    """
    lam = intensity_draws(draws, z)
    return np.quantile(lam, np.atleast_1d(q), axis=0, method="linear")


def expected_count(lam: np.ndarray, region, grid: VoxelGrid) -> np.ndarray:
    """``sum_{v in region} A * lam_v`` over the last axis of ``lam``."""
    pos = region_positions(grid, region)
    return grid.voxel_volume * np.sum(np.asarray(lam)[..., pos], axis=-1)


def prob_at_least_one(draws, region, z) -> np.ndarray:
    """Posterior sample of ``P(N(B) >= 1) = 1 - exp(-Lambda(B))``."""
    lam = intensity_draws(draws, z)
    return -np.expm1(-expected_count(lam, region, draws.grid))


def conditional_focus_prob(draws, region, z) -> np.ndarray:
    """Posterior sample of ``Lambda(B) / Lambda(whole mask)``."""
    lam = intensity_draws(draws, z)
    return expected_count(lam, region, draws.grid) / (
        draws.grid.voxel_volume * np.sum(lam, axis=-1))


def interval(sample, level: float = 0.95):
    """Median and central credible interval ``(p50, lo, hi)``."""
    a = (1.0 - level) / 2
    p = np.quantile(np.asarray(sample), [0.5, a, 1 - a], axis=0)
    return p[0], p[1], p[2]


def _difference_draws(draws, k1, k2) -> np.ndarray:
    return log_intensity_draws(draws, k1) - log_intensity_draws(draws, k2)


def standardized_difference(draws, k1, k2):
    """Posterior mean over sd of ``beta_k1(v) - beta_k2(v)`` per voxel.

    Returns ``(values, degenerate)``; voxels whose sd is below ``1e-12`` get
    value 0 and ``degenerate`` True.
    """
    _require_draws(draws, 2)
    diff = _difference_draws(draws, k1, k2)
    mean = diff.mean(axis=0)
    sd = diff.std(axis=0, ddof=1)
    degenerate = sd < DEGENERATE_SD
    out = np.zeros_like(mean)
    out[~degenerate] = mean[~degenerate] / sd[~degenerate]
    return out, degenerate


def exceedance_prob(draws, k1, k2, threshold: float) -> np.ndarray:
    """Per-voxel posterior ``P(lam1_v - lam2_v > threshold)``."""
    lam1 = intensity_draws(draws, k1)
    lam2 = intensity_draws(draws, k2)
    return np.mean(lam1 - lam2 > threshold, axis=0)


def empirical_prob_at_least_one(studies: StudySet, region, rows=None) -> float:
    """Fraction of studies (optionally a subset of rows) with a focus in ``region``."""
    region = set(np.asarray(region, dtype=np.int64).ravel().tolist())
    idx = range(studies.n_studies) if rows is None else rows
    hits = [any(int(v) in region for v in studies.foci[i]) for i in idx]
    return float(np.mean(hits)) if hits else float("nan")


def matching_studies(studies: StudySet, z) -> np.ndarray:
    """Studies whose spatial covariates equal those of row ``z``."""
    S = studies.n_spatial
    z = np.asarray(z, dtype=float)
    return np.flatnonzero(np.all(studies.z[:, :S] == z[:S], axis=1))


def roi_report(draws, regions: dict, z, studies: StudySet | None = None,
               level: float = 0.95) -> list:
    """One row per ROI: posterior median and interval of ``P(N(B) >= 1)``.

    ``empirical`` is the fraction of studies of the same type (same spatial
    covariates as ``z``) with at least one focus in the ROI.
    """
    rows = []
    match = matching_studies(studies, z) if studies is not None else None
    for name, region in regions.items():
        p50, lo, hi = interval(prob_at_least_one(draws, region, z), level)
        emp = (empirical_prob_at_least_one(studies, region, match)
               if studies is not None else float("nan"))
        rows.append({"roi": name, "p50": float(p50), "p025": float(lo),
                     "p975": float(hi), "empirical": emp})
    return rows
