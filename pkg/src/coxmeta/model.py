"""Log-Gaussian Cox process meta-regression on a voxel grid.

Study ``i`` has log-intensity

    log lam_i(v) = sum_{k <= K*} z_ik (mu_k + sigma_k (R_k^{1/2} gamma_k)_v)
                   + sum_{k > K*} beta_k z_ik

where the first ``K* + 1`` covariates (column 0 is the intercept) have
spatially varying effects and the remainder act globally. Each ``gamma_k``
lives on the whole embedding torus with a standard normal prior; the field is
the restriction of the spectral square-root product to the masked voxels.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .errors import DataError, EmbeddingError, IntensityOverflow
from .grid import VoxelGrid
from .kernel import SpectralKernel, make_kernel, rho_quotient

log = logging.getLogger(__name__)

__all__ = [
    "StudySet",
    "ModelState",
    "PriorConfig",
    "LGCPModel",
    "pack",
    "unpack",
    "packed_size",
    "intensity",
    "log_posterior",
    "grad",
]

LOG_OVERFLOW = math.log(1e300)
RHO_SCALE = 100.0


@dataclass
class StudySet:
    """Point patterns and covariates for ``I`` studies.

    Attributes
    ----------
    ids : list of str
    foci : list of int arrays
        Linear voxel indices of each study's foci (duplicates allowed).
    z : ndarray, shape (I, K + 1)
        Covariate rows; ``z[:, 0]`` must be 1.
    k_star : int
        Columns ``0..k_star`` have spatially varying effects.
    names : list of str
        Column names, ``names[0] == "intercept"``.
    points : list of (n_i, 3) arrays, optional
        World coordinates (mm) of the foci when known.
    """

    ids: list
    foci: list
    z: np.ndarray
    k_star: int
    names: list = None
    points: list = None

    def __post_init__(self):
        self.z = np.atleast_2d(np.asarray(self.z, dtype=float))
        self.foci = [np.asarray(f, dtype=np.int64).ravel() for f in self.foci]
        if self.names is None:
            self.names = ["intercept"] + [f"z{k}" for k in range(1, self.z.shape[1])]
        if len(self.ids) != len(self.foci) or len(self.ids) != self.z.shape[0]:
            raise DataError("ids, foci and covariate rows differ in length")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("duplicate study ids")
        if len(self.names) != self.z.shape[1]:
            raise DataError("number of covariate names does not match z")
        if self.z.shape[0] and not np.all(self.z[:, 0] == 1.0):
            raise DataError("first covariate column must be the intercept (all ones)")
        if not 0 <= self.k_star < self.z.shape[1]:
            raise DataError(f"k_star={self.k_star} out of range for {self.z.shape[1]} columns")
        if not np.all(np.isfinite(self.z)):
            raise DataError("covariates must be finite")

    @property
    def n_studies(self) -> int:
        return len(self.ids)

    @property
    def n_spatial(self) -> int:
        return self.k_star + 1

    @property
    def n_global(self) -> int:
        return self.z.shape[1] - self.k_star - 1

    @property
    def counts(self) -> np.ndarray:
        return np.array([f.size for f in self.foci], dtype=np.int64)

    def validate(self, grid: VoxelGrid) -> None:
        for sid, f in zip(self.ids, self.foci):
            if f.size and (f.min() < 0 or f.max() >= grid.n_voxels):
                raise DataError(f"study {sid}: focus index outside the grid")
            if f.size and not np.all(grid.mask[f]):
                raise DataError(f"study {sid}: focus in a voxel outside the mask")

    def subset(self, rows) -> "StudySet":
        rows = list(rows)
        return StudySet(
            ids=[self.ids[r] for r in rows],
            foci=[self.foci[r] for r in rows],
            z=self.z[rows],
            k_star=self.k_star,
            names=list(self.names),
            points=None if self.points is None else [self.points[r] for r in rows],
        )


@dataclass
class PriorConfig:
    tau2: float = 1e8
    rho_max: float = 100.0

    def __post_init__(self):
        if not (self.tau2 > 0 and self.rho_max > 0):
            raise ValueError("tau2 and rho_max must be positive")


@dataclass
class ModelState:
    """Full parameter set. ``rho_scaled`` is ``100 * rho``."""

    mu: np.ndarray
    sigma: np.ndarray
    rho_scaled: np.ndarray
    gamma: np.ndarray
    beta_global: np.ndarray

    def __post_init__(self):
        self.mu = np.atleast_1d(np.asarray(self.mu, dtype=float))
        self.sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        self.rho_scaled = np.atleast_1d(np.asarray(self.rho_scaled, dtype=float))
        self.gamma = np.atleast_2d(np.asarray(self.gamma, dtype=float))
        self.beta_global = np.atleast_1d(np.asarray(self.beta_global, dtype=float))
        n = self.mu.size
        if self.sigma.size != n or self.rho_scaled.size != n or self.gamma.shape[0] != n:
            raise ValueError("mu, sigma, rho_scaled and gamma disagree on the number of fields")

    @property
    def rho(self) -> np.ndarray:
        return self.rho_scaled / RHO_SCALE

    @property
    def n_spatial(self) -> int:
        return self.mu.size

    @property
    def n_ext(self) -> int:
        return self.gamma.shape[1]

    def copy(self) -> "ModelState":
        return ModelState(self.mu.copy(), self.sigma.copy(), self.rho_scaled.copy(),
                          self.gamma.copy(), self.beta_global.copy())


def packed_size(n_spatial: int, n_ext: int, n_global: int) -> int:
    return n_spatial * (3 + n_ext) + n_global


def pack(state: ModelState) -> np.ndarray:
    """Flatten a state in the fixed order mu, sigma, rho_scaled, gamma, beta."""
    return np.concatenate([state.mu, state.sigma, state.rho_scaled,
                           state.gamma.ravel(), state.beta_global])


def unpack(vec: np.ndarray, n_spatial: int, n_ext: int, n_global: int) -> ModelState:
    vec = np.asarray(vec, dtype=float)
    d = packed_size(n_spatial, n_ext, n_global)
    if vec.shape != (d,):
        raise ValueError(f"packed vector has shape {vec.shape}, expected ({d},)")
    s = n_spatial
    g0 = 3 * s
    g1 = g0 + s * n_ext
    return ModelState(
        mu=vec[:s].copy(),
        sigma=vec[s:2 * s].copy(),
        rho_scaled=vec[2 * s:g0].copy(),
        gamma=vec[g0:g1].reshape(s, n_ext).copy(),
        beta_global=vec[g1:].copy(),
    )


def block_slices(n_spatial: int, n_ext: int, n_global: int) -> dict:
    """Slices of each parameter block inside the packed vector."""
    s = n_spatial
    g1 = 3 * s + s * n_ext
    return {
        "mu": slice(0, s),
        "sigma": slice(s, 2 * s),
        "rho_scaled": slice(2 * s, 3 * s),
        "gamma": slice(3 * s, g1),
        "beta": slice(g1, g1 + n_global),
    }


def _fsum(x) -> float:
    # numpy pairwise summation: fixed reduction order, independent of threads
    return float(np.sum(x))


@dataclass
class _Eval:
    """Intermediate quantities shared by the likelihood and its gradient."""

    fields: np.ndarray          # (S, V_B) restricted R^{1/2} gamma
    spectra: list               # rfft of each gamma
    eta: np.ndarray             # (U, V_B) spatial part of the log-intensity
    expo: np.ndarray            # (U, V_B) exp(eta)
    totals: np.ndarray          # (U,) A * sum_v exp(eta_u)
    glob: np.ndarray            # (I,) global linear predictor
    logp: float = 0.0
    loglik: float = 0.0


class LGCPModel:
    """Binds a grid, a study set and priors; evaluates the posterior.

    Studies sharing the same spatial-covariate row share one spatial field,
    so per-voxel work scales with the number of distinct rows rather than
    the number of studies.

    Parameters
    ----------
    grid : VoxelGrid
    studies : StudySet
    priors : PriorConfig, optional
    delta : float
        Smoothness exponent of the correlation (fixed, default 2).
    threads : int
        Worker threads for FFTs and per-row voxel work. Results do not depend
        on this value.
    """

    def __init__(self, grid: VoxelGrid, studies: StudySet, priors: PriorConfig | None = None,
                 delta: float = 2.0, threads: int = 1):
        studies.validate(grid)
        self.grid = grid
        self.studies = studies
        self.priors = priors or PriorConfig()
        self.delta = float(delta)
        self.threads = max(1, int(threads))
        self._pool = ThreadPoolExecutor(self.threads) if self.threads > 1 else None

        z = studies.z
        S = studies.n_spatial
        self.z_spatial = z[:, :S]
        self.z_global = z[:, S:]
        rows, inverse = np.unique(self.z_spatial, axis=0, return_inverse=True)
        self.rows = rows
        self.row_of_study = inverse.ravel()

        counts = studies.counts
        self.focus_study = np.repeat(np.arange(studies.n_studies), counts)
        allf = np.concatenate(studies.foci) if studies.n_studies else np.zeros(0, np.int64)
        self.focus_pos = grid.compressed[allf.astype(np.int64)]
        nb = grid.n_masked
        # count-weighted focus sums per spatial covariate: sum_i z_il * #foci_i(v)
        self.focus_weight = np.stack([
            np.bincount(self.focus_pos, weights=self.z_spatial[self.focus_study, l], minlength=nb)
            for l in range(S)
        ]) if S else np.zeros((0, nb))
        self.n_focus_z_global = np.array(
            [_fsum(counts * self.z_global[:, g]) for g in range(self.z_global.shape[1])])
        self._kernel_cache: dict = {}

    # -- sizes -----------------------------------------------------------
    @property
    def n_spatial(self) -> int:
        return self.studies.n_spatial

    @property
    def n_global(self) -> int:
        return self.studies.n_global

    @property
    def dim(self) -> int:
        return packed_size(self.n_spatial, self.grid.n_ext, self.n_global)

    def unpack(self, vec) -> ModelState:
        return unpack(vec, self.n_spatial, self.grid.n_ext, self.n_global)

    def slices(self) -> dict:
        return block_slices(self.n_spatial, self.grid.n_ext, self.n_global)

    def rho_bounds(self) -> tuple:
        return 0.0, RHO_SCALE * self.priors.rho_max

    def in_support(self, state: ModelState) -> bool:
        lo, hi = self.rho_bounds()
        return bool(np.all(state.rho_scaled > lo) and np.all(state.rho_scaled <= hi))

    # -- kernels ---------------------------------------------------------
    def kernel(self, rho: float) -> SpectralKernel:
        key = float(rho)
        k = self._kernel_cache.get(key)
        if k is None:
            k = make_kernel(self.grid, key, self.delta, derivative=True, workers=self.threads)
            if len(self._kernel_cache) > 16:
                self._kernel_cache.clear()
            self._kernel_cache[key] = k
        return k

    def kernels(self, state: ModelState) -> list:
        return [self.kernel(r) for r in state.rho]

    # -- core ------------------------------------------------------------
    def _restrict(self, torus: np.ndarray) -> np.ndarray:
        nz, ny, nx = self.grid.shape
        return torus[:nz, :ny, :nx].reshape(-1)[self.grid.mask_index]

    def _pad(self, masked: np.ndarray) -> np.ndarray:
        nz, ny, nx = self.grid.shape
        out = np.zeros(self.grid.ext_shape)
        box = np.zeros(self.grid.n_voxels)
        box[self.grid.mask_index] = masked
        out[:nz, :ny, :nx] = box.reshape(nz, ny, nx)
        return out

    def _map(self, fn, items):
        if self._pool is None:
            return [fn(x) for x in items]
        return list(self._pool.map(fn, items))

    def spatial_fields(self, state: ModelState, kernels=None):
        """Restricted ``R_k^{1/2} gamma_k`` for every spatial effect, shape (S, V_B)."""
        kernels = kernels if kernels is not None else self.kernels(state)
        shp = self.grid.ext_shape
        fields, spectra = [], []
        for k, kern in enumerate(kernels):
            spec = sfft.rfftn(state.gamma[k].reshape(shp), workers=self.threads)
            full = sfft.irfftn(spec * kern.sqrt_phi, s=shp, workers=self.threads)
            fields.append(self._restrict(full))
            spectra.append(spec)
        return np.array(fields).reshape(len(kernels), self.grid.n_masked), spectra

    def _evaluate(self, state: ModelState, kernels=None) -> _Eval:
        fields, spectra = self.spatial_fields(state, kernels)
        effects = state.mu[:, None] + state.sigma[:, None] * fields
        glob = np.zeros(self.studies.n_studies)
        for g in range(self.n_global):
            glob += self.z_global[:, g] * state.beta_global[g]
        A = self.grid.voxel_volume

        def row_eta(u):
            e = np.zeros(self.grid.n_masked)
            for k in range(self.n_spatial):
                zk = self.rows[u, k]
                if zk != 0.0:
                    e += zk * effects[k]
            return e

        eta = np.array(self._map(row_eta, range(len(self.rows)))).reshape(
            len(self.rows), self.grid.n_masked)
        if eta.size:
            worst = eta.max(axis=1)[self.row_of_study] + glob
            if np.any(~np.isfinite(worst)) or np.any(worst > LOG_OVERFLOW):
                i = int(np.argmax(np.where(np.isfinite(worst), worst, np.inf)))
                raise IntensityOverflow(
                    f"intensity overflow (> 1e300) for study {self.studies.ids[i]}")
        expo = np.exp(eta)
        totals = np.array([A * _fsum(x) for x in expo])
        return _Eval(fields=fields, spectra=spectra, eta=eta, expo=expo,
                     totals=totals, glob=glob)

    def _log_prior(self, state: ModelState) -> float:
        t2 = self.priors.tau2
        parts = [-_fsum(state.mu ** 2) / (2 * t2),
                 -_fsum(state.sigma ** 2) / (2 * t2),
                 -_fsum(state.beta_global ** 2) / (2 * t2),
                 -_fsum(state.gamma ** 2) / 2]
        return math.fsum(parts)

    def _log_lik(self, ev: _Eval) -> float:
        integral = math.fsum(ev.totals[self.row_of_study] * np.exp(ev.glob))
        focus_terms = (ev.eta[self.row_of_study[self.focus_study], self.focus_pos]
                       + ev.glob[self.focus_study])
        return -integral + _fsum(focus_terms)

    # -- public evaluation ----------------------------------------------
    def intensity(self, state: ModelState, kernels=None) -> np.ndarray:
        """Per-study intensities on masked voxels, shape (I, V_B)."""
        ev = self._evaluate(state, kernels)
        return ev.expo[self.row_of_study] * np.exp(ev.glob)[:, None]

    def log_posterior(self, state: ModelState, kernels=None) -> float:
        if not self.in_support(state):
            return -math.inf
        ev = self._evaluate(state, kernels)
        return math.fsum([self._log_lik(ev), self._log_prior(state)])

    def value_and_grad(self, state: ModelState, kernels=None):
        """Log posterior and its gradient w.r.t. the packed state."""
        if not self.in_support(state):
            return -math.inf, np.full(self.dim, np.nan)
        kernels = kernels if kernels is not None else self.kernels(state)
        ev = self._evaluate(state, kernels)
        logp = math.fsum([self._log_lik(ev), self._log_prior(state)])

        t2 = self.priors.tau2
        A = self.grid.voxel_volume
        S = self.n_spatial
        shp = self.grid.ext_shape
        w_study = np.exp(ev.glob)
        w_row = np.bincount(self.row_of_study, weights=w_study, minlength=len(self.rows))
        g_mu = np.empty(S)
        g_sigma = np.empty(S)
        g_rho = np.empty(S)
        g_gamma = np.empty((S, self.grid.n_ext))
        for l in range(S):
            # residual sums c_l(v) = sum_i z_il (A lam_iv - #foci_i(v))
            c = np.zeros(self.grid.n_masked)
            for u in range(len(self.rows)):
                coef = self.rows[u, l] * w_row[u]
                if coef != 0.0:
                    c += coef * ev.expo[u]
            c *= A
            c -= self.focus_weight[l]
            g_mu[l] = -_fsum(c) - state.mu[l] / t2
            g_sigma[l] = -_fsum(ev.fields[l] * c) - state.sigma[l] / t2
            kern = kernels[l]
            q_gamma = self._restrict(sfft.irfftn(ev.spectra[l] * rho_quotient(kern), s=shp,
                                                 workers=self.threads))
            g_rho[l] = 0.5 * state.sigma[l] * _fsum(q_gamma * c) / RHO_SCALE
            back = sfft.irfftn(sfft.rfftn(self._pad(c), workers=self.threads) * kern.sqrt_phi,
                               s=shp, workers=self.threads)
            g_gamma[l] = -state.sigma[l] * back.ravel() - state.gamma[l]
        g_beta = np.empty(self.n_global)
        per_study_total = ev.totals[self.row_of_study] * w_study
        for g in range(self.n_global):
            g_beta[g] = (-_fsum(per_study_total * self.z_global[:, g])
                         + self.n_focus_z_global[g] - state.beta_global[g] / t2)
        return logp, np.concatenate([g_mu, g_sigma, g_rho, g_gamma.ravel(), g_beta])

    def grad(self, state: ModelState, kernels=None) -> np.ndarray:
        return self.value_and_grad(state, kernels)[1]

    # -- helpers ---------------------------------------------------------
    def smallest_valid_rho_scaled(self, start: float = 1.0) -> float:
        """``start`` doubled until the torus embedding is positive semi-definite."""
        r = float(start)
        hi = self.rho_bounds()[1]
        while r <= hi:
            try:
                self.kernel(r / RHO_SCALE)
                return r
            except EmbeddingError:
                r *= 2
        raise EmbeddingError("no admissible rho gives a valid embedding; enlarge the torus")

    def default_state(self) -> ModelState:
        """Homogeneous-Poisson starting point: sigma=1, rho_scaled=1, gamma=0.

        If ``rho_scaled=1`` is too long-ranged for the embedding torus it is
        doubled until the embedding is valid.
        """
        S = self.n_spatial
        total = int(self.studies.counts.sum())
        denom = self.studies.n_studies * self.grid.domain_volume
        mu = np.zeros(S)
        mu[0] = math.log(max(total, 1) / denom)
        rho0 = self.smallest_valid_rho_scaled(1.0)
        if rho0 != 1.0:
            log.warning("initial rho_scaled raised to %g for a valid embedding", rho0)
        return ModelState(mu=mu, sigma=np.ones(S), rho_scaled=np.full(S, rho0),
                          gamma=np.zeros((S, self.grid.n_ext)),
                          beta_global=np.zeros(self.n_global))

    def close(self):
        if self._pool is not None:
            self._pool.shutdown()
            self._pool = None


def intensity(state, studies, grid, kernels=None, delta: float = 2.0) -> np.ndarray:
    """Per-study masked intensity fields, shape (I, V_B)."""
    return LGCPModel(grid, studies, delta=delta).intensity(state, kernels)


def log_posterior(state, studies, grid, kernels=None, priors=None, delta: float = 2.0) -> float:
    return LGCPModel(grid, studies, priors, delta=delta).log_posterior(state, kernels)


def grad(state, studies, grid, kernels=None, priors=None, delta: float = 2.0) -> np.ndarray:
    return LGCPModel(grid, studies, priors, delta=delta).grad(state, kernels)
