"""Hamiltonian Monte Carlo with a diagonal mass matrix and reflecting bounds.

The integrator and the Metropolis step work on any target exposing a
``value_and_grad(q) -> (log density, gradient)`` callable. :func:`run_chain`
wires them to an :class:`~coxmeta.model.LGCPModel`, adapting the stepsize
during burn-in and recording traces and thinned latent fields.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import IntegratorDiverged, NumericError
from .grid import VoxelGrid
from .model import LGCPModel, ModelState, pack

log = logging.getLogger(__name__)

__all__ = [
    "HmcConfig",
    "ChainDraws",
    "StepResult",
    "leapfrog",
    "hmc_step",
    "adapt_stepsize",
    "sample",
    "run_chain",
    "lgcp_masses",
]


@dataclass
class HmcConfig:
    """Sampler settings.

    Masses are per parameter block: latent ``gamma`` vectors, ``mu`` and
    global ``beta`` coefficients, ``sigma``, and ``rho_scaled``. Each
    iteration integrates with ``eps * U(1 - eps_jitter, 1 + eps_jitter)``,
    which breaks the periodic trajectories a fixed ``eps * L`` can fall into;
    set it to 0 for a constant step. With ``settle_stepsize`` the stepsize
    kept after burn-in comes from :func:`settle_stepsize` instead of being the
    last adapted value.
    """

    n_iter: int = 10_000
    n_burnin: int = 4_000
    thin: int = 6
    leapfrog_steps: int = 50
    eps0: float = 1e-4
    adapt_window: int = 100
    adapt_every: int = 10
    mass_gamma: float = 1.0
    mass_beta: float = 3.0
    mass_sigma: float = 3.0
    mass_rho: float = 10.0
    eps_jitter: float = 0.1
    settle_stepsize: bool = True
    seed: int = 0
    chain_id: int = 0

    def __post_init__(self):
        if not 0 <= self.n_burnin < self.n_iter:
            raise ValueError("need 0 <= n_burnin < n_iter")
        if self.thin < 1 or self.leapfrog_steps < 1:
            raise ValueError("thin and leapfrog_steps must be >= 1")
        if self.adapt_window < 1 or self.adapt_every < 1:
            raise ValueError("adaptation window and period must be >= 1")
        if min(self.mass_gamma, self.mass_beta, self.mass_sigma, self.mass_rho) <= 0:
            raise ValueError("masses must be positive")
        if not self.eps0 > 0:
            raise ValueError("eps0 must be positive")
        if not 0.0 <= self.eps_jitter < 1.0:
            raise ValueError("eps_jitter must lie in [0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)


class StepResult(NamedTuple):
    q: np.ndarray
    logp: float
    grad: np.ndarray
    accepted: bool
    delta_h: float


def _reflect(q, p, lo, hi):
    """Mirror coordinates that left ``[lo, hi]`` back inside, flipping momentum."""
    for _ in range(64):
        below = q < lo
        above = q > hi
        if not (below.any() or above.any()):
            return
        q[below] = 2 * lo[below] - q[below]
        q[above] = 2 * hi[above] - q[above]
        p[below | above] *= -1
    raise IntegratorDiverged("position kept leaving the bounded region")


def _integrate(q, p, eps, n_steps, value_and_grad, inv_mass, bounds, grad0):
    q = np.array(q, dtype=float)
    p = np.array(p, dtype=float)
    lo, hi = bounds if bounds is not None else (None, None)
    g = grad0
    logp = math.nan
    for step in range(n_steps):
        p += 0.5 * eps * g
        q += eps * inv_mass * p
        if lo is not None:
            _reflect(q, p, lo, hi)
        logp, g = value_and_grad(q)
        if not np.all(np.isfinite(g)):
            raise IntegratorDiverged(f"non-finite gradient at leapfrog step {step + 1}/{n_steps}")
        p += 0.5 * eps * g
    return q, p, logp, g


def leapfrog(q, p, eps: float, n_steps: int, grad_fn: Callable, masses,
             bounds=None):
    """Run ``n_steps`` leapfrog steps of size ``eps``.

    Parameters
    ----------
    q, p : array_like
        Position and momentum.
    grad_fn : callable
        Gradient of the log density.
    masses : array_like
        Diagonal of the mass matrix.
    bounds : (lo, hi) arrays, optional
        Coordinates leaving ``[lo, hi]`` after a drift are reflected back and
        their momentum negated. Use infinities for unbounded coordinates.

    Returns
    -------
    (q, p) after integration.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    inv_mass = 1.0 / np.broadcast_to(np.asarray(masses, dtype=float), np.shape(q))
    q0 = np.asarray(q, dtype=float)
    g0 = np.asarray(grad_fn(q0), dtype=float)
    if not np.all(np.isfinite(g0)):
        raise IntegratorDiverged("non-finite gradient at the starting point")
    if bounds is not None:
        bounds = tuple(np.broadcast_to(np.asarray(b, dtype=float), np.shape(q)) for b in bounds)
    q1, p1, _, _ = _integrate(q0, p, eps, n_steps, lambda x: (math.nan, grad_fn(x)),
                              inv_mass, bounds, g0)
    return q1, p1


def hmc_step(q, logp, grad, eps: float, n_steps: int, value_and_grad: Callable,
             masses, rng: np.random.Generator, bounds=None) -> StepResult:
    """One HMC transition from ``q`` (with cached ``logp`` and ``grad``).

    Momentum is drawn from ``N(0, M)``; the proposal is accepted with
    probability ``min(1, exp(-dH))``, ``H = -log pi(q) + p' M^-1 p / 2``.
    Proposals with ``-inf`` log density and integrator failures are rejected.
    """
    masses = np.broadcast_to(np.asarray(masses, dtype=float), np.shape(q))
    inv_mass = 1.0 / masses
    p0 = rng.standard_normal(np.shape(q)) * np.sqrt(masses)
    u = rng.random()
    h0 = -logp + 0.5 * float(np.sum(p0 * p0 * inv_mass))
    try:
        q1, p1, logp1, g1 = _integrate(q, p0, eps, n_steps, value_and_grad, inv_mass,
                                       bounds, grad)
    except NumericError as exc:
        log.warning("proposal rejected: %s", exc)
        return StepResult(q, logp, grad, False, math.inf)
    if not math.isfinite(logp1):
        return StepResult(q, logp, grad, False, math.inf)
    h1 = -logp1 + 0.5 * float(np.sum(p1 * p1 * inv_mass))
    dh = h1 - h0
    if not math.isfinite(dh):
        return StepResult(q, logp, grad, False, math.inf)
    if dh <= 0 or u < math.exp(-dh):
        return StepResult(q1, logp1, g1, True, dh)
    return StepResult(q, logp, grad, False, dh)


def adapt_stepsize(eps: float, accept_rate: float) -> float:
    """Shrink by 10% below 60% acceptance, grow by 10% above 70%."""
    if not 0.0 <= accept_rate <= 1.0:
        raise ValueError("acceptance rate must lie in [0, 1]")
    # eps * 9 / 10 rounds to the decimal value more often than 0.9 * eps
    if accept_rate < 0.60:
        return eps * 9 / 10
    if accept_rate > 0.70:
        return eps * 11 / 10
    return eps


def settle_stepsize(eps_trace, accepted, target: float = 0.65, n_bins: int = 8) -> float:
    """Stepsize to keep after burn-in, estimated from the late burn-in record.

    The multiplicative rule reacts to a trailing window, so near the end of
    burn-in ``eps`` usually cycles around the target instead of sitting on
    it, and the last value depends on where the cycle stopped. Here the
    iterations are sorted by ``eps`` into ``n_bins`` groups; walking upwards
    from the smallest, the last group before the first whose acceptance falls
    below ``target`` is chosen and its geometric mean ``eps`` returned.
    """
    eps_trace = np.asarray(eps_trace, dtype=float)
    accepted = np.asarray(accepted, dtype=float)
    log_eps = np.log(eps_trace)
    if eps_trace.size < 2 * n_bins or np.ptp(log_eps) < 1e-12:
        return float(eps_trace[-1])
    order = np.argsort(log_eps, kind="stable")
    groups = np.array_split(order, n_bins)
    rates = [accepted[g].mean() for g in groups]
    centres = [log_eps[g].mean() for g in groups]
    pick = 0
    for j, r in enumerate(rates):
        if r < target:
            break
        pick = j
    return float(np.exp(centres[pick]))


def sample(value_and_grad: Callable, q0, config: HmcConfig, masses, bounds=None,
           rng: np.random.Generator | None = None, callback: Callable | None = None,
           keep: bool = True):
    """Run an adaptive HMC chain on an arbitrary target.

    ``callback(t, q, logp, accepted, eps)`` is invoked after every iteration
    (``t`` counts from 1). Returns ``(samples_after_burnin_thinned, accept_flags,
    final_eps)``; with ``keep=False`` the sample array is empty.
    """
    rng = rng if rng is not None else chain_rng(config)
    q = np.array(q0, dtype=float)
    logp, g = value_and_grad(q)
    if not math.isfinite(logp) or not np.all(np.isfinite(g)):
        raise NumericError("log density is not finite at the initial state")
    eps = config.eps0
    flags = np.zeros(config.n_iter, dtype=bool)
    base = np.empty(config.n_iter)
    kept = []
    jitter = config.eps_jitter
    for t in range(1, config.n_iter + 1):
        step = eps * (1.0 + jitter * (2.0 * rng.random() - 1.0)) if jitter else eps
        res = hmc_step(q, logp, g, step, config.leapfrog_steps, value_and_grad, masses, rng,
                       bounds)
        q, logp, g = res.q, res.logp, res.grad
        flags[t - 1] = res.accepted
        base[t - 1] = eps
        if callback is not None:
            callback(t, q, logp, res.accepted, eps)
        if t <= config.n_burnin:
            if t % config.adapt_every == 0:
                window = flags[max(0, t - config.adapt_window):t]
                eps = adapt_stepsize(eps, float(window.mean()))
            if t == config.n_burnin and config.settle_stepsize:
                late = slice(t // 2, t)
                if t - t // 2 >= 2 * config.adapt_window:
                    eps = settle_stepsize(base[late], flags[late])
        elif keep and (t - config.n_burnin) % config.thin == 0:
            kept.append(q.copy())
    return np.array(kept), flags, eps


def chain_rng(config: HmcConfig) -> np.random.Generator:
    """Independent stream per ``(seed, chain_id)``."""
    ss = np.random.SeedSequence(config.seed, spawn_key=(config.chain_id,))
    return np.random.Generator(np.random.PCG64(ss))


# -- LGCP chains -------------------------------------------------------------

def lgcp_masses(model: LGCPModel, config: HmcConfig) -> np.ndarray:
    sl = model.slices()
    m = np.empty(model.dim)
    m[sl["mu"]] = config.mass_beta
    m[sl["sigma"]] = config.mass_sigma
    m[sl["rho_scaled"]] = config.mass_rho
    m[sl["gamma"]] = config.mass_gamma
    m[sl["beta"]] = config.mass_beta
    return m


def lgcp_bounds(model: LGCPModel):
    sl = model.slices()
    lo = np.full(model.dim, -np.inf)
    hi = np.full(model.dim, np.inf)
    r_lo, r_hi = model.rho_bounds()
    lo[sl["rho_scaled"]] = r_lo
    hi[sl["rho_scaled"]] = r_hi
    return lo, hi


@dataclass
class ChainDraws:
    """Output of an LGCP chain.

    Attributes
    ----------
    mu, sigma, rho_scaled : ndarray, shape (n_iter, S)
        Scalar traces, one row per iteration.
    beta : ndarray, shape (n_iter, G)
    logpost, eps : ndarray, shape (n_iter,)
    accepted : ndarray of bool, shape (n_iter,)
    draw_iters : ndarray of int
        1-based iterations at which latent fields were saved.
    fields : ndarray, shape (T, S, V_B)
        Saved spatial effects ``mu_k + sigma_k (R_k^{1/2} gamma_k)`` on masked
        voxels.
    names : list of str
        Covariate names; the first ``S`` are spatial.
    meta : dict
    grid : VoxelGrid, optional
    """

    mu: np.ndarray
    sigma: np.ndarray
    rho_scaled: np.ndarray
    beta: np.ndarray
    logpost: np.ndarray
    accepted: np.ndarray
    eps: np.ndarray
    draw_iters: np.ndarray
    fields: np.ndarray
    names: list
    meta: dict = field(default_factory=dict)
    grid: VoxelGrid | None = None

    @property
    def n_spatial(self) -> int:
        return self.mu.shape[1]

    @property
    def n_draws(self) -> int:
        return self.fields.shape[0]

    @property
    def draw_beta(self) -> np.ndarray:
        """Global coefficients at the saved iterations, shape (T, G)."""
        return self.beta[self.draw_iters - 1]

    def acceptance_rate(self, start: int = 0) -> float:
        return float(self.accepted[start:].mean())


def run_chain(model: LGCPModel, config: HmcConfig, init: ModelState | None = None,
              progress: Callable | None = None) -> ChainDraws:
    """Sample the LGCP posterior with HMC.

    The stepsize adapts every ``adapt_every`` burn-in iterations from the
    acceptance rate over the trailing ``adapt_window`` iterations, then stays
    fixed (see :func:`settle_stepsize`). The run is a deterministic function of the data, the config and
    ``config.seed``.
    """
    state = init if init is not None else model.default_state()
    n, S, G = config.n_iter, model.n_spatial, model.n_global
    sl = model.slices()
    trace = {
        "mu": np.empty((n, S)), "sigma": np.empty((n, S)), "rho_scaled": np.empty((n, S)),
        "beta": np.empty((n, G)), "logpost": np.empty(n), "accepted": np.zeros(n, bool),
        "eps": np.empty(n),
    }
    fields, draw_iters = [], []

    def value_and_grad(q):
        return model.value_and_grad(model.unpack(q))

    def record(t, q, logp, accepted, eps):
        i = t - 1
        trace["mu"][i] = q[sl["mu"]]
        trace["sigma"][i] = q[sl["sigma"]]
        trace["rho_scaled"][i] = q[sl["rho_scaled"]]
        trace["beta"][i] = q[sl["beta"]]
        trace["logpost"][i] = logp
        trace["accepted"][i] = accepted
        trace["eps"][i] = eps
        if t > config.n_burnin and (t - config.n_burnin) % config.thin == 0:
            st = model.unpack(q)
            raw, _ = model.spatial_fields(st)
            fields.append(st.mu[:, None] + st.sigma[:, None] * raw)
            draw_iters.append(t)
        if progress is not None:
            progress(t, logp, accepted, eps)

    q0 = pack(state)
    sample(value_and_grad, q0, config, lgcp_masses(model, config), lgcp_bounds(model),
           chain_rng(config), record, keep=False)
    fields_arr = (np.array(fields) if fields
                  else np.zeros((0, S, model.grid.n_masked)))
    return ChainDraws(
        mu=trace["mu"], sigma=trace["sigma"], rho_scaled=trace["rho_scaled"],
        beta=trace["beta"], logpost=trace["logpost"], accepted=trace["accepted"],
        eps=trace["eps"], draw_iters=np.array(draw_iters, dtype=np.int64),
        fields=fields_arr, names=list(model.studies.names),
        meta={"config": config.to_dict(), "k_star": model.studies.k_star},
        grid=model.grid,
    )
