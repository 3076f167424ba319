"""
Simulate, fit and summarise a small meta-analysis
=================================================

Foci for 60 studies are drawn from a log-Gaussian Cox process with one
global covariate. A short HMC chain recovers the scalar parameters and the
posterior intensity, and a posterior predictive check closes the loop.
Runs in about a minute; real analyses need far longer chains.
"""

import logging

import numpy as np

from coxmeta import LGCPModel, build_grid, diagnostics, pointgen, summaries
from coxmeta.sampler import HmcConfig, run_chain

# rejected proposals are logged; early in burn-in they are routine
logging.getLogger("coxmeta.sampler").setLevel(logging.ERROR)

###############################################################################
# A spherical "brain" of 4 mm voxels inside a 10^3 box.

box = build_grid({"dims": [10, 10, 10], "voxel_size_mm": 4.0})
centres = box.centers()
mask = np.linalg.norm(centres - centres.mean(axis=0), axis=1) <= 20.0
grid = build_grid({"dims": [10, 10, 10], "voxel_size_mm": 4.0}, mask.astype(np.uint8))
print(f"{grid.n_masked} voxels in the mask, {grid.domain_volume:.0f} mm^3")

###############################################################################
# Ground truth: one intercept field and a global effect of sample size
# (centred, in [-1, 1]).

truth = pointgen.LGCPTruth(mu=[-8.0], sigma=[0.8], rho_scaled=[2.0], beta_global=[0.6])
rng = np.random.default_rng(2)
studies, record = pointgen.simulate_lgcp_dataset(
    truth, lambda r, n: {"size": r.uniform(-1, 1, n)}, 60, grid, rng, global_=["size"])
print(f"{studies.n_studies} studies, {studies.counts.sum()} foci "
      f"(mean {studies.counts.mean():.1f} per study)")

###############################################################################
# Fit. The default starting stepsize (1e-4) is safe but needs thousands of
# burn-in iterations to grow; a short demo chain starts closer to the answer.
# Adaptation then steers acceptance into the 60-70% band.

model = LGCPModel(grid, studies)
config = HmcConfig(n_iter=800, n_burnin=400, thin=5, leapfrog_steps=30, eps0=0.02, seed=1)
draws = run_chain(model, config)
print(f"acceptance after burn-in {draws.acceptance_rate(400):.2f}, "
      f"final stepsize {draws.eps[-1]:.3g}")

post = slice(400, None)
for name, series, true in [("mu", draws.mu[post, 0], -8.0),
                           ("sigma", draws.sigma[post, 0], 0.8),
                           ("rho_scaled", draws.rho_scaled[post, 0], 2.0),
                           ("beta[size]", draws.beta[post, 0], 0.6)]:
    med, lo, hi = summaries.interval(series)
    print(f"{name:>11}: truth {true:5.2f}   median {med:6.3f}   95% [{lo:.3f}, {hi:.3f}]")

###############################################################################
# Posterior intensity for an average-sized study and the probability of at
# least one focus in a small sphere around the centre.

z = np.array([1.0, 0.0])
median = summaries.posterior_intensity_quantiles(draws, z, 0.5)[0]
print(f"median intensity range {median.min():.2e} .. {median.max():.2e} per mm^3")

centre = np.flatnonzero(np.linalg.norm(centres - centres.mean(axis=0), axis=1) < 9.0)
report = summaries.roi_report(draws, {"centre": centre}, z, studies)[0]
print(f"P(>=1 focus in centre ROI): {report['p50']:.3f} "
      f"[{report['p025']:.3f}, {report['p975']:.3f}], empirical {report['empirical']:.3f}")

###############################################################################
# Posterior predictive check of whole-brain counts.

cov = diagnostics.ppc_counts(draws, {}, studies, np.random.default_rng(3))
print(f"studies whose count lies in its 95% predictive interval: "
      f"{cov.region_coverage['brain']:.0%}")
model.close()
