"""Bayesian log-Gaussian Cox process regression for multi-study 3D point patterns."""

from .errors import (ConfigError, CoxMetaError, DataError, EmbeddingError, IntegratorDiverged,
                     IntensityOverflow, NumericError)
from .grid import VoxelGrid, build_grid, world_to_voxel, world_to_voxels
from .kernel import SpectralKernel, drho_apply, make_kernel, sqrt_apply
from .model import LGCPModel, ModelState, PriorConfig, StudySet, pack, unpack
from .sampler import ChainDraws, HmcConfig, adapt_stepsize, hmc_step, leapfrog, run_chain

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "CoxMetaError", "DataError", "EmbeddingError", "IntegratorDiverged",
    "IntensityOverflow", "NumericError", "VoxelGrid", "build_grid", "world_to_voxel",
    "world_to_voxels", "SpectralKernel", "drho_apply", "make_kernel", "sqrt_apply",
    "LGCPModel", "ModelState", "PriorConfig", "StudySet", "pack", "unpack", "ChainDraws",
    "HmcConfig", "adapt_stepsize", "hmc_step", "leapfrog", "run_chain",
]
