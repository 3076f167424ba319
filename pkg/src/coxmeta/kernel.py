"""FFT operators for the power-exponential correlation on the embedding torus.

The correlation matrix of a stationary field on a regular box is block
Toeplitz; wrapping offsets to their minimum image on a torus of at least twice
the box size makes it block circulant, hence diagonalised by the 3D DFT. All
operators here act on arrays of the torus shape ``(mz, my, mx)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.fft as sfft

from .errors import EmbeddingError
from .grid import VoxelGrid

__all__ = [
    "SpectralKernel",
    "torus_distance_power",
    "base_vector",
    "spectrum",
    "make_kernel",
    "sqrt_apply",
    "drho_apply",
    "correlation_apply",
]

CLAMP_RTOL = 1e-6
IMAG_RTOL = 1e-8


@dataclass(frozen=True, eq=False)
class SpectralKernel:
    """Eigenvalues of the embedded correlation operator.

    ``phi`` and ``psi`` hold the non-redundant half spectrum produced by a
    real FFT (last axis of length ``mx // 2 + 1``). ``psi`` is the spectrum of
    the circulant with base ``d**delta * exp(-rho * d**delta)``, i.e.
    ``-d(phi)/d(rho)``; it is ``None`` when derivatives were not requested.
    """

    rho: float
    delta: float
    shape: tuple
    phi: np.ndarray
    psi: np.ndarray | None
    min_phi: float
    workers: int = 1

    @property
    def sqrt_phi(self) -> np.ndarray:
        return np.sqrt(self.phi)

    def eigenvalues(self) -> np.ndarray:
        """Full length-``V_E`` eigenvalue array (flat, C order of the torus)."""
        mx = self.shape[-1]
        full = np.empty(self.shape)
        h = self.phi.shape[-1]
        full[..., :h] = self.phi
        if mx > h:
            # Hermitian symmetry: X[k] = X[-k] for a real even base
            rest = np.arange(h, mx)
            neg = [(-np.arange(n)) % n for n in self.shape[:-1]]
            src = self.phi[np.ix_(neg[0], neg[1], (-rest) % mx)]
            full[..., h:] = src
        return full.ravel()


_GEOMETRY_CACHE: dict = {}


def torus_distance_power(grid: VoxelGrid, delta: float = 2.0) -> np.ndarray:
    """``d**delta`` for every torus offset, using minimum-image distances in mm."""
    key = (grid.ext_dims, grid.voxel_size_mm, float(delta))
    cached = _GEOMETRY_CACHE.get(key)
    if cached is not None:
        return cached
    a = grid.voxel_size_mm
    axes = []
    for m in grid.ext_shape:
        i = np.arange(m)
        axes.append((a * np.minimum(i, m - i)) ** 2)
    d2 = axes[0][:, None, None] + axes[1][None, :, None] + axes[2][None, None, :]
    out = d2 if delta == 2.0 else d2 ** (delta / 2.0)
    out.setflags(write=False)
    _GEOMETRY_CACHE[key] = out
    return out


def base_vector(grid: VoxelGrid, rho: float, delta: float = 2.0) -> np.ndarray:
    """First row of the embedded circulant: ``exp(-rho * d**delta)`` on the torus."""
    if not rho > 0 or not delta > 0:
        raise ValueError(f"rho and delta must be positive, got rho={rho}, delta={delta}")
    return np.exp(-rho * torus_distance_power(grid, delta))


def _validate(phi: np.ndarray, max_imag: float):
    scale = float(np.max(np.abs(phi)))
    if max_imag > IMAG_RTOL * max(scale, 1e-300):
        raise EmbeddingError("circulant base is not symmetric (complex spectrum)")
    min_phi = float(phi.min())
    if min_phi < 0:
        if -min_phi > CLAMP_RTOL * scale:
            raise EmbeddingError(
                f"embedding is not positive semi-definite (min eigenvalue {min_phi:.3g}, "
                f"max {scale:.3g}); enlarge the embedding torus or increase rho")
        phi = np.maximum(phi, 0.0)
    return phi, min_phi


def spectrum(base: np.ndarray, workers: int = 1):
    """Real eigenvalues of the circulant with the given base.

    Returns ``(phi, min_phi)`` where ``phi`` is the half spectrum with tiny
    negative values clamped to zero. Negative eigenvalues larger than
    ``1e-6 * max(phi)`` in magnitude mean the torus is too small for the
    correlation range and raise :class:`EmbeddingError`.
    """
    spec = sfft.rfftn(base, workers=workers)
    return _validate(spec.real, float(np.max(np.abs(spec.imag))))


def _separable_spectra(grid: VoxelGrid, rho: float):
    """Half spectra of ``exp(-rho d^2)`` and ``d^2 exp(-rho d^2)`` from 1D FFTs.

    With ``delta = 2`` the torus base is a tensor product over axes, so its
    3D DFT is the outer product of the axis DFTs.
    """
    a = grid.voxel_size_mm
    f, g = [], []
    imag = 0.0
    for ax, m in enumerate(grid.ext_shape):
        i = np.arange(m)
        d2 = (a * np.minimum(i, m - i)) ** 2
        e = np.exp(-rho * d2)
        fft = sfft.rfft if ax == 2 else sfft.fft
        fe, fde = fft(e), fft(d2 * e)
        imag = max(imag, float(np.max(np.abs(fe.imag))))
        f.append(fe.real)
        g.append(fde.real)
    fz, fy, fx = f[0][:, None, None], f[1][None, :, None], f[2][None, None, :]
    gz, gy, gx = g[0][:, None, None], g[1][None, :, None], g[2][None, None, :]
    phi = fz * fy * fx
    psi = gz * fy * fx + fz * gy * fx + fz * fy * gx
    return phi, psi, imag * float(np.max(np.abs(phi)))


def make_kernel(grid: VoxelGrid, rho: float, delta: float = 2.0,
                derivative: bool = True, workers: int = 1) -> SpectralKernel:
    """Validated :class:`SpectralKernel` for correlation decay ``rho``."""
    if delta == 2.0 and rho > 0:
        phi, psi, imag = _separable_spectra(grid, rho)
        phi, min_phi = _validate(phi, imag)
        psi = psi if derivative else None
    else:
        dp = torus_distance_power(grid, delta)
        base = base_vector(grid, rho, delta)
        phi, min_phi = spectrum(base, workers=workers)
        psi = sfft.rfftn(dp * base, workers=workers).real if derivative else None
    return SpectralKernel(rho=float(rho), delta=float(delta), shape=grid.ext_shape,
                          phi=phi, psi=psi, min_phi=min_phi, workers=workers)


def _apply_diag(kernel: SpectralKernel, diag: np.ndarray, x: np.ndarray) -> np.ndarray:
    shape_in = np.shape(x)
    arr = np.asarray(x, dtype=float).reshape(kernel.shape)
    spec = sfft.rfftn(arr, workers=kernel.workers)
    spec *= diag
    out = sfft.irfftn(spec, s=kernel.shape, workers=kernel.workers)
    return out.reshape(shape_in)


def sqrt_apply(kernel: SpectralKernel, gamma: np.ndarray) -> np.ndarray:
    """Symmetric square root of the embedded correlation applied to ``gamma``."""
    return _apply_diag(kernel, kernel.sqrt_phi, gamma)


def correlation_apply(kernel: SpectralKernel, x: np.ndarray) -> np.ndarray:
    """Embedded correlation matrix applied to ``x``."""
    return _apply_diag(kernel, kernel.phi, x)


def rho_quotient(kernel: SpectralKernel) -> np.ndarray:
    """``psi / sqrt(phi)`` with zero wherever ``phi`` was clamped to zero."""
    if kernel.psi is None:
        raise ValueError("kernel was built without derivative spectrum")
    root = kernel.sqrt_phi
    out = np.zeros_like(root)
    pos = root > 0
    out[pos] = kernel.psi[pos] / root[pos]
    return out


def drho_apply(kernel: SpectralKernel, gamma: np.ndarray) -> np.ndarray:
    """``Q gamma`` such that ``d sqrt_apply(gamma) / d rho = -Q gamma / 2``."""
    return _apply_diag(kernel, rho_quotient(kernel), gamma)
