"""Voxel grid over the analysis domain and its circulant-embedding torus."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError

__all__ = ["VoxelGrid", "build_grid", "world_to_voxel", "world_to_voxels", "next_pow2"]


def next_pow2(n: int) -> int:
    """Smallest power of two >= n."""
    p = 1
    while p < n:
        p *= 2
    return p


@dataclass(frozen=True, eq=False)
class VoxelGrid:
    """Regular grid of cubic voxels with a boolean domain mask.

    Arrays shaped like the grid use ``(nz, ny, nx)`` C order so that the flat
    index ``x + nx * (y + ny * z)`` runs x fastest.

    Attributes
    ----------
    dims : tuple of int
        ``(nx, ny, nz)``.
    voxel_size_mm : float
        Side length ``a``; each voxel has volume ``a**3``.
    origin_mm : tuple of float
        World coordinate of the centre of voxel ``(0, 0, 0)``.
    mask : ndarray of bool, shape (V,)
        True for voxels whose centre lies in the domain.
    ext_dims : tuple of int
        ``(mx, my, mz)`` of the embedding torus.
    """

    dims: tuple
    voxel_size_mm: float
    origin_mm: tuple
    mask: np.ndarray
    ext_dims: tuple
    mask_index: np.ndarray = field(init=False, repr=False)
    compressed: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=bool).ravel()
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)
        idx = np.flatnonzero(mask)
        idx.setflags(write=False)
        object.__setattr__(self, "mask_index", idx)
        comp = np.full(mask.size, -1, dtype=np.int64)
        comp[idx] = np.arange(idx.size)
        comp.setflags(write=False)
        object.__setattr__(self, "compressed", comp)

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    @property
    def n_masked(self) -> int:
        return int(self.mask_index.size)

    @property
    def n_ext(self) -> int:
        return int(np.prod(self.ext_dims))

    @property
    def voxel_volume(self) -> float:
        return float(self.voxel_size_mm) ** 3

    @property
    def shape(self) -> tuple:
        """Array shape ``(nz, ny, nx)``."""
        return tuple(reversed(self.dims))

    @property
    def ext_shape(self) -> tuple:
        return tuple(reversed(self.ext_dims))

    @property
    def domain_volume(self) -> float:
        return self.n_masked * self.voxel_volume

    def header(self) -> dict:
        return {
            "dims": [int(d) for d in self.dims],
            "voxel_size_mm": float(self.voxel_size_mm),
            "origin_mm": [float(o) for o in self.origin_mm],
        }

    def unravel(self, v):
        """Linear index -> ``(i, j, k)`` voxel coordinates (arrays allowed)."""
        nx, ny, _ = self.dims
        v = np.asarray(v)
        return v % nx, (v // nx) % ny, v // (nx * ny)

    def ravel(self, i, j, k):
        nx, ny, _ = self.dims
        return np.asarray(i) + nx * (np.asarray(j) + ny * np.asarray(k))

    def centers(self, v=None) -> np.ndarray:
        """World coordinates (mm) of voxel centres, shape (n, 3)."""
        if v is None:
            v = np.arange(self.n_voxels)
        i, j, k = self.unravel(v)
        ijk = np.stack([i, j, k], axis=-1).astype(float)
        return np.asarray(self.origin_mm, dtype=float) + self.voxel_size_mm * ijk

    def to_box(self, masked_values: np.ndarray, fill: float = 0.0) -> np.ndarray:
        """Scatter masked values into a full ``(nz, ny, nx)`` array."""
        out = np.full(self.n_voxels, fill, dtype=np.result_type(masked_values, float))
        out[self.mask_index] = masked_values
        return out.reshape(self.shape)


def build_grid(header: dict, mask_bytes: bytes | np.ndarray | None = None,
               ext_dims=None) -> VoxelGrid:
    """Build a :class:`VoxelGrid` from a header dict and raw mask bytes.

    ``mask_bytes=None`` means every voxel is in the domain. The embedding
    torus defaults to the next power of two >= twice each dimension;
    ``ext_dims`` (or an ``"ext_dims"`` key in the header) overrides it and must
    still be at least twice each dimension.
    """
    try:
        dims = tuple(int(d) for d in header["dims"])
        a = float(header["voxel_size_mm"])
        origin = tuple(float(o) for o in header.get("origin_mm", (0.0, 0.0, 0.0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise DataError(f"malformed grid header: {exc}") from exc
    if len(dims) != 3 or min(dims) < 1:
        raise DataError(f"dims must be three positive integers, got {dims}")
    if len(origin) != 3:
        raise DataError("origin_mm must have three entries")
    if not a > 0:
        raise DataError(f"voxel_size_mm must be positive, got {a}")
    n = int(np.prod(dims))
    if mask_bytes is None:
        mask = np.ones(n, dtype=bool)
    else:
        raw = (np.frombuffer(mask_bytes, dtype=np.uint8)
               if isinstance(mask_bytes, (bytes, bytearray, memoryview))
               else np.asarray(mask_bytes).ravel())
        if raw.size != n:
            raise DataError(f"mask has {raw.size} entries, expected {n} for dims {dims}")
        if np.any((raw != 0) & (raw != 1)):
            raise DataError("mask entries must be 0 or 1")
        mask = raw.astype(bool)
    if not mask.any():
        raise DataError("mask has no voxels in the domain")
    ext = ext_dims if ext_dims is not None else header.get("ext_dims")
    if ext is None:
        ext = tuple(next_pow2(2 * d) for d in dims)
    else:
        ext = tuple(int(m) for m in ext)
        if len(ext) != 3 or any(m < 2 * d for m, d in zip(ext, dims)):
            raise DataError(f"ext_dims {ext} must be >= 2 * dims {dims}")
    return VoxelGrid(dims=dims, voxel_size_mm=a, origin_mm=origin, mask=mask, ext_dims=ext)


def world_to_voxel(grid: VoxelGrid, point_mm) -> int:
    """Linear index of the voxel containing ``point_mm``.

    Cells are half-open, ``[centre - a/2, centre + a/2)``, so a point on a
    shared face belongs to the higher-index voxel. Points outside the grid box
    raise :class:`DataError`; unmasked voxels are returned as-is.
    """
    idx = world_to_voxels(grid, np.asarray(point_mm, dtype=float).reshape(1, 3))
    return int(idx[0])


def world_to_voxels(grid: VoxelGrid, points_mm) -> np.ndarray:
    """Vectorised :func:`world_to_voxel` for an ``(n, 3)`` array."""
    pts = np.asarray(points_mm, dtype=float).reshape(-1, 3)
    rel = (pts - np.asarray(grid.origin_mm)) / grid.voxel_size_mm + 0.5
    ijk = np.floor(rel).astype(np.int64)
    dims = np.asarray(grid.dims)
    bad = ~np.all((ijk >= 0) & (ijk < dims) & np.isfinite(rel), axis=1)
    if bad.any():
        p = pts[np.argmax(bad)]
        raise DataError(f"point {tuple(p)} lies outside the grid box")
    return grid.ravel(ijk[:, 0], ijk[:, 1], ijk[:, 2]).astype(np.int64)
