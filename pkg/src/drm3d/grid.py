"""Voxel grid geometry, cubic patch tiling and map normalization.

Maps are stored as ``(W, L, H)`` arrays indexed ``[i, j, k]`` along x, y, z.
Every flattening in the package (patch vectors, binary files) walks voxels
x-fastest, then y, then z, which is numpy's Fortran order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, OutOfRangeError, ShapeError

AXES = ("x", "y", "z")


@dataclass(frozen=True)
class VoxelGrid:
    dims: tuple[int, int, int]
    voxel_size: float
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        if len(dims) != 3 or min(dims) < 1:
            raise ConfigError(f"grid dims must be three positive integers, got {self.dims}")
        if not self.voxel_size > 0:
            raise ConfigError(f"voxel_size must be positive, got {self.voxel_size}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "voxel_size", float(self.voxel_size))
        object.__setattr__(self, "origin", tuple(float(o) for o in self.origin))

    @classmethod
    def from_extent(cls, extent: Sequence[float], voxel_size: float, origin=(0.0, 0.0, 0.0)) -> "VoxelGrid":
        """Grid whose voxels tile ``extent`` exactly; raises if it does not divide evenly."""
        dims = []
        for axis, e in zip(AXES, extent):
            n = round(e / voxel_size)
            if n < 1 or not math.isclose(n * voxel_size, e, rel_tol=1e-9):
                raise ConfigError(f"extent {e} m along {axis} is not a multiple of voxel size {voxel_size}")
            dims.append(n)
        return cls(tuple(dims), voxel_size, tuple(origin))

    @property
    def num_voxels(self) -> int:
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def extent(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) * self.voxel_size

    @property
    def lower(self) -> np.ndarray:
        return np.asarray(self.origin, dtype=float)

    @property
    def upper(self) -> np.ndarray:
        return self.lower + self.extent

    def contains(self, position) -> bool:
        p = np.asarray(position, dtype=float)
        return bool(np.all(p >= self.lower) and np.all(p <= self.upper))

    def voxel_center(self, index) -> np.ndarray:
        return self.lower + (np.asarray(index, dtype=float) + 0.5) * self.voxel_size

    def centers(self) -> np.ndarray:
        """All voxel centers as a ``(W, L, H, 3)`` array in meters."""
        axes = [self.origin[a] + (np.arange(n) + 0.5) * self.voxel_size for a, n in enumerate(self.dims)]
        gx, gy, gz = np.meshgrid(*axes, indexing="ij")
        return np.stack([gx, gy, gz], axis=-1)

    def normalize_position(self, position) -> np.ndarray:
        """Map meters to the unit cube spanned by the grid."""
        return (np.asarray(position, dtype=float) - self.lower) / self.extent

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "voxel_size": self.voxel_size, "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> "VoxelGrid":
        return cls(tuple(d["dims"]), d["voxel_size"], tuple(d.get("origin", (0.0, 0.0, 0.0))))


def voxel_of(grid: VoxelGrid, position) -> tuple[int, int, int]:
    """Index of the voxel containing ``position``; the upper boundary clamps to the last voxel."""
    p = np.asarray(position, dtype=float)
    idx = []
    for a, axis in enumerate(AXES):
        lo = grid.origin[a]
        hi = lo + grid.dims[a] * grid.voxel_size
        if not lo <= p[a] <= hi:
            raise OutOfRangeError(f"position {p[a]!r} outside grid along {axis} axis [{lo}, {hi}]")
        i = int(math.floor((p[a] - lo) / grid.voxel_size))
        idx.append(min(i, grid.dims[a] - 1))
    return tuple(idx)


def voxels_of(grid: VoxelGrid, positions: np.ndarray) -> np.ndarray:
    """Vectorized :func:`voxel_of` for an ``(N, 3)`` array; returns ``(N, 3)`` int indices."""
    p = np.asarray(positions, dtype=float).reshape(-1, 3)
    lo, hi = grid.lower, grid.upper
    bad = (p < lo) | (p > hi)
    if bad.any():
        row, a = np.argwhere(bad)[0]
        raise OutOfRangeError(f"position {p[row, a]!r} outside grid along {AXES[a]} axis [{lo[a]}, {hi[a]}]")
    idx = np.floor((p - lo) / grid.voxel_size).astype(np.int64)
    return np.minimum(idx, np.asarray(grid.dims) - 1)


@dataclass(frozen=True)
class RadioMap:
    """Received power in dBm over every voxel of ``grid`` at frame ``time_index``."""

    grid: VoxelGrid
    time_index: int
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values)
        if v.shape != self.grid.dims:
            if v.size != self.grid.num_voxels:
                raise ShapeError(f"map has {v.size} values, grid {self.grid.dims} needs {self.grid.num_voxels}")
            v = v.reshape(self.grid.dims, order="F")
        if not np.all(np.isfinite(v)):
            raise ValueError("radio map contains non-finite values")
        v = v.copy()
        v.flags.writeable = False
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class PatchLayout:
    dims: tuple[int, int, int]
    patch_side: int
    padded_dims: tuple[int, int, int]
    counts: tuple[int, int, int]
    patch_origins: tuple[tuple[int, int, int], ...] = field(repr=False)

    @property
    def patch_count(self) -> int:
        return len(self.patch_origins)

    @property
    def patch_volume(self) -> int:
        return self.patch_side ** 3

    def valid_mask(self) -> np.ndarray:
        """``(R, P**3)`` bool array, False on padding voxels."""
        ones = np.ones(self.dims, dtype=bool)
        return to_patches(ones, self, pad_value=False)

    def patch_centers(self, grid: VoxelGrid) -> np.ndarray:
        """Patch centers in meters, ``(R, 3)``; padded patches may extend past the grid."""
        o = np.asarray(self.patch_origins, dtype=float)
        return grid.lower + (o + self.patch_side / 2.0) * grid.voxel_size


def partition_patches(grid: VoxelGrid, patch_side: int) -> PatchLayout:
    if patch_side < 1:
        raise ConfigError(f"patch_side must be >= 1, got {patch_side}")
    counts = tuple(-(-d // patch_side) for d in grid.dims)
    padded = tuple(c * patch_side for c in counts)
    origins = tuple(
        (ix * patch_side, iy * patch_side, iz * patch_side)
        for iz in range(counts[2])
        for iy in range(counts[1])
        for ix in range(counts[0])
    )
    return PatchLayout(grid.dims, patch_side, padded, counts, origins)


def to_patches(values: np.ndarray, layout: PatchLayout, pad_value=0.0) -> np.ndarray:
    """Split ``(..., W, L, H)`` arrays into ``(..., R, P**3)`` patch vectors.

    Patches are numbered x-fastest over the patch lattice and each vector is
    flattened x-fastest inside the patch.
    """
    v = np.asarray(values)
    lead = v.shape[:-3]
    if v.shape[-3:] != layout.dims:
        raise ShapeError(f"map shape {v.shape[-3:]} does not match layout dims {layout.dims}")
    P = layout.patch_side
    nx, ny, nz = layout.counts
    pad = [(0, 0)] * len(lead) + [(0, p - d) for p, d in zip(layout.padded_dims, layout.dims)]
    v = np.pad(v, pad, constant_values=pad_value)
    v = v.reshape(lead + (nx, P, ny, P, nz, P))
    n = len(lead)
    # (..., nz, ny, nx, Pz, Py, Px) so that C-order flattening is x-fastest on both levels
    v = v.transpose(tuple(range(n)) + (n + 4, n + 2, n, n + 5, n + 3, n + 1))
    return v.reshape(lead + (nx * ny * nz, P ** 3))


def from_patches(patches: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Inverse of :func:`to_patches`; padding voxels are discarded."""
    p = np.asarray(patches)
    R, V = layout.patch_count, layout.patch_volume
    if p.shape[-2:] != (R, V):
        raise ShapeError(f"expected (..., {R}, {V}) patch array, got {p.shape}")
    lead = p.shape[:-2]
    n = len(lead)
    P = layout.patch_side
    nx, ny, nz = layout.counts
    v = p.reshape(lead + (nz, ny, nx, P, P, P))
    v = v.transpose(tuple(range(n)) + (n + 2, n + 5, n + 1, n + 4, n, n + 3))
    v = v.reshape(lead + layout.padded_dims)
    W, L, H = layout.dims
    return v[..., :W, :L, :H]


def flatten_patch(radio_map: RadioMap, layout: PatchLayout, r: int, pad_value: float = 0.0) -> np.ndarray:
    if not 0 <= r < layout.patch_count:
        raise OutOfRangeError(f"patch index {r} out of range [0, {layout.patch_count})")
    P = layout.patch_side
    i0, j0, k0 = layout.patch_origins[r]
    block = np.full((P, P, P), pad_value, dtype=np.asarray(radio_map.values).dtype)
    src = radio_map.values[i0:i0 + P, j0:j0 + P, k0:k0 + P]
    block[: src.shape[0], : src.shape[1], : src.shape[2]] = src
    return block.ravel(order="F")


def assemble_patches(patch_values, layout: PatchLayout, grid: VoxelGrid, time_index: int = 0) -> RadioMap:
    vecs = list(patch_values)
    if len(vecs) != layout.patch_count:
        raise ShapeError(f"expected {layout.patch_count} patch vectors, got {len(vecs)}")
    for r, vec in enumerate(vecs):
        if np.shape(vec) != (layout.patch_volume,):
            raise ShapeError(f"patch {r} has shape {np.shape(vec)}, expected ({layout.patch_volume},)")
    return RadioMap(grid, time_index, from_patches(np.stack(vecs), layout))


@dataclass(frozen=True)
class NormStats:
    min_dbm: float
    max_dbm: float

    def __post_init__(self):
        if not (np.isfinite(self.min_dbm) and np.isfinite(self.max_dbm)) or self.max_dbm <= self.min_dbm:
            raise ConfigError(f"degenerate normalization stats min={self.min_dbm} max={self.max_dbm}")

    @property
    def span(self) -> float:
        return self.max_dbm - self.min_dbm

    def normalize(self, values):
        return np.clip((np.asarray(values, dtype=float) - self.min_dbm) / self.span, 0.0, 1.0)

    def denormalize(self, values):
        return np.asarray(values, dtype=float) * self.span + self.min_dbm

    def to_dict(self) -> dict:
        return {"min_dbm": self.min_dbm, "max_dbm": self.max_dbm}


def normalize_map(radio_map: RadioMap, stats: NormStats) -> RadioMap:
    return RadioMap(radio_map.grid, radio_map.time_index, stats.normalize(radio_map.values))


def denormalize_map(radio_map: RadioMap, stats: NormStats) -> RadioMap:
    return RadioMap(radio_map.grid, radio_map.time_index, stats.denormalize(radio_map.values))
