"""Canonical 3D shape as dense voxel grids with trilinear sampling.

Grids are indexed [ix, iy, iz] along the world x/y/z axes. Voxel (i, j, k)
has its center at domain.p_min + (i+0.5, j+0.5, k+0.5) * spacing. Samples
outside the domain box are zero (empty space contributes nothing to a ray).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import DescriptorAbsent, EmptyField


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box given by two opposite corners."""

    p_min: np.ndarray
    p_max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.p_min, dtype=float).reshape(3)
        hi = np.asarray(self.p_max, dtype=float).reshape(3)
        if not np.all(lo < hi):
            raise ValueError("p_min must be strictly below p_max componentwise")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "p_min", lo)
        object.__setattr__(self, "p_max", hi)

    @property
    def extent(self) -> np.ndarray:
        return self.p_max - self.p_min

    @property
    def diagonal(self) -> float:
        return float(np.linalg.norm(self.extent))

    def contains(self, points: np.ndarray) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return np.all((p >= self.p_min) & (p <= self.p_max), axis=-1)


@dataclass
class VoxelField:
    """Density, color, and optional unit-norm descriptor grids over a box."""

    resolution: tuple[int, int, int]
    domain: Aabb
    density: np.ndarray  # (Nx, Ny, Nz), non-negative
    color: np.ndarray  # (Nx, Ny, Nz, 3) in [0, 1]
    descriptors: Optional[np.ndarray] = None  # (Nx, Ny, Nz, C)

    def __post_init__(self):
        nx, ny, nz = self.resolution
        self.density = np.ascontiguousarray(self.density, dtype=np.float32)
        self.color = np.ascontiguousarray(self.color, dtype=np.float32)
        if self.density.shape != (nx, ny, nz):
            raise ValueError("density shape does not match resolution")
        if self.color.shape != (nx, ny, nz, 3):
            raise ValueError("color shape does not match resolution")
        if np.any(self.density < 0):
            raise ValueError("density must be non-negative")
        if np.any(self.color < 0) or np.any(self.color > 1):
            raise ValueError("color channels must lie in [0, 1]")
        if self.descriptors is not None:
            self.descriptors = np.ascontiguousarray(self.descriptors, dtype=np.float32)
            if self.descriptors.shape[:3] != (nx, ny, nz):
                raise ValueError("descriptor shape does not match resolution")
            norms = np.linalg.norm(self.descriptors, axis=-1)
            ok = (norms < 1e-6) | (np.abs(norms - 1.0) <= 1e-4)
            if not np.all(ok):
                raise ValueError("descriptors must be zero or unit-norm")
        for a in (self.density, self.color, self.descriptors):
            if a is not None:
                a.setflags(write=False)

    @property
    def spacing(self) -> np.ndarray:
        return self.domain.extent / np.asarray(self.resolution, dtype=float)

    @property
    def descriptor_dim(self) -> int:
        if self.descriptors is None:
            raise DescriptorAbsent("field stores no descriptor grid")
        return self.descriptors.shape[-1]


def _trilinear(grid: np.ndarray, coords: np.ndarray) -> np.ndarray:
    """Trilinear interpolation in voxel-center index space, zero-padded.

    coords: (N, 3) continuous indices where integer i sits at voxel center i.
    grid: (Nx, Ny, Nz) or (Nx, Ny, Nz, C). Returns (N,) or (N, C) float32.
    """
    nx, ny, nz = grid.shape[:3]
    i0 = np.floor(coords).astype(np.int64)  # (N, 3)
    f = (coords - i0).astype(np.float32)
    scalar = grid.ndim == 3
    flat = grid.reshape(nx * ny * nz, -1)
    out_c = flat.shape[1]
    out = np.zeros((coords.shape[0], out_c), dtype=np.float32)
    dims = np.array([nx, ny, nz])
    for dx in (0, 1):
        wx = f[:, 0] if dx else 1.0 - f[:, 0]
        for dy in (0, 1):
            wy = f[:, 1] if dy else 1.0 - f[:, 1]
            for dz in (0, 1):
                wz = f[:, 2] if dz else 1.0 - f[:, 2]
                idx = i0 + np.array([dx, dy, dz])
                valid = np.all((idx >= 0) & (idx < dims), axis=1)
                w = wx * wy * wz * valid
                lin = (idx[:, 0] * ny + idx[:, 1]) * nz + idx[:, 2]
                np.clip(lin, 0, nx * ny * nz - 1, out=lin)
                out += w[:, None] * flat[lin]
    return out[:, 0] if scalar else out


def sample_many(field: VoxelField, points: np.ndarray, channel: str) -> np.ndarray:
    """Trilinear sample of a channel at world points (N, 3).

    Points outside the domain return exactly zero.
    """
    if channel == "density":
        grid = field.density
    elif channel == "color":
        grid = field.color
    elif channel == "descriptor":
        if field.descriptors is None:
            raise DescriptorAbsent("field stores no descriptor grid")
        grid = field.descriptors
    else:
        raise ValueError(f"unknown channel {channel!r}")
    pts = np.asarray(points, dtype=float).reshape(-1, 3)
    coords = (pts - field.domain.p_min) / field.spacing - 0.5
    vals = _trilinear(grid, coords)
    inside = field.domain.contains(pts)
    if grid.ndim == 3:
        vals = np.where(inside, vals, 0.0)
    else:
        vals = np.where(inside[:, None], vals, 0.0)
    return vals


def sample(field: VoxelField, p, channel: str = "density"):
    """Single-point convenience wrapper around sample_many."""
    v = sample_many(field, np.asarray(p, dtype=float).reshape(1, 3), channel)
    return float(v[0]) if v.ndim == 1 else v[0]


def density_aabb(field: VoxelField, tau: Optional[float] = None) -> Aabb:
    """Tightest box over voxels with density >= tau, padded by half a voxel.

    Default tau is half the peak density.
    """
    if tau is None:
        tau = 0.5 * float(field.density.max())
    hit = np.argwhere(field.density >= tau)
    if hit.size == 0:
        raise EmptyField(f"no voxel reaches density threshold {tau}")
    h = field.spacing
    lo = field.domain.p_min + hit.min(axis=0) * h
    hi = field.domain.p_min + (hit.max(axis=0) + 1) * h
    return Aabb(lo, hi)


def nocs_value(box: Aabb, p: np.ndarray) -> np.ndarray:
    """Normalize points into the box: (p - p_min) / (p_max - p_min), clamped."""
    p = np.asarray(p, dtype=float)
    v = (p - box.p_min) / box.extent
    return np.clip(v, 0.0, 1.0)
