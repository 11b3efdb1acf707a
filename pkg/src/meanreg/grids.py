"""Grid-aligned volumetric types and trilinear sampling primitives.

Conventions shared by the whole package:

* voxel centers sit at integer coordinates ``0 .. n-1`` on each axis and all
  geometry is expressed in voxel units; physical spacing enters only where a
  physical quantity is reported (volumes in mm^3) or differentiated
  (the smoothness regularizer);
* scalar arrays are indexed ``[x, y, z]``; vector fields are indexed
  ``[component, x, y, z]`` with components ordered (x, y, z);
* sampling is trilinear with clamp-to-edge boundaries, so it is defined on
  all of R^3 and reproduces node values exactly;
* reductions across the members of a group sort addends before summation,
  which makes group operations bitwise invariant under permutation of the
  inputs.

Serialization order for payloads is x-fastest: element (x, y, z) lives at
linear index ``x + nx * (y + ny * z)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import NamedTuple, Sequence

import numpy as np

from .errors import GridMismatchError

__all__ = [
    "GridSpec",
    "Volume",
    "VectorField",
    "LabelMap",
    "sample_linear",
    "sample_linear_gradient",
    "field_mean",
    "group_mean",
]


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class GridSpec:
    """Voxel counts and physical spacing of a regular 3D grid."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3:
            raise ValueError(f"dims must have 3 axes, got {self.dims!r}")
        if len(spacing) != 3:
            raise ValueError(f"spacing must have 3 axes, got {self.spacing!r}")
        if any(d < 2 for d in dims):
            raise ValueError(f"dims must be >= 2 on every axis, got {dims}")
        if any(not math.isfinite(s) or s <= 0.0 for s in spacing):
            raise ValueError(f"spacing must be positive and finite, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def nvox(self) -> int:
        nx, ny, nz = self.dims
        return nx * ny * nz

    @property
    def voxel_volume(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


def check_same_grid(*grids: GridSpec) -> GridSpec:
    first = grids[0]
    for g in grids[1:]:
        if g.dims != first.dims:
            raise GridMismatchError(f"grid dims differ: {first.dims} vs {g.dims}")
        if g.spacing != first.spacing:
            raise GridMismatchError(f"grid spacing differs: {first.spacing} vs {g.spacing}")
    return first


@dataclass(frozen=True)
class Volume:
    """A scalar image on a regular voxel grid. Immutable after construction."""

    grid: GridSpec
    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C")
        if arr.shape != self.grid.dims:
            raise ValueError(f"data shape {arr.shape} does not match grid dims {self.grid.dims}")
        if not np.isfinite(arr).all():
            raise ValueError("volume data must be finite")
        object.__setattr__(self, "data", _freeze(arr))

    @classmethod
    def _wrap(cls, grid: GridSpec, arr: np.ndarray) -> "Volume":
        # Internal fast path: adopts arr without copying. The caller guarantees
        # float64 C-order data of the right shape with finite values.
        obj = object.__new__(cls)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "data", _freeze(arr))
        return obj

    @classmethod
    def zeros(cls, grid: GridSpec) -> "Volume":
        return cls._wrap(grid, np.zeros(grid.dims))


@dataclass(frozen=True)
class VectorField:
    """A 3-component vector per voxel, in voxel units.

    Used both for stationary velocity fields and for displacement fields.
    """

    grid: GridSpec
    data: np.ndarray  # shape (3, nx, ny, nz)

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64, order="C")
        if arr.shape != (3, *self.grid.dims):
            raise ValueError(
                f"data shape {arr.shape} does not match (3, *{self.grid.dims})"
            )
        if not np.isfinite(arr).all():
            raise ValueError("vector field data must be finite")
        object.__setattr__(self, "data", _freeze(arr))

    @classmethod
    def _wrap(cls, grid: GridSpec, arr: np.ndarray) -> "VectorField":
        obj = object.__new__(cls)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "data", _freeze(arr))
        return obj

    @classmethod
    def zeros(cls, grid: GridSpec) -> "VectorField":
        return cls._wrap(grid, np.zeros((3, *grid.dims)))


BINARY = "binary"
PROBABILISTIC = "probabilistic"


@dataclass(frozen=True)
class LabelMap:
    """A binary or probabilistic segmentation on a voxel grid."""

    grid: GridSpec
    data: np.ndarray
    kind: str = BINARY

    def __post_init__(self):
        if self.kind not in (BINARY, PROBABILISTIC):
            raise ValueError(f"kind must be '{BINARY}' or '{PROBABILISTIC}', got {self.kind!r}")
        arr = np.array(self.data, dtype=np.float64, order="C")
        if arr.shape != self.grid.dims:
            raise ValueError(f"data shape {arr.shape} does not match grid dims {self.grid.dims}")
        if self.kind == BINARY:
            if not np.all((arr == 0.0) | (arr == 1.0)):
                raise ValueError("binary label map may only contain 0 and 1")
        else:
            if not np.isfinite(arr).all() or arr.min() < 0.0 or arr.max() > 1.0:
                raise ValueError("probabilistic label map values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(arr))

    @classmethod
    def _wrap(cls, grid: GridSpec, arr: np.ndarray, kind: str) -> "LabelMap":
        obj = object.__new__(cls)
        object.__setattr__(obj, "grid", grid)
        object.__setattr__(obj, "data", _freeze(arr))
        object.__setattr__(obj, "kind", kind)
        return obj

    def binarize(self, threshold: float = 0.5) -> "LabelMap":
        """Threshold with a strict inequality: exactly `threshold` maps to 0."""
        return LabelMap._wrap(
            self.grid, (self.data > threshold).astype(np.float64), BINARY
        )


# ---------------------------------------------------------------------------
# sampling kernels
# ---------------------------------------------------------------------------


@lru_cache(maxsize=16)
def identity_points(dims: tuple[int, int, int]) -> np.ndarray:
    """Flat (3, nvox) array of voxel-center coordinates, cached per grid size."""
    nx, ny, nz = dims
    X, Y, Z = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    return _freeze(np.ascontiguousarray(np.stack([X.ravel(), Y.ravel(), Z.ravel()])))


class SampleParts(NamedTuple):
    """Corner indices, interpolation fractions and boundary gates for a point set.

    Corner index arrays are flat indices into a C-order (nx, ny, nz) array;
    the name encodes the (x, y, z) corner offsets. Gates are 1.0 where the
    (unclamped) coordinate lies inside [0, n-1] and 0.0 outside; position
    derivatives vanish in the clamped region.
    """

    f000: np.ndarray
    f100: np.ndarray
    f010: np.ndarray
    f001: np.ndarray
    f110: np.ndarray
    f101: np.ndarray
    f011: np.ndarray
    f111: np.ndarray
    fx: np.ndarray
    fy: np.ndarray
    fz: np.ndarray
    gx: np.ndarray
    gy: np.ndarray
    gz: np.ndarray


def sample_parts(dims: tuple[int, int, int], pts: np.ndarray) -> SampleParts:
    """Precompute everything value/gradient/scatter kernels share for `pts`.

    `pts` has shape (3, M). At a top node (coordinate exactly n-1) the
    neighbor index is clamped onto the node itself, which keeps node values
    exact and makes constant fields interpolate without rounding.
    """
    nx, ny, nz = dims
    px, py, pz = pts

    cx = np.clip(px, 0.0, float(nx - 1))
    cy = np.clip(py, 0.0, float(ny - 1))
    cz = np.clip(pz, 0.0, float(nz - 1))

    ix = cx.astype(np.int64)
    iy = cy.astype(np.int64)
    iz = cz.astype(np.int64)

    fx = cx - ix
    fy = cy - iy
    fz = cz - iz

    sx = ny * nz
    dx = (np.minimum(ix + 1, nx - 1) - ix) * sx
    dy = (np.minimum(iy + 1, ny - 1) - iy) * nz
    dz = np.minimum(iz + 1, nz - 1) - iz

    f000 = (ix * ny + iy) * nz + iz
    f100 = f000 + dx
    f010 = f000 + dy
    f001 = f000 + dz
    f110 = f100 + dy
    f101 = f100 + dz
    f011 = f010 + dz
    f111 = f110 + dz

    gx = ((px >= 0.0) & (px <= float(nx - 1))).astype(np.float64)
    gy = ((py >= 0.0) & (py <= float(ny - 1))).astype(np.float64)
    gz = ((pz >= 0.0) & (pz <= float(nz - 1))).astype(np.float64)

    return SampleParts(f000, f100, f010, f001, f110, f101, f011, f111, fx, fy, fz, gx, gy, gz)


def interp_values(flat_data: np.ndarray, p: SampleParts) -> np.ndarray:
    """Trilinear interpolation of one scalar component at precomputed parts."""
    v000 = flat_data.take(p.f000)
    v100 = flat_data.take(p.f100)
    v010 = flat_data.take(p.f010)
    v001 = flat_data.take(p.f001)
    v110 = flat_data.take(p.f110)
    v101 = flat_data.take(p.f101)
    v011 = flat_data.take(p.f011)
    v111 = flat_data.take(p.f111)

    # lerp as v0 + f*(v1 - v0): exact at f == 0 and on constant data
    w00 = v000 + p.fz * (v001 - v000)
    w01 = v010 + p.fz * (v011 - v010)
    w10 = v100 + p.fz * (v101 - v100)
    w11 = v110 + p.fz * (v111 - v110)
    u0 = w00 + p.fy * (w01 - w00)
    u1 = w10 + p.fy * (w11 - w10)
    return u0 + p.fx * (u1 - u0)


def interp_values_and_grads(
    flat_data: np.ndarray, p: SampleParts
) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    """Interpolated values plus partial derivatives with respect to position.

    Derivatives are piecewise constant per interpolation cell and are zeroed
    where the query point lies outside the grid (clamped region).
    """
    v000 = flat_data.take(p.f000)
    v100 = flat_data.take(p.f100)
    v010 = flat_data.take(p.f010)
    v001 = flat_data.take(p.f001)
    v110 = flat_data.take(p.f110)
    v101 = flat_data.take(p.f101)
    v011 = flat_data.take(p.f011)
    v111 = flat_data.take(p.f111)

    dz00 = v001 - v000
    dz01 = v011 - v010
    dz10 = v101 - v100
    dz11 = v111 - v110

    w00 = v000 + p.fz * dz00
    w01 = v010 + p.fz * dz01
    w10 = v100 + p.fz * dz10
    w11 = v110 + p.fz * dz11

    u0 = w00 + p.fy * (w01 - w00)
    u1 = w10 + p.fy * (w11 - w10)
    val = u0 + p.fx * (u1 - u0)

    ox = 1.0 - p.fx
    oy = 1.0 - p.fy

    ddx = (u1 - u0) * p.gx
    ddy = (ox * (w01 - w00) + p.fx * (w11 - w10)) * p.gy
    ddz = (ox * (oy * dz00 + p.fy * dz01) + p.fx * (oy * dz10 + p.fy * dz11)) * p.gz
    return val, (ddx, ddy, ddz)


def scatter_adjoint(p: SampleParts, weights: np.ndarray, nvox: int) -> np.ndarray:
    """Adjoint of `interp_values`: distribute `weights` onto the 8 corner nodes.

    Returns a flat (nvox,) accumulator. Uses bincount, so the reduction order
    is deterministic.
    """
    wx1 = p.fx
    wx0 = 1.0 - wx1
    wy1 = p.fy
    wy0 = 1.0 - wy1
    wz1 = p.fz
    wz0 = 1.0 - wz1

    a00 = wx0 * wy0
    a01 = wx0 * wy1
    a10 = wx1 * wy0
    a11 = wx1 * wy1

    out = np.bincount(p.f000, weights=weights * (a00 * wz0), minlength=nvox)
    out += np.bincount(p.f001, weights=weights * (a00 * wz1), minlength=nvox)
    out += np.bincount(p.f010, weights=weights * (a01 * wz0), minlength=nvox)
    out += np.bincount(p.f011, weights=weights * (a01 * wz1), minlength=nvox)
    out += np.bincount(p.f100, weights=weights * (a10 * wz0), minlength=nvox)
    out += np.bincount(p.f101, weights=weights * (a10 * wz1), minlength=nvox)
    out += np.bincount(p.f110, weights=weights * (a11 * wz0), minlength=nvox)
    out += np.bincount(p.f111, weights=weights * (a11 * wz1), minlength=nvox)
    return out


# ---------------------------------------------------------------------------
# public sampling API
# ---------------------------------------------------------------------------


def _as_points(points) -> tuple[np.ndarray, bool, tuple]:
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    if pts.shape[-1] != 3:
        raise ValueError(f"points must have a trailing axis of size 3, got shape {pts.shape}")
    lead = pts.shape[:-1]
    flat = np.ascontiguousarray(pts.reshape(-1, 3).T)
    return flat, single, lead


def sample_linear(vol: Volume, points) -> float | np.ndarray:
    """Trilinear sample of `vol` at continuous voxel coordinates.

    `points` is an array-like of shape (..., 3); a single (3,) point returns
    a float. Points outside the grid clamp to the nearest edge voxel.
    """
    flat, single, lead = _as_points(points)
    vals = interp_values(vol.data.ravel(), sample_parts(vol.grid.dims, flat))
    if single:
        return float(vals[0])
    return vals.reshape(lead)


def sample_linear_gradient(vol: Volume, points):
    """Like `sample_linear` but also returns d(value)/d(point).

    The gradient is the derivative of the interpolant, constant inside each
    cell and zero outside the grid.
    """
    flat, single, lead = _as_points(points)
    vals, (gx, gy, gz) = interp_values_and_grads(
        vol.data.ravel(), sample_parts(vol.grid.dims, flat)
    )
    grads = np.stack([gx, gy, gz], axis=-1)
    if single:
        return float(vals[0]), grads[0]
    return vals.reshape(lead), grads.reshape(*lead, 3)


# ---------------------------------------------------------------------------
# group reductions
# ---------------------------------------------------------------------------


def group_mean(stack: np.ndarray) -> np.ndarray:
    """Mean along axis 0, bitwise invariant under permutation of the inputs.

    For n > 2 the addends are sorted per element before summation; two-float
    addition is already commutative.
    """
    n = stack.shape[0]
    if n <= 2:
        return stack.sum(axis=0) / n
    return np.sort(stack, axis=0).sum(axis=0) / n


def group_mean_scalar(values: Sequence[float]) -> float:
    vals = sorted(float(v) for v in values)
    return math.fsum(vals) / len(vals)


def stack_fields(fields: Sequence[VectorField]) -> tuple[np.ndarray, GridSpec]:
    if not fields:
        raise ValueError("need at least one field")
    grid = check_same_grid(*(f.grid for f in fields))
    return np.stack([f.data for f in fields]), grid


def field_mean(fields: Sequence[VectorField]) -> VectorField:
    """Per-voxel arithmetic mean of vector fields sharing one grid."""
    stack, grid = stack_fields(fields)
    return VectorField._wrap(grid, group_mean(stack))
