"""Stationary velocity field integration and transform application.

A velocity field v is turned into a displacement field u = exp(v) - id by
scaling and squaring: u_0 = v / 2**s, then s self-compositions. The inverse
transform integrates -v. Reverse-mode gradients walk the squaring recursion
backwards over a tape of intermediate fields, so optimization sees the true
Jacobian of the integrator rather than a first-order shortcut.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import MissingTapeError
from .grids import (
    GridSpec,
    LabelMap,
    PROBABILISTIC,
    SampleParts,
    VectorField,
    Volume,
    check_same_grid,
    identity_points,
    interp_values,
    interp_values_and_grads,
    sample_parts,
    scatter_adjoint,
)

__all__ = [
    "IntegrationConfig",
    "Transform",
    "integrate_svf",
    "invert",
    "compose",
    "warp_volume",
    "warp_labels",
    "backprop_warp",
    "backprop_integrate",
]

FORWARD = "forward"
INVERSE = "inverse"
COMPOSITE = "composite"

MAX_SQUARING_STEPS = 12  # guards the backprop tape against runaway memory


@dataclass(frozen=True)
class IntegrationConfig:
    squaring_steps: int = 6

    def __post_init__(self):
        s = int(self.squaring_steps)
        if s < 0 or s > MAX_SQUARING_STEPS:
            raise ValueError(
                f"squaring_steps must be in [0, {MAX_SQUARING_STEPS}], got {self.squaring_steps}"
            )
        object.__setattr__(self, "squaring_steps", s)


@dataclass(frozen=True)
class Transform:
    """A dense transform T(x) = x + disp(x).

    Produced by `integrate_svf`, `invert` or `compose`; `tape` is only
    populated when the integration was asked to retain it for backprop.
    """

    disp: VectorField
    direction: str
    tape: tuple | None = field(default=None, compare=False, repr=False)

    @property
    def grid(self) -> GridSpec:
        return self.disp.grid


# ---------------------------------------------------------------------------
# array-level kernels (flat (3, M) point sets, (3, nx, ny, nz) fields)
# ---------------------------------------------------------------------------


def _flat3(arr: np.ndarray) -> np.ndarray:
    return arr.reshape(3, -1)


def sample_vec(field_arr: np.ndarray, parts: SampleParts) -> np.ndarray:
    """Sample all 3 components of a field at shared precomputed parts."""
    return np.stack([interp_values(field_arr[c].ravel(), parts) for c in range(3)])


def sample_vec_and_jac(field_arr: np.ndarray, parts: SampleParts):
    """Values and the 3x3 spatial Jacobian of the interpolated field."""
    vals = []
    jac = []
    for c in range(3):
        v, g = interp_values_and_grads(field_arr[c].ravel(), parts)
        vals.append(v)
        jac.append(g)
    return np.stack(vals), jac  # jac[c][d] = d(field_c)/d(x_d)


def integrate_array(
    v: np.ndarray, steps: int, need_tape: bool = False
) -> tuple[np.ndarray, list[np.ndarray] | None]:
    """Scaling-and-squaring exponential of a velocity array.

    Returns the displacement and, when requested, the list of pre-step
    fields [u_0 .. u_{steps-1}] consumed by `integrate_vjp`.
    """
    dims = v.shape[1:]
    ident = identity_points(dims)
    u = v * (0.5**steps)
    tape: list[np.ndarray] | None = [] if need_tape else None
    for _ in range(steps):
        if tape is not None:
            tape.append(u)
        pts = ident + _flat3(u)
        parts = sample_parts(dims, pts)
        u = u + sample_vec(u, parts).reshape(u.shape)
    return u, tape


def integrate_vjp(tape: list[np.ndarray], steps: int, upstream: np.ndarray) -> np.ndarray:
    """Pull a displacement-space gradient back to the velocity field."""
    if steps == 0:
        return upstream.copy()
    if tape is None or len(tape) != steps:
        raise MissingTapeError(
            f"integration tape with {steps} entries required, got "
            f"{'none' if tape is None else len(tape)}"
        )
    dims = upstream.shape[1:]
    nvox = int(np.prod(dims))
    ident = identity_points(dims)
    g = _flat3(upstream).copy()
    for k in reversed(range(steps)):
        a = tape[k]
        pts = ident + _flat3(a)
        parts = sample_parts(dims, pts)
        _, jac = sample_vec_and_jac(a, parts)
        g_new = g.copy()
        for c in range(3):
            # field channel: the sampled component c was read at pts
            g_new[c] += scatter_adjoint(parts, g[c], nvox)
        for d in range(3):
            # position channel: pts = x + a, so d(pts_d)/d(a_d) = 1 per voxel
            g_new[d] += jac[0][d] * g[0] + jac[1][d] * g[1] + jac[2][d] * g[2]
        g = g_new
    return (g * (0.5**steps)).reshape(upstream.shape)


def compose_array(ua: np.ndarray, ub: np.ndarray) -> np.ndarray:
    """Displacement of a(b(x)): u_b(x) + u_a sampled at x + u_b(x)."""
    dims = ua.shape[1:]
    pts = identity_points(dims) + _flat3(ub)
    parts = sample_parts(dims, pts)
    return ub + sample_vec(ua, parts).reshape(ua.shape)


def warp_array(data: np.ndarray, u: np.ndarray) -> np.ndarray:
    dims = data.shape
    pts = identity_points(dims) + _flat3(u)
    parts = sample_parts(dims, pts)
    return interp_values(data.ravel(), parts).reshape(dims)


def warp_vjp_positions(data: np.ndarray, u: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Gradient of sum(upstream * warp(data, u)) with respect to u."""
    dims = data.shape
    pts = identity_points(dims) + _flat3(u)
    parts = sample_parts(dims, pts)
    _, (gx, gy, gz) = interp_values_and_grads(data.ravel(), parts)
    up = upstream.ravel()
    return np.stack([gx * up, gy * up, gz * up]).reshape(3, *dims)


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------


def integrate_svf(
    v: VectorField, cfg: IntegrationConfig = IntegrationConfig(), retain_tape: bool = False
) -> Transform:
    """Integrate a stationary velocity field over unit time."""
    u, tape = integrate_array(v.data, cfg.squaring_steps, need_tape=retain_tape)
    return Transform(
        disp=VectorField._wrap(v.grid, u),
        direction=FORWARD,
        tape=tuple(tape) if tape is not None else None,
    )


def invert(
    v: VectorField, cfg: IntegrationConfig = IntegrationConfig(), retain_tape: bool = False
) -> Transform:
    """Integrate the negated velocity field; yields the inverse transform."""
    neg = VectorField._wrap(v.grid, -v.data)
    t = integrate_svf(neg, cfg, retain_tape=retain_tape)
    return Transform(disp=t.disp, direction=INVERSE, tape=t.tape)


def compose(a: Transform, b: Transform) -> Transform:
    """Transform c with c(x) = a(b(x))."""
    check_same_grid(a.grid, b.grid)
    uc = compose_array(a.disp.data, b.disp.data)
    return Transform(disp=VectorField._wrap(a.grid, uc), direction=COMPOSITE)


def warp_volume(vol: Volume, t: Transform) -> Volume:
    """Resample `vol` through the transform: out(x) = vol(x + u(x))."""
    check_same_grid(vol.grid, t.grid)
    return Volume._wrap(vol.grid, warp_array(vol.data, t.disp.data))


def warp_labels(lab: LabelMap, t: Transform) -> LabelMap:
    """Trilinear interpolation of label probabilities; output is probabilistic."""
    check_same_grid(lab.grid, t.grid)
    warped = warp_array(lab.data, t.disp.data)
    # convex weights keep values in [0, 1] bar float rounding
    np.clip(warped, 0.0, 1.0, out=warped)
    return LabelMap._wrap(lab.grid, warped, PROBABILISTIC)


def backprop_warp(vol: Volume, t: Transform, upstream: Volume) -> VectorField:
    """Gradient of sum(upstream * warp_volume(vol, t)) with respect to the displacement."""
    check_same_grid(vol.grid, t.grid, upstream.grid)
    g = warp_vjp_positions(vol.data, t.disp.data, upstream.data)
    return VectorField._wrap(vol.grid, g)


def backprop_integrate(
    v: VectorField, cfg: IntegrationConfig, upstream: VectorField, tape: tuple | None
) -> VectorField:
    """Gradient through `integrate_svf` with respect to the velocity field.

    `tape` is the tape retained by the forward pass (integrate_svf with
    retain_tape=True); passing None raises.
    """
    check_same_grid(v.grid, upstream.grid)
    steps = cfg.squaring_steps
    if steps > 0 and tape is None:
        raise MissingTapeError("forward pass was run without retain_tape=True")
    g = integrate_vjp(list(tape) if tape is not None else None, steps, upstream.data)
    return VectorField._wrap(v.grid, g)
