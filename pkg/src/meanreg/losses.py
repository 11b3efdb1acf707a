"""Loss terms for group-wise and fixed-reference registration, with gradients.

Group mode optimizes

    total = reg + lambda1 * def + lambda2 * seg

over velocity fields that are kept in the zero-mean subspace by the
constraint projection (each field minus the group mean). All voxel
reductions inside the losses are means, not sums, so weight defaults carry
across grid sizes.

Fixed-reference mode optimizes

    total = seg_F + alpha * reg_F + beta * def_F + gamma * cons_F

for a single velocity field against a chosen target image; seg_F is zero in
direct-optimization mode (there is no learned segmenter to train) and the
consistency term reuses the weighted inner-product metric.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .diffeo import (
    IntegrationConfig,
    integrate_array,
    integrate_vjp,
    sample_parts,
)
from .errors import GridMismatchError
from .grids import (
    GridSpec,
    LabelMap,
    VectorField,
    Volume,
    check_same_grid,
    group_mean,
    group_mean_scalar,
    identity_points,
    interp_values,
    interp_values_and_grads,
    scatter_adjoint,
    stack_fields,
)

__all__ = [
    "LossWeights",
    "LossReport",
    "project_constraint",
    "implicit_mean_image",
    "loss_reg",
    "loss_def",
    "loss_seg",
    "loss_total_group",
    "loss_total_fixed",
]

_EPS = np.finfo(np.float64).eps


@dataclass(frozen=True)
class LossWeights:
    """Weights of the loss terms.

    lambda1/lambda2 weight the smoothness and segmentation terms in group
    mode; alpha/beta/gamma weight intensity, smoothness and consistency in
    fixed-reference mode; w is the foreground weight of the inner-product
    segmentation metric.
    """

    lambda1: float = 0.01
    lambda2: float = 0.0
    alpha: float = 10.0
    beta: float = 0.1
    gamma: float = 1.0
    w: float = 3.0

    def __post_init__(self):
        for name in ("lambda1", "lambda2", "alpha", "beta", "gamma", "w"):
            val = float(getattr(self, name))
            if not math.isfinite(val) or val < 0.0:
                raise ValueError(f"{name} must be non-negative and finite, got {val}")
            object.__setattr__(self, name, val)


@dataclass(frozen=True)
class LossReport:
    """Value of each loss term at one evaluation.

    `total` always equals the weighted combination of the printed terms;
    `cons` is only nonzero in fixed-reference mode. `per_image` holds the
    per-image intensity residuals against the implicit mean (group mode) or
    the single pair MSE (fixed mode).
    """

    reg: float
    diffusion: float
    seg: float
    total: float
    per_image: tuple[float, ...]
    cons: float = 0.0


# ---------------------------------------------------------------------------
# constraint projection
# ---------------------------------------------------------------------------


def project_array(stack: np.ndarray) -> np.ndarray:
    """Subtract the group mean from every field in `stack` (axis 0).

    The mean is snapped to zero wherever it is below the float rounding
    floor of the inputs; that makes the projection exactly idempotent
    (re-projecting projected fields is a bitwise no-op) while leaving the
    residual group sum at machine-epsilon scale.
    """
    n = stack.shape[0]
    m = group_mean(stack)
    amax = np.abs(stack).max(axis=0)
    snap = (4.0 * n * _EPS) * amax
    m = np.where(np.abs(m) > snap, m, 0.0)
    return stack - m


def project_constraint(fields: Sequence[VectorField]) -> list[VectorField]:
    """Center velocity fields so their per-voxel sum is (numerically) zero."""
    stack, grid = stack_fields(fields)
    out = project_array(stack)
    return [VectorField._wrap(grid, np.ascontiguousarray(out[i])) for i in range(len(fields))]


# ---------------------------------------------------------------------------
# individual loss terms (values only)
# ---------------------------------------------------------------------------


def implicit_mean_image(warped: Sequence[Volume]) -> Volume:
    """Voxel-wise mean of the warped images: the implicit reference."""
    if not warped:
        raise ValueError("need at least one image")
    grid = check_same_grid(*(v.grid for v in warped))
    stack = np.stack([v.data for v in warped])
    return Volume._wrap(grid, group_mean(stack))


def loss_reg(warped: Sequence[Volume]) -> float:
    """Mean squared residual of each warped image against the implicit mean."""
    if len(warped) < 2:
        raise ValueError("intensity loss needs at least two images")
    grid = check_same_grid(*(v.grid for v in warped))
    stack = np.stack([v.data for v in warped])
    ibar = group_mean(stack)
    residuals = [float(np.mean((ibar - s) ** 2)) for s in stack]
    return group_mean_scalar(residuals)


def _diffusion_value_array(v: np.ndarray, spacing) -> float:
    """Mean over voxels and components of the squared forward-difference gradient.

    Forward differences along each axis, divided by the axis spacing; the
    last slice along each axis has no forward neighbor and contributes zero.
    """
    total = 0.0
    for axis, sp in zip(range(3), spacing):
        ax = axis + 1  # component axis is 0
        d = (np.diff(v, axis=ax)) / sp
        total += float(np.sum(d * d))
    n_terms = v.size  # 3 components * nvox
    return total / n_terms


def _diffusion_grad_array(v: np.ndarray, spacing, scale: float) -> np.ndarray:
    """Gradient of scale * diffusion_value(v) with respect to v."""
    g = np.zeros_like(v)
    coef = 2.0 * scale / v.size
    for axis, sp in zip(range(3), spacing):
        ax = axis + 1
        d = np.diff(v, axis=ax) / sp
        dd = coef * d / sp
        plus = [slice(None)] * 4
        minus = [slice(None)] * 4
        plus[ax] = slice(1, None)
        minus[ax] = slice(None, -1)
        g[tuple(plus)] += dd
        g[tuple(minus)] -= dd
    return g


def loss_def(fields: Sequence[VectorField]) -> float:
    """Diffusion (smoothness) penalty averaged over the group."""
    stack, grid = stack_fields(fields)
    vals = [_diffusion_value_array(stack[i], grid.spacing) for i in range(len(fields))]
    return group_mean_scalar(vals)


def _seg_metric_value(label: np.ndarray, pred: np.ndarray, w: float) -> float:
    """Negative weighted inner product between a label map and a prediction."""
    return -float(np.mean(w * label * pred + (1.0 - label) * (1.0 - pred)))


def loss_seg(labels: Sequence[LabelMap], sbar_warped: Sequence[LabelMap], w: float = 3.0) -> float:
    """Segmentation agreement between native labels and the propagated mean-space mask."""
    if len(labels) != len(sbar_warped):
        raise GridMismatchError(
            f"label count {len(labels)} does not match prediction count {len(sbar_warped)}"
        )
    check_same_grid(*(l.grid for l in labels), *(s.grid for s in sbar_warped))
    vals = [_seg_metric_value(l.data, s.data, w) for l, s in zip(labels, sbar_warped)]
    return group_mean_scalar(vals)


# ---------------------------------------------------------------------------
# combined group loss with gradients
# ---------------------------------------------------------------------------


def group_value_and_grad(
    stack: np.ndarray,
    images: Sequence[np.ndarray],
    weights: LossWeights,
    labels: Sequence[np.ndarray] | None = None,
    lambda2: float | None = None,
    steps: int = 6,
    spacing=(1.0, 1.0, 1.0),
    need_grad: bool = True,
):
    """Evaluate the group loss and (optionally) its gradient.

    `stack` holds the raw velocity fields, shape (n, 3, nx, ny, nz); the
    constraint projection is applied internally and the returned gradient is
    taken with respect to the raw fields (i.e. chained through the
    projection, so it has zero group mean). Returns (LossReport, grads).
    """
    n = stack.shape[0]
    dims = stack.shape[2:]
    nvox = int(np.prod(dims))
    lam1 = weights.lambda1
    lam2 = weights.lambda2 if lambda2 is None else float(lambda2)
    use_seg = labels is not None and lam2 > 0.0

    vhat = project_array(stack)
    ident = identity_points(dims)

    fwd_disp = []
    fwd_tape = []
    fwd_parts = []
    warped = []
    img_grads = []
    for i in range(n):
        u, tape = integrate_array(vhat[i], steps, need_tape=need_grad)
        pts = ident + u.reshape(3, -1)
        parts = sample_parts(dims, pts)
        if need_grad:
            vals, grads = interp_values_and_grads(images[i].ravel(), parts)
            img_grads.append(grads)
        else:
            vals = interp_values(images[i].ravel(), parts)
        fwd_disp.append(u)
        fwd_tape.append(tape)
        fwd_parts.append(parts)
        warped.append(vals)

    wstack = np.stack(warped)
    ibar = group_mean(wstack)
    residuals = [float(np.mean((ibar - wv) ** 2)) for wv in warped]
    reg = group_mean_scalar(residuals)

    diffusion = group_mean_scalar(
        [_diffusion_value_array(vhat[i], spacing) for i in range(n)]
    )

    seg = 0.0
    inv_tape = []
    inv_parts = []
    sbar_back = []
    sbar_grads = []
    if use_seg:
        lstack = np.stack(
            [interp_values(labels[i].ravel(), fwd_parts[i]) for i in range(n)]
        )
        np.clip(lstack, 0.0, 1.0, out=lstack)
        sbar = group_mean(lstack)
        seg_vals = []
        for i in range(n):
            w_inv, tape_inv = integrate_array(-vhat[i], steps, need_tape=need_grad)
            pts_inv = ident + w_inv.reshape(3, -1)
            parts_inv = sample_parts(dims, pts_inv)
            if need_grad:
                b, bg = interp_values_and_grads(sbar, parts_inv)
                sbar_grads.append(bg)
            else:
                b = interp_values(sbar, parts_inv)
            lab_flat = labels[i].ravel()
            seg_vals.append(_seg_metric_value(lab_flat, b, weights.w))
            inv_tape.append(tape_inv)
            inv_parts.append(parts_inv)
            sbar_back.append(b)
        seg = group_mean_scalar(seg_vals)

    total = reg + lam1 * diffusion + lam2 * seg
    report = LossReport(
        reg=reg, diffusion=diffusion, seg=seg, total=total, per_image=tuple(residuals)
    )
    if not need_grad:
        return report, None

    grads = np.empty_like(stack)
    gs_bar = np.zeros(nvox) if use_seg else None
    g_upstream_inv = []
    if use_seg:
        for i in range(n):
            # d seg / d sbar_back_i, scaled into the total
            lab_flat = labels[i].ravel()
            gb = (-lam2 / (n * nvox)) * (weights.w * lab_flat - (1.0 - lab_flat))
            gs_bar += scatter_adjoint(inv_parts[i], gb, nvox)
            g_upstream_inv.append(gb)

    for i in range(n):
        # intensity term: d reg / d warped_i = 2/(n*nvox) * (warped_i - ibar)
        g_warp = (2.0 / (n * nvox)) * (warped[i] - ibar)
        gx, gy, gz = img_grads[i]
        g_u = np.stack([gx * g_warp, gy * g_warp, gz * g_warp])
        if use_seg:
            # fusion channel: sbar averages the forward-warped labels
            up = gs_bar / n
            _, (lgx, lgy, lgz) = interp_values_and_grads(labels[i].ravel(), fwd_parts[i])
            g_u[0] += lgx * up
            g_u[1] += lgy * up
            g_u[2] += lgz * up
        g_v = integrate_vjp(fwd_tape[i], steps, g_u.reshape(3, *dims))
        if use_seg:
            bgx, bgy, bgz = sbar_grads[i]
            gb = g_upstream_inv[i]
            g_w = np.stack([bgx * gb, bgy * gb, bgz * gb]).reshape(3, *dims)
            # inverse path integrates -vhat
            g_v -= integrate_vjp(inv_tape[i], steps, g_w)
        g_v += _diffusion_grad_array(vhat[i], spacing, lam1 / n)
        grads[i] = g_v

    # adjoint of the projection: center the gradients across the group
    grads = project_array(grads)
    return report, grads


def loss_total_group(
    fields: Sequence[VectorField],
    images: Sequence[Volume],
    weights: LossWeights = LossWeights(),
    labels: Sequence[LabelMap] | None = None,
    cfg: IntegrationConfig = IntegrationConfig(),
    with_grads: bool = False,
):
    """Combined group loss at the given (raw) velocity fields.

    Applies the constraint projection internally; with `with_grads=True`
    returns (LossReport, [VectorField]) where the gradients are with respect
    to the raw input fields.
    """
    stack, grid = stack_fields(fields)
    check_same_grid(grid, *(im.grid for im in images))
    if len(images) != len(fields):
        raise ValueError(f"{len(images)} images but {len(fields)} fields")
    label_arrs = None
    if labels is not None:
        check_same_grid(grid, *(l.grid for l in labels))
        label_arrs = [l.data for l in labels]
    report, grads = group_value_and_grad(
        stack,
        [im.data for im in images],
        weights,
        labels=label_arrs,
        steps=cfg.squaring_steps,
        spacing=grid.spacing,
        need_grad=with_grads,
    )
    if not with_grads:
        return report
    return report, [VectorField._wrap(grid, np.ascontiguousarray(g)) for g in grads]


# ---------------------------------------------------------------------------
# fixed-reference loss with gradients
# ---------------------------------------------------------------------------


def fixed_value_and_grad(
    v: np.ndarray,
    moving: np.ndarray,
    target: np.ndarray,
    weights: LossWeights,
    moving_label: np.ndarray | None = None,
    target_label: np.ndarray | None = None,
    steps: int = 6,
    spacing=(1.0, 1.0, 1.0),
    need_grad: bool = True,
):
    dims = v.shape[1:]
    nvox = int(np.prod(dims))
    ident = identity_points(dims)

    u, tape = integrate_array(v, steps, need_tape=need_grad)
    pts = ident + u.reshape(3, -1)
    parts = sample_parts(dims, pts)
    if need_grad:
        wvals, wgrads = interp_values_and_grads(moving.ravel(), parts)
    else:
        wvals = interp_values(moving.ravel(), parts)

    tgt = target.ravel()
    resid = wvals - tgt
    reg = float(np.mean(resid * resid))
    diffusion = _diffusion_value_array(v, spacing)

    cons = 0.0
    use_cons = moving_label is not None and target_label is not None and weights.gamma > 0.0
    if use_cons:
        if need_grad:
            lvals, lgrads = interp_values_and_grads(moving_label.ravel(), parts)
        else:
            lvals = interp_values(moving_label.ravel(), parts)
        tl = target_label.ravel()
        cons = _seg_metric_value(tl, lvals, weights.w)

    # seg_F is identically zero in direct-optimization mode
    total = weights.alpha * reg + weights.beta * diffusion + weights.gamma * cons
    report = LossReport(
        reg=reg,
        diffusion=diffusion,
        seg=0.0,
        total=total,
        per_image=(reg,),
        cons=cons,
    )
    if not need_grad:
        return report, None

    g_warp = (2.0 * weights.alpha / nvox) * resid
    gx, gy, gz = wgrads
    g_u = np.stack([gx * g_warp, gy * g_warp, gz * g_warp])
    if use_cons:
        gl = (-weights.gamma / nvox) * (weights.w * tl - (1.0 - tl))
        lgx, lgy, lgz = lgrads
        g_u[0] += lgx * gl
        g_u[1] += lgy * gl
        g_u[2] += lgz * gl
    g_v = integrate_vjp(tape, steps, g_u.reshape(3, *dims))
    g_v += _diffusion_grad_array(v, spacing, weights.beta)
    return report, g_v


def loss_total_fixed(
    moving: Volume,
    target: Volume,
    v: VectorField,
    weights: LossWeights = LossWeights(),
    moving_label: LabelMap | None = None,
    target_label: LabelMap | None = None,
    cfg: IntegrationConfig = IntegrationConfig(),
    with_grads: bool = False,
):
    """Fixed-reference loss for registering `moving` onto `target`."""
    check_same_grid(moving.grid, target.grid, v.grid)
    ml = tl = None
    if (moving_label is None) != (target_label is None):
        raise ValueError("provide both labels or neither")
    if moving_label is not None:
        check_same_grid(moving.grid, moving_label.grid, target_label.grid)
        ml = moving_label.data
        tl = target_label.data
    report, grad = fixed_value_and_grad(
        v.data,
        moving.data,
        target.data,
        weights,
        moving_label=ml,
        target_label=tl,
        steps=cfg.squaring_steps,
        spacing=moving.grid.spacing,
        need_grad=with_grads,
    )
    if not with_grads:
        return report
    return report, VectorField._wrap(v.grid, grad)
