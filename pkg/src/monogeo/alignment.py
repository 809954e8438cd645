"""Affine alignment of relative depth predictions.

Two alignment routes are provided:

* :func:`fit_affine_ls` fits scale and shift to a reference depth map in
  closed form (ordinary least squares).
* :func:`optimize_scale_shift_by_normal` aligns a depth prediction against
  a normal prediction, with no reference depth, by making the normals
  derived from the aligned depth agree with the predicted normals.

A hard fact shapes the second route: scaling depth by a constant scales the
unprojected surface radially about the camera center, which changes no
tangent plane, so normal agreement is exactly invariant under
``(scale, shift) -> (c * scale, c * shift)`` for any c > 0. Only the ratio
``shift / scale`` is observable. The optimizer therefore searches that ratio
and fixes the remaining gauge by normalizing the aligned depth to a target
median (1.0 by default), yielding pseudo-metric depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize_scalar

from .geometry import (
    DepthMap,
    Intrinsics,
    NormalMap,
    angular_distance,
    normals_from_depth,
)


class DegenerateFitError(ValueError):
    """Least-squares fit has no usable solution (constant input, or inverted)."""


class UnidentifiableSceneError(RuntimeError):
    """The normal-consistency objective is flat; scale and shift are unconstrained."""


# Objective variation below this (degrees) across the search grid means the
# scene does not constrain the alignment (e.g. a single fronto-parallel plane).
FLAT_OBJECTIVE_DEG = 0.1

_MIN_SHARED_PIXELS = 32


@dataclass
class AffineDepthParams:
    """Depth alignment ``aligned = scale * depth + shift`` with scale > 0."""

    scale: float
    shift: float

    def __post_init__(self):
        if not (np.isfinite(self.scale) and np.isfinite(self.shift)):
            raise ValueError(f"non-finite affine params ({self.scale}, {self.shift})")
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def fit_affine_ls(pred: DepthMap, gt: DepthMap) -> AffineDepthParams:
    """Least-squares (scale, shift) mapping pred onto gt over the shared mask.

    Minimizes ``sum((scale * pred + shift - gt)^2)``. Raises
    :class:`DegenerateFitError` when pred is constant on the shared mask
    (normal equations singular) or the fitted scale is not positive.
    """
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    shared = pred.mask & gt.mask
    n = int(shared.sum())
    if n < 2:
        raise DegenerateFitError(f"need at least 2 shared valid pixels, got {n}")
    p = pred.values[shared]
    g = gt.values[shared]
    p_mean = p.mean()
    g_mean = g.mean()
    var_p = np.mean((p - p_mean) ** 2)
    if var_p <= np.finfo(float).eps * max(1.0, p_mean**2):
        raise DegenerateFitError("prediction is constant on the shared mask; fit is singular")
    scale = float(np.mean((p - p_mean) * (g - g_mean)) / var_p)
    shift = float(g_mean - scale * p_mean)
    if scale <= 0:
        raise DegenerateFitError(
            f"fitted scale {scale:.4g} is not positive; prediction anti-correlates with reference"
        )
    return AffineDepthParams(scale=scale, shift=shift)


def apply_affine(depth: DepthMap, params: AffineDepthParams) -> DepthMap:
    """Apply ``scale * depth + shift`` and mask pixels mapped to non-positive depth."""
    values = params.scale * depth.values + params.shift
    mask = depth.mask & (values > 0)
    return DepthMap(values=values, mask=mask, kind="metric")


def normal_consistency_objective(
    pred_depth: DepthMap,
    pred_normal: NormalMap,
    intrinsics: Intrinsics,
    ratio: float,
    window: int = 5,
) -> float:
    """Mean angular disagreement (degrees) at alignment ratio ``shift/scale``.

    Evaluates ``normals_from_depth(pred_depth + ratio)`` against the
    predicted normals over their shared mask, with a border margin of half
    the fit window excluded. Returns ``inf`` when too few pixels survive.
    """
    values = pred_depth.values + ratio
    mask = pred_depth.mask & (values > 0)
    if int(mask.sum()) < _MIN_SHARED_PIXELS:
        return np.inf
    shifted = DepthMap(values=values, mask=mask, kind="metric")
    derived = normals_from_depth(shifted, intrinsics, window=window)

    shared = derived.mask & pred_normal.mask
    half = window // 2
    interior = np.zeros_like(shared)
    interior[half:-half, half:-half] = True
    shared &= interior
    if int(shared.sum()) < _MIN_SHARED_PIXELS:
        return np.inf
    return float(np.mean(angular_distance(derived.values[shared], pred_normal.values[shared])))


def ratio_search_grid(pred_depth: DepthMap) -> np.ndarray:
    """Candidate shift/scale ratios: zero plus log-spaced offsets both ways.

    Spans from 1e-3 to 1e2 times the median prediction magnitude, which
    covers the same territory as a scale grid of [1e-2, 1e2] against shifts
    up to one median.
    """
    med = float(np.median(np.abs(pred_depth.valid_values())))
    if med == 0 or not np.isfinite(med):
        med = 1.0
    mags = med * np.logspace(-3.0, 2.0, 26)
    return np.unique(np.concatenate([[0.0], mags, -mags]))


def optimize_scale_shift_by_normal(
    pred_depth: DepthMap,
    pred_normal: NormalMap,
    intrinsics: Intrinsics,
    window: int = 5,
    target_median: float = 1.0,
) -> AffineDepthParams:
    """Align relative depth to predicted normals; returns pseudo-metric params.

    Searches the shift/scale ratio on a coarse grid (see
    :func:`ratio_search_grid`), refines the best bracket with bounded scalar
    minimization, then fixes the scale gauge so the aligned depth has median
    ``target_median``. Raises :class:`UnidentifiableSceneError` when the
    objective varies by less than ``FLAT_OBJECTIVE_DEG`` degrees over the
    feasible grid, as happens for a single fronto-parallel plane.
    """
    if pred_depth.shape != pred_normal.shape:
        raise ValueError(f"shape mismatch: depth {pred_depth.shape} vs normals {pred_normal.shape}")
    if not target_median > 0:
        raise ValueError(f"target_median must be positive, got {target_median}")

    def objective(r: float) -> float:
        return normal_consistency_objective(pred_depth, pred_normal, intrinsics, r, window)

    grid = ratio_search_grid(pred_depth)
    values = np.array([objective(r) for r in grid])
    feasible = np.isfinite(values)
    if not np.any(feasible):
        raise UnidentifiableSceneError("no alignment ratio leaves enough valid pixels to compare")
    if values[feasible].max() - values[feasible].min() < FLAT_OBJECTIVE_DEG:
        raise UnidentifiableSceneError(
            "normal-consistency objective is flat over the search grid "
            f"(variation {values[feasible].max() - values[feasible].min():.4f} deg); "
            "scale and shift cannot be identified from this scene"
        )

    best = int(np.nanargmin(np.where(feasible, values, np.nan)))
    lo = grid[best - 1] if best > 0 else grid[best] - abs(grid[best]) - 1.0
    hi = grid[best + 1] if best + 1 < grid.size else grid[best] + abs(grid[best]) + 1.0
    result = minimize_scalar(objective, bounds=(lo, hi), method="bounded", options={"xatol": 1e-7})
    ratio = float(result.x)
    if not np.isfinite(result.fun) or result.fun > values[best]:
        ratio = float(grid[best])

    shifted = pred_depth.values + ratio
    survivors = pred_depth.mask & (shifted > 0)
    med = float(np.median(shifted[survivors]))
    scale = target_median / med
    return AffineDepthParams(scale=scale, shift=scale * ratio)
