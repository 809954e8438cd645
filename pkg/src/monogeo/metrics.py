"""Depth and normal evaluation metrics, plus a scene-statistics histogram.

Depth metrics assume the prediction has already been affinely aligned to the
reference; :func:`prealign` provides the standard least-squares alignment in
depth or disparity space. Geometric consistency cross-checks a predicted
depth/normal pair without trusting either: the depth is aligned to the
reference, turned back into normals, and compared against the predicted
normals.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import asdict, dataclass

import numpy as np

from .alignment import apply_affine, fit_affine_ls
from .geometry import (
    DepthMap,
    Intrinsics,
    NormalMap,
    angular_distance,
    apply_far_plane,
    normals_from_depth,
)

ALIGNMENT_MODES = ("ls", "ls_disparity", "none")

HISTOGRAM_BINS = 100


def _shared_depth_mask(pred: DepthMap, gt: DepthMap) -> np.ndarray:
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    shared = pred.mask & gt.mask
    if not np.any(shared):
        raise ValueError("no shared valid pixels between prediction and reference")
    return shared


def absrel(pred: DepthMap, gt: DepthMap) -> float:
    """Mean absolute relative depth error, mean(|pred - gt| / gt)."""
    shared = _shared_depth_mask(pred, gt)
    if gt.kind != "metric":
        raise ValueError("absrel needs a metric reference depth")
    p = pred.values[shared]
    g = gt.values[shared]
    return float(np.mean(np.abs(p - g) / g))


def delta1(pred: DepthMap, gt: DepthMap, threshold: float = 1.25) -> float:
    """Fraction of pixels with max(pred/gt, gt/pred) < threshold."""
    shared = _shared_depth_mask(pred, gt)
    if gt.kind != "metric" or pred.kind != "metric":
        raise ValueError("delta1 needs metric depth on both sides")
    p = pred.values[shared]
    g = gt.values[shared]
    ratio = np.maximum(p / g, g / p)
    return float(np.mean(ratio < threshold))


def normal_metrics(pred: NormalMap, gt: NormalMap, inlier_deg: float = 11.25) -> tuple[float, float]:
    """(mean angular error in degrees, fraction of pixels below ``inlier_deg``)."""
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs gt {gt.shape}")
    shared = pred.mask & gt.mask
    if not np.any(shared):
        raise ValueError("no shared valid pixels between predicted and reference normals")
    ang = angular_distance(pred.values[shared], gt.values[shared])
    return float(np.mean(ang)), float(np.mean(ang < inlier_deg))


def prealign(pred: DepthMap, gt: DepthMap, mode: str = "ls") -> DepthMap:
    """Affinely align a prediction to the reference before depth metrics.

    ``ls`` fits scale/shift in depth space; ``ls_disparity`` fits the
    prediction to the reference's reciprocal and maps back through 1/x
    (appropriate when the prediction lives in disparity space); ``none``
    passes the prediction through with kind coerced to metric.
    """
    if mode not in ALIGNMENT_MODES:
        raise ValueError(f"alignment mode must be one of {ALIGNMENT_MODES}, got {mode!r}")
    if mode == "none":
        mask = pred.mask & (pred.values > 0)
        return DepthMap(values=pred.values.copy(), mask=mask, kind="metric")
    if mode == "ls":
        return apply_affine(pred, fit_affine_ls(pred, gt))
    inv_gt = DepthMap(
        values=np.where(gt.mask, 1.0 / np.where(gt.mask, gt.values, 1.0), 0.0),
        mask=gt.mask,
        kind="affine_invariant",
    )
    params = fit_affine_ls(pred, inv_gt)
    disparity = params.scale * pred.values + params.shift
    mask = pred.mask & (disparity > 0)
    depth = np.where(mask, 1.0 / np.where(mask, disparity, 1.0), np.nan)
    return DepthMap(values=depth, mask=mask, kind="metric")


def geometric_consistency(
    pred_depth: DepthMap,
    pred_normal: NormalMap,
    gt_depth: DepthMap,
    intrinsics: Intrinsics,
    window: int = 5,
) -> float:
    """Mean angular gap (degrees) between normals implied by the predicted depth
    (after least-squares alignment to the reference) and the predicted normals."""
    params = fit_affine_ls(pred_depth, gt_depth)
    aligned = apply_affine(pred_depth, params)
    derived = normals_from_depth(aligned, intrinsics, window=window)
    shared = derived.mask & pred_normal.mask
    if not np.any(shared):
        raise ValueError("no shared valid pixels for geometric consistency")
    return float(np.mean(angular_distance(derived.values[shared], pred_normal.values[shared])))


@dataclass
class MetricReport:
    """Joint depth/normal evaluation with the settings that produced it."""

    absrel: float
    delta1: float
    mean_angular: float
    pct_within_11_25: float
    geometric_consistency: float
    pixel_count: int
    alignment_mode: str = "ls"
    window: int = 5

    def __post_init__(self):
        for name in ("absrel", "delta1", "mean_angular", "pct_within_11_25",
                     "geometric_consistency"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"{name} must be finite and non-negative, got {value}")
        if self.pixel_count < 0:
            raise ValueError("pixel_count must be non-negative")

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "MetricReport":
        return cls(**json.loads(text))


def full_report(
    pred_depth: DepthMap,
    pred_normal: NormalMap,
    gt_depth: DepthMap,
    gt_normal: NormalMap,
    intrinsics: Intrinsics,
    alignment_mode: str = "ls",
    window: int = 5,
) -> MetricReport:
    """Evaluate a depth/normal prediction pair against references."""
    aligned = prealign(pred_depth, gt_depth, mode=alignment_mode)
    mean_ang, pct = normal_metrics(pred_normal, gt_normal)
    gc = geometric_consistency(pred_depth, pred_normal, gt_depth, intrinsics, window=window)
    return MetricReport(
        absrel=absrel(aligned, gt_depth),
        delta1=delta1(aligned, gt_depth),
        mean_angular=mean_ang,
        pct_within_11_25=pct,
        geometric_consistency=gc,
        pixel_count=int((aligned.mask & gt_depth.mask).sum()),
        alignment_mode=alignment_mode,
        window=window,
    )


@dataclass
class DepthHistogram:
    """Pooled distribution of per-image min-max normalized depth."""

    bin_edges: np.ndarray  # length HISTOGRAM_BINS + 1
    proportions: np.ndarray  # length HISTOGRAM_BINS, sums to 1
    skipped: int = 0

    def __post_init__(self):
        self.bin_edges = np.asarray(self.bin_edges, dtype=np.float64)
        self.proportions = np.asarray(self.proportions, dtype=np.float64)
        if self.bin_edges.shape != (HISTOGRAM_BINS + 1,):
            raise ValueError(f"need {HISTOGRAM_BINS + 1} bin edges, got {self.bin_edges.shape}")
        if self.proportions.shape != (HISTOGRAM_BINS,):
            raise ValueError(f"need {HISTOGRAM_BINS} proportions, got {self.proportions.shape}")
        if abs(float(self.proportions.sum()) - 1.0) > 1e-9:
            raise ValueError("histogram proportions must sum to 1")


def scene_depth_histogram(depths: list[DepthMap], far: float = math.inf) -> DepthHistogram:
    """Histogram of normalized depth pooled over a collection of images.

    Each image is clipped at ``far``, min-max normalized to [0, 1] over its
    valid pixels, and binned into 100 equal bins (the top edge closed).
    Constant or empty images cannot be normalized; they are skipped and
    counted, with a warning.
    """
    edges = np.linspace(0.0, 1.0, HISTOGRAM_BINS + 1)
    counts = np.zeros(HISTOGRAM_BINS, dtype=np.int64)
    skipped = 0
    for depth in depths:
        clipped = apply_far_plane(depth, far) if math.isfinite(far) else depth
        vals = clipped.valid_values()
        if vals.size == 0 or vals.max() == vals.min():
            skipped += 1
            continue
        norm = (vals - vals.min()) / (vals.max() - vals.min())
        idx = np.minimum((norm * HISTOGRAM_BINS).astype(np.int64), HISTOGRAM_BINS - 1)
        counts += np.bincount(idx, minlength=HISTOGRAM_BINS)
    if skipped:
        warnings.warn(f"skipped {skipped} constant or empty depth image(s)", stacklevel=2)
    total = counts.sum()
    if total == 0:
        raise ValueError("no valid pixels across the collection; cannot build a histogram")
    return DepthHistogram(bin_edges=edges, proportions=counts / total, skipped=skipped)
