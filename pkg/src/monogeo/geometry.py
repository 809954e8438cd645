"""Camera geometry primitives for single-view depth and normal maps.

Coordinate conventions used throughout the package:

* Camera frame: x right, y down, z forward (optical axis). The camera sits
  at the origin and looks along +z.
* Pixel (u, v): u is the column index, v is the row index. Arrays are
  indexed ``values[v, u]``.
* Unprojection: ``point(u, v) = depth * ((u - cx) / fx, (v - cy) / fy, 1)``.
* Normals are unit vectors in the camera frame, oriented so that surfaces
  facing the camera have positive z. A fronto-parallel wall is (0, 0, 1),
  a surface seen edge-on from the left is (-1, 0, 0).
* RGB encoding of a normal: ``rgb = round(255 * (n + 1) / 2)``, so
  (0, 0, 1) encodes to (128, 128, 255).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

DEPTH_KINDS = ("metric", "affine_invariant", "disparity")

# Reserved RGB triple for invalid pixels. No unit vector rounds to it:
# a channel of 0 needs a component < -0.996, impossible for all three at once.
INVALID_RGB = (0, 0, 0)
SKY_RGB = (0, 0, 255)


@dataclass
class Intrinsics:
    """Pinhole camera intrinsics. Focal lengths and image size in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (self.width > 0 and self.height > 0):
            raise ValueError(f"image size must be positive, got {self.width}x{self.height}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image bounds "
                f"{self.width}x{self.height}"
            )

    def ray_grid(self) -> np.ndarray:
        """Per-pixel ray directions m(u, v) = ((u-cx)/fx, (v-cy)/fy, 1), shape (H, W, 3)."""
        u = np.arange(self.width, dtype=np.float64)
        v = np.arange(self.height, dtype=np.float64)
        mx = (u[None, :] - self.cx) / self.fx
        my = (v[:, None] - self.cy) / self.fy
        m = np.empty((self.height, self.width, 3), dtype=np.float64)
        m[..., 0] = mx
        m[..., 1] = my
        m[..., 2] = 1.0
        return m


@dataclass
class DepthMap:
    """A (H, W) depth image with validity mask.

    kind is one of ``metric`` (positive, in scene units), ``affine_invariant``
    (unitless, known only up to scale and shift) or ``disparity`` (positive,
    proportional to inverse depth).
    """

    values: np.ndarray
    mask: np.ndarray
    kind: str = "metric"

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 2:
            raise ValueError(f"depth values must be 2-D, got shape {self.values.shape}")
        if self.mask.shape != self.values.shape:
            raise ValueError(f"mask shape {self.mask.shape} != values shape {self.values.shape}")
        if self.kind not in DEPTH_KINDS:
            raise ValueError(f"unknown depth kind {self.kind!r}, expected one of {DEPTH_KINDS}")
        valid = self.values[self.mask]
        if valid.size and not np.all(np.isfinite(valid)):
            raise ValueError("depth contains non-finite values inside the valid mask")
        if self.kind in ("metric", "disparity") and valid.size and not np.all(valid > 0):
            raise ValueError(f"{self.kind} depth must be strictly positive inside the valid mask")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def valid_values(self) -> np.ndarray:
        return self.values[self.mask]

    @classmethod
    def from_values(cls, values: np.ndarray, kind: str = "metric") -> "DepthMap":
        """Build a DepthMap, masking non-finite (and non-positive, for metric) pixels."""
        values = np.asarray(values, dtype=np.float64)
        mask = np.isfinite(values)
        if kind in ("metric", "disparity"):
            mask &= values > 0
        return cls(values=values, mask=mask, kind=kind)


@dataclass
class NormalMap:
    """A (H, W, 3) field of unit normals with validity mask."""

    values: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.values.ndim != 3 or self.values.shape[2] != 3:
            raise ValueError(f"normal values must have shape (H, W, 3), got {self.values.shape}")
        if self.mask.shape != self.values.shape[:2]:
            raise ValueError(f"mask shape {self.mask.shape} != image shape {self.values.shape[:2]}")
        valid = self.values[self.mask]
        if valid.size:
            if not np.all(np.isfinite(valid)):
                raise ValueError("normals contain non-finite values inside the valid mask")
            norms = np.linalg.norm(valid, axis=-1)
            if not np.all(np.abs(norms - 1.0) < 1e-6):
                worst = float(np.max(np.abs(norms - 1.0)))
                raise ValueError(f"normals must be unit length (worst deviation {worst:.3g})")

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape[:2]


def unproject(depth: DepthMap, intrinsics: Intrinsics) -> np.ndarray:
    """Lift a metric depth map to camera-frame points.

    Returns an (H, W, 3) float array; invalid pixels are NaN.
    """
    if depth.kind != "metric":
        raise ValueError(f"unproject requires metric depth, got kind={depth.kind!r}")
    _check_size(depth.shape, intrinsics)
    points = intrinsics.ray_grid() * depth.values[..., None]
    points[~depth.mask] = np.nan
    return points


def angular_distance(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Great-circle angle between unit vectors, in degrees.

    Broadcasts over leading dimensions; the last axis must be 3. Computed as
    atan2(|a x b|, a . b), which is well-conditioned at both ends: identical
    vectors give exactly 0 (the cross product cancels exactly) and antipodal
    pairs exactly 180, with no clamping needed.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape[-1] != 3 or b.shape[-1] != 3:
        raise ValueError("angular_distance expects vectors with a trailing axis of size 3")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("angular_distance requires finite inputs")
    cross = np.linalg.norm(np.cross(a, b), axis=-1)
    dot = np.sum(a * b, axis=-1)
    return np.degrees(np.arctan2(cross, dot))


def normals_from_depth(
    depth: DepthMap,
    intrinsics: Intrinsics,
    window: int = 5,
    min_valid_fraction: float = 0.5,
) -> NormalMap:
    """Estimate normals by least-squares plane fits over square pixel windows.

    For each valid pixel, the camera-frame points of the valid pixels in the
    centered ``window x window`` neighborhood are fit with a plane (smallest
    eigenvector of the centered scatter matrix). A pixel is marked invalid if
    its own depth is invalid, fewer than ``min_valid_fraction`` of the window
    is valid, fewer than 3 points are available, or the points are collinear.

    Normals are oriented to face the camera (positive z for visible surfaces).
    """
    if window < 3 or window % 2 == 0:
        raise ValueError(f"window must be an odd integer >= 3, got {window}")
    if depth.kind != "metric":
        raise ValueError(f"normals_from_depth requires metric depth, got kind={depth.kind!r}")
    _check_size(depth.shape, intrinsics)

    h, w = depth.shape
    half = window // 2
    points = intrinsics.ray_grid() * depth.values[..., None]
    points[~depth.mask] = 0.0
    m = depth.mask.astype(np.float64)

    # Window sums of deviations from the center pixel's point. Differencing
    # before multiplying keeps the z column of the scatter matrix exactly
    # zero for constant-depth windows, so flat regions produce (0, 0, 1)
    # without round-off.
    pp = np.pad(points, ((half, half), (half, half), (0, 0)))
    mp = np.pad(m, half)

    count = np.zeros((h, w))
    s1 = np.zeros((h, w, 3))
    s2 = np.zeros((h, w, 3, 3))
    for dv in range(window):
        for du in range(window):
            mk = mp[dv : dv + h, du : du + w]
            d = (pp[dv : dv + h, du : du + w] - points) * mk[..., None]
            count += mk
            s1 += d
            s2 += d[..., :, None] * d[..., None, :]

    with np.errstate(invalid="ignore", divide="ignore"):
        scatter = s2 - (s1[..., :, None] * s1[..., None, :]) / count[..., None, None]
        centroid = points + s1 / count[..., None]

    min_count = max(3.0, np.ceil(min_valid_fraction * window * window))
    candidate = depth.mask & (count >= min_count)

    normals = np.zeros((h, w, 3))
    valid = np.zeros((h, w), dtype=bool)
    idx = np.flatnonzero(candidate)
    if idx.size:
        mats = scatter.reshape(-1, 3, 3)[idx]
        # Exactly planar in z: the fit is (0, 0, 1) with no eigen solve needed.
        flat = (mats[:, 2, 2] == 0.0) & (mats[:, 0, 2] == 0.0) & (mats[:, 1, 2] == 0.0)
        n = np.empty((idx.size, 3))
        ok = np.empty(idx.size, dtype=bool)
        n[flat] = (0.0, 0.0, 1.0)
        ok[flat] = True
        if np.any(~flat):
            evals, evecs = np.linalg.eigh(mats[~flat])
            n[~flat] = evecs[..., 0]
            # Collinear windows have a rank-1 scatter matrix; the fit is
            # ambiguous there. The test is relative so it is scale invariant.
            ok[~flat] = evals[:, 1] > 1e-12 * np.maximum(evals[:, 2], np.finfo(float).tiny)

        cen = centroid.reshape(-1, 3)[idx]
        facing = np.sum(n * cen, axis=-1)
        sign = np.where(facing != 0.0, np.sign(facing), np.sign(n[:, 2]))
        sign[sign == 0.0] = 1.0
        n *= sign[:, None]

        flat_normals = normals.reshape(-1, 3)
        flat_valid = valid.reshape(-1)
        flat_normals[idx[ok]] = n[ok]
        flat_valid[idx[ok]] = True

    return NormalMap(values=normals, mask=valid)


def encode_normal_rgb(normals: NormalMap, sky_mask: np.ndarray | None = None) -> np.ndarray:
    """Encode a normal map as uint8 RGB via rgb = round(255 * (n + 1) / 2).

    Invalid pixels become (0, 0, 0). If ``sky_mask`` is given, those pixels
    are painted pure blue (0, 0, 255), a visualization convention for sky;
    it does not correspond to the encoding of any unit vector.
    """
    h, w = normals.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    scaled = np.round(255.0 * (normals.values + 1.0) / 2.0)
    rgb[normals.mask] = np.clip(scaled[normals.mask], 0, 255).astype(np.uint8)
    if sky_mask is not None:
        sky_mask = np.asarray(sky_mask, dtype=bool)
        if sky_mask.shape != (h, w):
            raise ValueError(f"sky mask shape {sky_mask.shape} != image shape {(h, w)}")
        rgb[sky_mask] = SKY_RGB
    return rgb


def decode_normal_rgb(rgb: np.ndarray) -> NormalMap:
    """Invert :func:`encode_normal_rgb`, renormalizing to unit length.

    Pixels equal to the reserved invalid triple (0, 0, 0) are masked out.
    Sky pixels painted (0, 0, 255) decode to the upright vector (0, 0, 1)
    that the convention assigns them.
    """
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError("decode_normal_rgb expects a (H, W, 3) uint8 array")
    n = rgb.astype(np.float64) / 255.0 * 2.0 - 1.0
    mask = np.any(rgb != 0, axis=-1)
    sky = np.all(rgb == SKY_RGB, axis=-1)
    norms = np.linalg.norm(n, axis=-1)
    mask &= norms > 1e-6
    values = np.zeros_like(n)
    np.divide(n, norms[..., None], out=values, where=mask[..., None] & (norms[..., None] > 0))
    values[sky] = (0.0, 0.0, 1.0)
    return NormalMap(values=values, mask=mask)


def apply_far_plane(depth: DepthMap, far: float) -> DepthMap:
    """Invalidate pixels beyond ``far`` (scene units). ``far=inf`` is the identity."""
    if not far > 0:
        raise ValueError(f"far plane must be positive, got {far}")
    if depth.kind != "metric":
        raise ValueError(f"far-plane clipping requires metric depth, got kind={depth.kind!r}")
    mask = depth.mask & (depth.values <= far)
    return DepthMap(values=depth.values.copy(), mask=mask, kind=depth.kind)


def fill_background_normals(normals: NormalMap, background: np.ndarray) -> NormalMap:
    """Set ``background`` pixels to the upright normal (0, 0, 1) and mark them valid.

    Synthesized backgrounds behind clipped geometry carry no surface
    orientation of their own; the convention points them along the optical axis.
    """
    background = np.asarray(background, dtype=bool)
    if background.shape != normals.shape:
        raise ValueError(f"background shape {background.shape} != image shape {normals.shape}")
    values = normals.values.copy()
    values[background] = (0.0, 0.0, 1.0)
    mask = normals.mask | background
    return NormalMap(values=values, mask=mask)


def _check_size(shape: tuple[int, int], intrinsics: Intrinsics) -> None:
    if shape != (intrinsics.height, intrinsics.width):
        raise ValueError(
            f"image shape {shape} does not match intrinsics "
            f"{intrinsics.height}x{intrinsics.width}"
        )
