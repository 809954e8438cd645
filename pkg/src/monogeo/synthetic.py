"""Analytic test scenes: spheres, planes and smooth height fields.

These generators return exact depth and normal maps, so they double as
oracles: estimators elsewhere in the package are judged against them.
"""

from __future__ import annotations

import numpy as np

from .geometry import DepthMap, Intrinsics, NormalMap


def square_intrinsics(size: int, fov_deg: float = 60.0) -> Intrinsics:
    """Square pinhole camera with the given horizontal field of view."""
    f = (size / 2.0) / np.tan(np.radians(fov_deg) / 2.0)
    c = (size - 1) / 2.0
    return Intrinsics(fx=f, fy=f, cx=c, cy=c, width=size, height=size)


def sphere_cap_scene(
    intrinsics: Intrinsics,
    center_z: float,
    radius: float,
    facing_cutoff: float = 0.0,
) -> tuple[DepthMap, NormalMap]:
    """Sphere centered on the optical axis, seen from the origin.

    Returns the exact depth of the near intersection and the exact unit
    normals under the camera-facing (positive z) convention. Pixels whose
    ray misses the sphere, or where the normal makes too shallow an angle
    with the viewing ray (``n . ray_hat < facing_cutoff``), are masked out.
    """
    if not (center_z > radius > 0):
        raise ValueError("need center_z > radius > 0 for a fully visible sphere")
    m = intrinsics.ray_grid()
    m2 = np.sum(m * m, axis=-1)
    disc = center_z**2 - m2 * (center_z**2 - radius**2)
    hit = disc > 0
    d = np.full(m2.shape, np.nan)
    d[hit] = (center_z - np.sqrt(disc[hit])) / m2[hit]

    points = m * d[..., None]
    center = np.array([0.0, 0.0, center_z])
    n = center[None, None, :] - points
    n /= np.linalg.norm(n, axis=-1, keepdims=True)

    ray_hat = m / np.sqrt(m2)[..., None]
    facing = np.sum(n * ray_hat, axis=-1)
    mask = hit & (facing > facing_cutoff)

    n = np.where(mask[..., None], n, 0.0)
    n[mask] /= np.linalg.norm(n[mask], axis=-1, keepdims=True)
    depth = DepthMap(values=np.where(mask, d, np.nan), mask=mask, kind="metric")
    normals = NormalMap(values=n, mask=mask)
    return depth, normals


def plane_scene(
    intrinsics: Intrinsics, a: float, b: float, c: float
) -> tuple[DepthMap, NormalMap]:
    """Plane z = a*x + b*y + c in camera coordinates.

    The exact normal is (-a, -b, 1) normalized; depth follows from
    intersecting each pixel ray with the plane. Rays parallel to or hitting
    the plane behind the camera are masked out.
    """
    m = intrinsics.ray_grid()
    denom = 1.0 - a * m[..., 0] - b * m[..., 1]
    with np.errstate(divide="ignore", invalid="ignore"):
        d = c / denom
    mask = np.isfinite(d) & (d > 0)

    n = np.array([-a, -b, 1.0])
    n = n / np.linalg.norm(n)
    values = np.where(mask[..., None], n[None, None, :], 0.0)
    depth = DepthMap(values=np.where(mask, d, np.nan), mask=mask, kind="metric")
    return depth, NormalMap(values=values, mask=mask)


def height_field(
    shape: tuple[int, int], kind: str = "bumps", rng: np.random.Generator | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Smooth height field z(u, v) with analytic gradients, in pixel units.

    Returns (z, dz/du, dz/dv), each of the given shape. ``kind`` selects a
    family: "ramp" (plane), "cubic" (exactly integrable by a second-order
    scheme), "bumps" (random Gaussian bumps on a tilt, needs ``rng``).
    """
    h, w = shape
    v, u = np.mgrid[0:h, 0:w].astype(np.float64)
    if kind == "ramp":
        z = 0.2 * u - 0.1 * v
        zu = np.full(shape, 0.2)
        zv = np.full(shape, -0.1)
    elif kind == "cubic":
        us, vs = u / w, v / h
        z = 3.0 * us**3 - 2.0 * vs**3 + us * vs + 0.5 * us**2 - vs
        zu = (9.0 * us**2 + vs + us) / w
        zv = (-6.0 * vs**2 + us - 1.0) / h
    elif kind == "bumps":
        if rng is None:
            raise ValueError("kind='bumps' needs an rng")
        tilt = rng.uniform(-0.15, 0.15, size=2)
        z = tilt[0] * u + tilt[1] * v
        zu = np.full(shape, tilt[0])
        zv = np.full(shape, tilt[1])
        for _ in range(rng.integers(2, 5)):
            cu, cv = rng.uniform(0, w), rng.uniform(0, h)
            s = rng.uniform(0.15, 0.4) * min(h, w)
            amp = rng.uniform(-0.5, 0.5) * s
            g = np.exp(-((u - cu) ** 2 + (v - cv) ** 2) / (2 * s**2))
            z += amp * g
            zu += amp * g * -(u - cu) / s**2
            zv += amp * g * -(v - cv) / s**2
    else:
        raise ValueError(f"unknown height field kind {kind!r}")
    return z, zu, zv


def normals_from_gradients(zu: np.ndarray, zv: np.ndarray) -> NormalMap:
    """Orthographic normals n ~ (-dz/du, -dz/dv, 1) from analytic gradients."""
    n = np.stack([-zu, -zv, np.ones_like(zu)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return NormalMap(values=n, mask=np.ones(zu.shape, dtype=bool))
