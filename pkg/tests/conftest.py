import numpy as np
import pytest

from monogeo.geometry import DepthMap
from monogeo.synthetic import sphere_cap_scene, square_intrinsics


@pytest.fixture(scope="session")
def intrinsics_96():
    return square_intrinsics(96)


@pytest.fixture(scope="session")
def intrinsics_128():
    return square_intrinsics(128)


@pytest.fixture(scope="session")
def sphere_96(intrinsics_96):
    """Sphere cap with analytic depth and normals at 96x96."""
    return sphere_cap_scene(intrinsics_96, center_z=2.5, radius=1.0)


@pytest.fixture(scope="session")
def sphere_128(intrinsics_128):
    return sphere_cap_scene(intrinsics_128, center_z=2.5, radius=1.0)


def distorted_unit_median_sphere(intrinsics):
    """Sphere scene rescaled so median(gt depth) = 1, plus an affinely
    distorted prediction with true (scale, shift) = (2.0, 0.5).

    Uniformly rescaling a sphere scene about the camera center yields
    another sphere scene with identical normals, so the analytic normal
    map stays exact.
    """
    depth, normals = sphere_cap_scene(intrinsics, center_z=2.5, radius=1.0)
    med = float(np.median(depth.values[depth.mask]))
    gt_values = np.where(depth.mask, depth.values / med, np.nan)
    gt = DepthMap(values=gt_values, mask=depth.mask, kind="metric")
    pred_values = np.where(depth.mask, (gt_values - 0.5) / 2.0, np.nan)
    pred = DepthMap(values=pred_values, mask=depth.mask, kind="affine_invariant")
    return gt, pred, normals, 2.5 / med, 1.0 / med


@pytest.fixture(scope="session")
def unit_median_sphere(intrinsics_96):
    return distorted_unit_median_sphere(intrinsics_96)


@pytest.fixture(scope="session")
def unit_median_sphere_64():
    """64x64 variant for reconstruction tests: this grid samples no
    near-grazing rim pixel, so unanchored integration error stays small."""
    return distorted_unit_median_sphere(square_intrinsics(64))
