import numpy as np
import pytest

from monogeo.geometry import (
    DepthMap,
    Intrinsics,
    NormalMap,
    angular_distance,
    apply_far_plane,
    decode_normal_rgb,
    encode_normal_rgb,
    normals_from_depth,
    unproject,
)
from monogeo.synthetic import plane_scene, sphere_cap_scene, square_intrinsics


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        Intrinsics(fx=0.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
    with pytest.raises(ValueError):
        Intrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=0, height=4)


def test_unproject_center_pixel_lies_on_axis():
    K = Intrinsics(fx=50.0, fy=50.0, cx=2.0, cy=1.5, width=5, height=4)
    depth = DepthMap.from_values(np.full((4, 5), 3.0))
    pts = unproject(depth, K)
    # pixel exactly at the principal point maps to (0, 0, depth)
    np.testing.assert_allclose(pts[2, 2], [0.0, 3.0 / 50.0 * 0.5, 3.0], atol=1e-12)
    np.testing.assert_allclose(pts[:, :, 2], 3.0)


def test_unproject_marks_invalid_as_nan():
    K = square_intrinsics(4)
    values = np.full((4, 4), 2.0)
    mask = np.ones((4, 4), bool)
    mask[1, 2] = False
    pts = unproject(DepthMap(values=values, mask=mask, kind="metric"), K)
    assert np.all(np.isnan(pts[1, 2]))
    assert np.all(np.isfinite(pts[mask]))


def test_angular_distance_hand_values():
    a = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])
    b = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(angular_distance(a, b), [0.0, 90.0], atol=1e-12)
    # antipodal pair, dot = -1 exactly
    assert angular_distance(np.array([0.0, 0.0, 1.0]), np.array([0.0, 0.0, -1.0])) == 180.0


def test_angular_distance_exact_at_both_ends():
    # identical vectors: the cross product cancels exactly, so the angle is 0
    # even where the dot product rounds away from 1
    rng = np.random.default_rng(9)
    v = rng.standard_normal((50, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    assert np.all(angular_distance(v, v) == 0.0)
    assert np.all(angular_distance(v, -v) == 180.0)
    with pytest.raises(ValueError):
        angular_distance(np.array([np.nan, 0.0, 0.0]), v[0])


def test_constant_plane_normals_exact_interior():
    K = square_intrinsics(32)
    depth, _ = plane_scene(K, a=0.0, b=0.0, c=2.0)
    est = normals_from_depth(depth, K, window=5)
    interior = np.zeros((32, 32), bool)
    interior[2:-2, 2:-2] = True
    assert np.all(est.mask[interior])
    # bitwise exact (0,0,1): the centered window sums are exactly zero
    assert np.all(est.values[interior] == np.array([0.0, 0.0, 1.0]))


def test_tilted_plane_normals_match_analytic():
    K = square_intrinsics(48)
    a, b, c = 0.3, -0.2, 2.0
    depth, gt = plane_scene(K, a=a, b=b, c=c)
    est = normals_from_depth(depth, K, window=5)
    both = est.mask & gt.mask
    assert both.sum() > 1000
    ang = angular_distance(est.values[both], gt.values[both])
    assert ang.max() < 1e-4


def test_sphere_cap_normals_median_error(sphere_128, intrinsics_128):
    depth, gt = sphere_128
    est = normals_from_depth(depth, intrinsics_128, window=5)
    both = est.mask & gt.mask
    ang = angular_distance(est.values[both], gt.values[both])
    assert np.median(ang) < 1.0


def test_normals_respect_min_valid_fraction():
    K = square_intrinsics(16)
    depth, _ = plane_scene(K, a=0.1, b=0.0, c=2.0)
    # isolate a single valid pixel: its window has 1/25 valid < 0.5
    mask = np.zeros((16, 16), bool)
    mask[8, 8] = True
    lone = DepthMap(values=depth.values, mask=mask, kind="metric")
    est = normals_from_depth(lone, K, window=5)
    assert not est.mask.any()


def test_normals_face_camera(sphere_96, intrinsics_96):
    depth, _ = sphere_96
    est = normals_from_depth(depth, intrinsics_96)
    assert np.all(est.values[est.mask][:, 2] > 0)


def test_normal_rgb_roundtrip():
    rng = np.random.default_rng(0)
    v = rng.standard_normal((8, 8, 3))
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    v[..., 2] = np.abs(v[..., 2])
    v /= np.linalg.norm(v, axis=-1, keepdims=True)
    mask = rng.random((8, 8)) > 0.3
    normals = NormalMap(values=np.where(mask[..., None], v, 0.0), mask=mask)
    rgb = encode_normal_rgb(normals)
    back = decode_normal_rgb(rgb)
    assert np.array_equal(back.mask, mask)
    ang = angular_distance(back.values[mask], v[mask])
    assert ang.max() < 0.5  # 8-bit quantization bound


def test_invalid_pixels_encode_to_zero_rgb():
    mask = np.zeros((2, 2), bool)
    mask[0, 0] = True
    values = np.zeros((2, 2, 3))
    values[0, 0] = [0.0, 0.0, 1.0]
    rgb = encode_normal_rgb(NormalMap(values=values, mask=mask))
    assert tuple(rgb[1, 1]) == (0, 0, 0)
    assert tuple(rgb[0, 1]) == (0, 0, 0)


def test_sky_pixels_encode_blue_and_decode_as_fronto():
    mask = np.zeros((2, 2), bool)
    mask[0, 0] = True
    values = np.zeros((2, 2, 3))
    values[0, 0] = [1.0, 0.0, 0.0]
    sky = np.zeros((2, 2), bool)
    sky[1, 1] = True
    rgb = encode_normal_rgb(NormalMap(values=values, mask=mask), sky_mask=sky)
    assert tuple(rgb[1, 1]) == (0, 0, 255)
    back = decode_normal_rgb(rgb)
    assert back.mask[1, 1]
    np.testing.assert_allclose(back.values[1, 1], [0.0, 0.0, 1.0], atol=2 / 255)


def test_apply_far_plane():
    values = np.array([[1.0, 5.0], [80.0, 120.0]])
    depth = DepthMap.from_values(values)
    clipped = apply_far_plane(depth, 100.0)
    assert clipped.mask.tolist() == [[True, True], [True, False]]
    same = apply_far_plane(depth, np.inf)
    assert np.array_equal(same.mask, depth.mask)
    with pytest.raises(ValueError):
        apply_far_plane(depth, -1.0)


def test_depth_map_kind_validation():
    with pytest.raises(ValueError):
        DepthMap(values=np.full((2, 2), -1.0), mask=np.ones((2, 2), bool), kind="metric")
    # affine-invariant values may be negative
    DepthMap(values=np.full((2, 2), -1.0), mask=np.ones((2, 2), bool), kind="affine_invariant")
    with pytest.raises(ValueError):
        DepthMap.from_values(np.ones((2, 2)), kind="nonsense")


def test_normal_map_requires_unit_vectors():
    values = np.zeros((2, 2, 3))
    values[..., 2] = 2.0
    with pytest.raises(ValueError):
        NormalMap(values=values, mask=np.ones((2, 2), bool))


def test_sphere_depth_consistent_with_unprojection(sphere_96, intrinsics_96):
    depth, normals = sphere_96
    pts = unproject(depth, intrinsics_96)
    # every unprojected point lies on the sphere |p - c| = r
    c = np.array([0.0, 0.0, 2.5])
    d = np.linalg.norm(pts[depth.mask] - c, axis=-1)
    np.testing.assert_allclose(d, 1.0, atol=1e-9)
    # analytic normals point from surface toward sphere center's camera side
    outward = (c - pts[depth.mask]) / 1.0
    np.testing.assert_allclose(normals.values[depth.mask], outward, atol=1e-9)
