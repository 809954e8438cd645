import numpy as np
import pytest

from monogeo.alignment import (
    AffineDepthParams,
    DegenerateFitError,
    UnidentifiableSceneError,
    apply_affine,
    fit_affine_ls,
    normal_consistency_objective,
    optimize_scale_shift_by_normal,
)
from monogeo.geometry import DepthMap, NormalMap, angular_distance, normals_from_depth
from monogeo.synthetic import plane_scene, square_intrinsics


def _depth_from_flat(values, kind="affine_invariant"):
    arr = np.asarray(values, dtype=np.float64).reshape(1, -1)
    return DepthMap(values=arr, mask=np.ones_like(arr, bool), kind=kind)


def test_fit_affine_exact_scaling():
    params = fit_affine_ls(_depth_from_flat([2, 4, 6]), _depth_from_flat([1, 2, 3], "metric"))
    assert params.scale == pytest.approx(0.5, abs=1e-14)
    assert params.shift == pytest.approx(0.0, abs=1e-14)


def test_fit_affine_exact_shift():
    params = fit_affine_ls(_depth_from_flat([2, 3, 4]), _depth_from_flat([1, 2, 3], "metric"))
    assert params.scale == pytest.approx(1.0, abs=1e-14)
    assert params.shift == pytest.approx(-1.0, abs=1e-14)


def test_fit_affine_machine_exact_for_any_affine_pair():
    rng = np.random.default_rng(3)
    pred = rng.uniform(0.5, 4.0, (20, 20))
    for s, t in [(0.25, 3.0), (7.0, -0.5), (1.0, 0.0)]:
        gt = s * pred + t
        if np.any(gt <= 0):
            continue
        params = fit_affine_ls(DepthMap.from_values(pred, kind="affine_invariant"),
                               DepthMap.from_values(gt))
        assert params.scale == pytest.approx(s, rel=1e-12)
        assert params.shift == pytest.approx(t, rel=1e-9, abs=1e-12)


def test_fit_affine_beats_grid_oracle():
    """Closed form must attain a residual no worse than any nearby grid point."""
    rng = np.random.default_rng(11)
    pred = rng.uniform(1.0, 5.0, 400)
    gt = 1.7 * pred + 0.9 + rng.normal(0.0, 0.3, 400)
    gt = np.clip(gt, 0.1, None)
    params = fit_affine_ls(_depth_from_flat(pred), _depth_from_flat(gt, "metric"))

    def residual(s, t):
        return float(np.sum((s * pred + t - gt) ** 2))

    best = residual(params.scale, params.shift)
    for s in np.linspace(params.scale * 0.5, params.scale * 1.5, 100):
        for t in np.linspace(params.shift - abs(params.shift), params.shift + abs(params.shift), 100):
            assert residual(s, t) >= best - 1e-9


def test_fit_affine_degenerate_inputs():
    with pytest.raises(DegenerateFitError):
        fit_affine_ls(_depth_from_flat([2, 2, 2]), _depth_from_flat([1, 2, 3], "metric"))
    pred = DepthMap(values=np.ones((1, 3)), mask=np.zeros((1, 3), bool), kind="affine_invariant")
    with pytest.raises(DegenerateFitError):
        fit_affine_ls(pred, _depth_from_flat([1, 2, 3], "metric"))
    # anti-correlated pair drives the LS scale negative
    with pytest.raises(DegenerateFitError):
        fit_affine_ls(_depth_from_flat([3, 2, 1]), _depth_from_flat([1, 2, 3], "metric"))


def test_apply_affine_identity_and_arithmetic():
    depth = _depth_from_flat([3.0])
    out = apply_affine(depth, AffineDepthParams(scale=1.0, shift=0.0))
    assert out.values[0, 0] == 3.0 and out.kind == "metric"
    out = apply_affine(depth, AffineDepthParams(scale=2.0, shift=1.0))
    assert out.values[0, 0] == 7.0


def test_apply_affine_invalidates_nonpositive():
    out = apply_affine(_depth_from_flat([5.0, 20.0]), AffineDepthParams(scale=1.0, shift=-10.0))
    assert out.mask.tolist() == [[False, True]]


def test_params_validation():
    with pytest.raises(ValueError):
        AffineDepthParams(scale=-1.0, shift=0.0)
    with pytest.raises(ValueError):
        AffineDepthParams(scale=np.inf, shift=0.0)


def test_recovers_known_scale_shift(unit_median_sphere, intrinsics_96):
    gt, pred, normals, _, _ = unit_median_sphere
    params = optimize_scale_shift_by_normal(pred, normals, intrinsics_96, target_median=1.0)
    assert params.scale == pytest.approx(2.0, rel=0.05)
    assert params.shift == pytest.approx(0.5, rel=0.05)
    aligned = apply_affine(pred, params)
    assert np.all(aligned.values[aligned.mask] > 0)


def test_metric_consistent_input_is_fixed_point(sphere_96, intrinsics_96):
    depth, normals = sphere_96
    med = float(np.median(depth.values[depth.mask]))
    pred = DepthMap(values=depth.values, mask=depth.mask, kind="affine_invariant")
    params = optimize_scale_shift_by_normal(pred, normals, intrinsics_96, target_median=med)
    assert params.scale == pytest.approx(1.0, rel=0.02)
    assert abs(params.shift) < 0.02 * med


def test_fronto_parallel_degeneracy_reported():
    K = square_intrinsics(48)
    depth, normals = plane_scene(K, a=0.0, b=0.0, c=2.0)
    pred = DepthMap(values=(depth.values - 0.5) / 2.0, mask=depth.mask, kind="affine_invariant")
    with pytest.raises(UnidentifiableSceneError):
        optimize_scale_shift_by_normal(pred, normals, K)


def test_objective_prefers_truth(unit_median_sphere, intrinsics_96):
    _, pred, normals, _, _ = unit_median_sphere
    # true ratio shift/scale = 0.25; objective must beat distant ratios
    e_true = normal_consistency_objective(pred, normals, intrinsics_96, ratio=0.25)
    for r in (-0.2, 0.0, 1.0, 5.0):
        assert e_true < normal_consistency_objective(pred, normals, intrinsics_96, ratio=r)


def test_objective_invariant_to_in_plane_rotation(unit_median_sphere, intrinsics_96):
    """Rotating the whole scene by 90 deg in the image plane (a symmetry of the
    square pinhole camera) must leave objective values and the optimum intact."""
    gt, pred, normals, _, _ = unit_median_sphere
    k = intrinsics_96
    assert k.fx == k.fy and k.width == k.height

    rot_pred = DepthMap(values=np.rot90(pred.values).copy(),
                        mask=np.rot90(pred.mask).copy(), kind=pred.kind)
    rv = np.rot90(normals.values, axes=(0, 1)).copy()
    # image-plane CCW rotation sends camera axes (x, y) -> (-y, x)
    rot_vals = np.stack([rv[..., 1], -rv[..., 0], rv[..., 2]], axis=-1)
    rot_normals = NormalMap(values=rot_vals, mask=np.rot90(normals.mask).copy())

    for ratio in (0.0, 0.25, 1.0):
        e0 = normal_consistency_objective(pred, normals, intrinsics_96, ratio=ratio)
        e1 = normal_consistency_objective(rot_pred, rot_normals, intrinsics_96, ratio=ratio)
        assert e0 == pytest.approx(e1, abs=1e-9)

    p0 = optimize_scale_shift_by_normal(pred, normals, intrinsics_96)
    p1 = optimize_scale_shift_by_normal(rot_pred, rot_normals, intrinsics_96)
    assert p1.scale == pytest.approx(p0.scale, rel=1e-3)
    assert p1.shift == pytest.approx(p0.shift, rel=1e-3)


def test_gauge_invariance_of_objective(unit_median_sphere, intrinsics_96):
    """Scaling candidate depth uniformly leaves depth-derived normals unchanged,
    so the objective depends on (scale, shift) only through shift/scale."""
    _, pred, normals, _, _ = unit_median_sphere
    base = normal_consistency_objective(pred, normals, intrinsics_96, ratio=0.25)
    scaled = DepthMap(values=pred.values * 37.0, mask=pred.mask, kind=pred.kind)
    same = normal_consistency_objective(scaled, normals, intrinsics_96, ratio=0.25 * 37.0)
    assert base == pytest.approx(same, abs=1e-10)


def test_returned_scale_positive_and_depth_positive(unit_median_sphere, intrinsics_96):
    _, pred, normals, _, _ = unit_median_sphere
    params = optimize_scale_shift_by_normal(pred, normals, intrinsics_96)
    assert params.scale > 0
    aligned = apply_affine(pred, params)
    assert np.all(aligned.values[aligned.mask] > 0)


def test_rotation_preserves_angular_distance():
    rng = np.random.default_rng(5)
    a = rng.standard_normal((100, 3))
    a /= np.linalg.norm(a, axis=-1, keepdims=True)
    b = rng.standard_normal((100, 3))
    b /= np.linalg.norm(b, axis=-1, keepdims=True)
    th = 0.7
    rot = np.array([[np.cos(th), -np.sin(th), 0.0], [np.sin(th), np.cos(th), 0.0], [0.0, 0.0, 1.0]])
    np.testing.assert_allclose(
        angular_distance(a @ rot.T, b @ rot.T), angular_distance(a, b), atol=1e-9
    )
