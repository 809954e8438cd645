import hashlib
import json

import numpy as np
import pytest

from monogeo.cli import main
from monogeo.geometry import DepthMap, NormalMap
from monogeo.io import read_mesh_ply, read_pfm, read_pfm_depth, write_intrinsics, write_pfm_depth, write_pfm_normal
from monogeo.synthetic import plane_scene, sphere_cap_scene, square_intrinsics


@pytest.fixture(scope="module")
def scene_dir(tmp_path_factory):
    """Sphere-cap fixture on disk: gt depth, affine pred, normals, intrinsics.

    The ground truth is rescaled to unit median, so the analytic surface is a
    sphere of radius 1/med centered at (0, 0, 2.5/med); both are stashed in
    sphere.json for the reconstruction check.
    """
    d = tmp_path_factory.mktemp("scene")
    K = square_intrinsics(64)
    depth, normals = sphere_cap_scene(K, center_z=2.5, radius=1.0)
    med = float(np.median(depth.values[depth.mask]))
    gt_vals = np.where(depth.mask, depth.values / med, np.nan)
    gt = DepthMap(values=gt_vals, mask=depth.mask, kind="metric")
    pred = DepthMap(values=np.where(depth.mask, (gt_vals - 0.5) / 2.0, np.nan),
                    mask=depth.mask, kind="affine_invariant")
    write_pfm_depth(d / "gt.pfm", gt)
    write_pfm_depth(d / "pred.pfm", pred)
    write_pfm_normal(d / "normals.pfm", normals)
    write_intrinsics(d / "cam.txt", K)
    (d / "sphere.json").write_text(json.dumps({"center_z": 2.5 / med, "radius": 1.0 / med}))
    return d


def _runlog(path):
    with open(str(path) + ".runlog.json") as fh:
        return json.load(fh)


def test_usage_errors_exit_2():
    with pytest.raises(SystemExit) as exc:
        main(["no-such-command"])
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main(["eval-depth", "--pred", "x.pfm"])  # missing required flags
    assert exc.value.code == 2
    with pytest.raises(SystemExit) as exc:
        main([])
    assert exc.value.code == 2


def test_eval_depth(scene_dir, tmp_path, capsys):
    out = tmp_path / "depth_report.json"
    code = main(["eval-depth", "--pred", str(scene_dir / "pred.pfm"),
                 "--gt", str(scene_dir / "gt.pfm"), "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["absrel"] < 1e-5  # float32 storage noise only
    assert report["delta1"] == 1.0
    log = _runlog(out)
    assert log["tool"] == "monogeo" and log["command"] == "eval-depth"
    assert log["parameters"]["alignment"] == "ls"
    entry = log["outputs"][0]
    assert entry["path"] == "depth_report.json"
    assert entry["sha256"] == hashlib.sha256(out.read_bytes()).hexdigest()
    assert entry["bytes"] == out.stat().st_size


def test_eval_depth_computation_error_exits_1(scene_dir, tmp_path, capsys):
    small = tmp_path / "small.pfm"
    write_pfm_depth(small, DepthMap.from_values(np.ones((4, 4))))
    code = main(["eval-depth", "--pred", str(small),
                 "--gt", str(scene_dir / "gt.pfm"), "--out", str(tmp_path / "r.json")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_eval_normal(scene_dir, tmp_path):
    out = tmp_path / "normal_report.json"
    code = main(["eval-normal", "--pred", str(scene_dir / "normals.pfm"),
                 "--gt", str(scene_dir / "normals.pfm"), "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["mean_angular_deg"] < 1e-3
    assert report["pct_within"] == 1.0


def test_gc(scene_dir, tmp_path):
    out = tmp_path / "gc.json"
    code = main(["gc", "--depth", str(scene_dir / "pred.pfm"),
                 "--normal", str(scene_dir / "normals.pfm"),
                 "--gt", str(scene_dir / "gt.pfm"),
                 "--intrinsics", str(scene_dir / "cam.txt"), "--out", str(out)])
    assert code == 0
    # analytic normals vs window-derived ones: discretization error only
    assert json.loads(out.read_text())["geometric_consistency_deg"] < 2.0


def test_align_recovers_scale_shift(scene_dir, tmp_path):
    out = tmp_path / "aligned.pfm"
    report = tmp_path / "align.json"
    code = main(["align", "--pred", str(scene_dir / "pred.pfm"),
                 "--normal", str(scene_dir / "normals.pfm"),
                 "--intrinsics", str(scene_dir / "cam.txt"),
                 "--out", str(out), "--report", str(report)])
    assert code == 0
    rep = json.loads(report.read_text())
    assert rep["scale"] == pytest.approx(2.0, rel=0.1)
    assert rep["shift"] == pytest.approx(0.5, rel=0.1)
    aligned = read_pfm_depth(out)
    gt = read_pfm_depth(scene_dir / "gt.pfm")
    m = aligned.mask & gt.mask
    assert np.median(np.abs(aligned.values[m] - gt.values[m])) < 0.02


def test_align_fronto_parallel_exits_1(tmp_path, capsys):
    K = square_intrinsics(32)
    depth, normals = plane_scene(K, a=0.0, b=0.0, c=2.0)
    pred = DepthMap(values=depth.values / 2.0, mask=depth.mask, kind="affine_invariant")
    write_pfm_depth(tmp_path / "pred.pfm", pred)
    write_pfm_normal(tmp_path / "n.pfm", normals)
    write_intrinsics(tmp_path / "cam.txt", K)
    code = main(["align", "--pred", str(tmp_path / "pred.pfm"),
                 "--normal", str(tmp_path / "n.pfm"),
                 "--intrinsics", str(tmp_path / "cam.txt"),
                 "--out", str(tmp_path / "out.pfm")])
    assert code == 1
    assert "error:" in capsys.readouterr().err


def test_normals_from_depth(scene_dir, tmp_path):
    out = tmp_path / "est.pfm"
    png = tmp_path / "est.png"
    code = main(["normals-from-depth", "--depth", str(scene_dir / "gt.pfm"),
                 "--intrinsics", str(scene_dir / "cam.txt"),
                 "--out", str(out), "--png", str(png)])
    assert code == 0
    assert png.exists()
    est = read_pfm(out)
    assert est.shape == (64, 64, 3)


def test_integrate_orthographic_flat(tmp_path):
    n = np.zeros((12, 12, 3))
    n[..., 2] = 1.0
    write_pfm_normal(tmp_path / "flat.pfm", NormalMap(values=n, mask=np.ones((12, 12), bool)))
    out = tmp_path / "height.pfm"
    code = main(["integrate", "--normal", str(tmp_path / "flat.pfm"),
                 "--model", "orthographic", "--out", str(out)])
    assert code == 0
    np.testing.assert_array_equal(read_pfm(out), np.zeros((12, 12)))


def test_integrate_perspective_needs_intrinsics(scene_dir, tmp_path, capsys):
    code = main(["integrate", "--normal", str(scene_dir / "normals.pfm"),
                 "--model", "perspective", "--out", str(tmp_path / "z.pfm")])
    assert code == 1
    assert "intrinsics" in capsys.readouterr().err


def test_recon_end_to_end(scene_dir, tmp_path):
    mesh_path = tmp_path / "surface.ply"
    fused_path = tmp_path / "fused.pfm"
    report = tmp_path / "recon.json"
    code = main(["recon", "--depth", str(scene_dir / "pred.pfm"),
                 "--normal", str(scene_dir / "normals.pfm"),
                 "--intrinsics", str(scene_dir / "cam.txt"),
                 "--out", str(mesh_path), "--out-depth", str(fused_path),
                 "--report", str(report)])
    assert code == 0
    mesh = read_mesh_ply(mesh_path)
    assert mesh.vertices.shape[0] > 1000
    sphere = json.loads((scene_dir / "sphere.json").read_text())
    dist = np.linalg.norm(
        mesh.vertices - np.array([0.0, 0.0, sphere["center_z"]]), axis=1
    )
    rmse = float(np.sqrt(np.mean((dist - sphere["radius"]) ** 2)))
    assert rmse < 0.02 * sphere["radius"]
    rep = json.loads(report.read_text())
    assert rep["scale"] == pytest.approx(2.0, rel=0.1)
    assert fused_path.exists()
    log = _runlog(mesh_path)
    assert {e["path"] for e in log["outputs"]} >= {"surface.ply", "fused.pfm"}


def test_noise_deterministic(tmp_path):
    a, b = tmp_path / "a.pfm", tmp_path / "b.pfm"
    assert main(["noise", "--shape", "32x32", "--seed", "9", "--out", str(a)]) == 0
    assert main(["noise", "--shape", "32x32", "--seed", "9", "--out", str(b)]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert _runlog(a)["outputs"][0]["sha256"] == _runlog(b)["outputs"][0]["sha256"]
    field = read_pfm(a)
    assert field.shape == (32, 32)
    assert abs(float(np.mean(field**2)) - 1.0) < 1e-6  # unit RMS by construction


def test_noise_bad_shape_exits_2_or_1(tmp_path, capsys):
    code = main(["noise", "--shape", "banana", "--seed", "1", "--out", str(tmp_path / "n.pfm")])
    assert code == 1
    assert "HxW" in capsys.readouterr().err


def test_hist_uniform_ramp(tmp_path):
    cols = np.arange(100, dtype=np.float64) / 99.0
    ramp = DepthMap.from_values(np.tile(cols, (50, 1)) + 1.0)
    write_pfm_depth(tmp_path / "ramp.pfm", ramp)
    out = tmp_path / "hist.json"
    code = main(["hist", str(tmp_path / "ramp.pfm"), "--out", str(out)])
    assert code == 0
    hist = json.loads(out.read_text())
    props = np.asarray(hist["proportions"])
    assert props.shape == (100,)
    np.testing.assert_allclose(props, 0.01, atol=1e-9)


def test_toy_check_green(tmp_path):
    out = tmp_path / "check.json"
    code = main(["toy-check", "--seed", "0", "--coords", "6", "--out", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["passed"] is True
    assert report["gradient_coords_checked"] == 6
    assert report["vp_identity_dev"] < 1e-6
    assert report["v_roundtrip_dev"] < 1e-9
    assert report["attention_row_sum_dev"] < 1e-9
    assert report["attention_symmetry_dev"] == 0.0


def test_toy_train_smoke(tmp_path):
    params_path = tmp_path / "toy.mgtd"
    report = tmp_path / "train.json"
    code = main(["toy-train", "--steps", "3", "--seed", "0", "--out", str(params_path),
                 "--report", str(report), "--size", "8", "--features", "4",
                 "--embed-dim", "16", "--eval-size", "4", "--batch-size", "2"])
    assert code == 0
    from monogeo.diffusion import load_toy_params

    config, params = load_toy_params(params_path)
    assert config.size == 8 and params.size == config.n_params
    rep = json.loads(report.read_text())
    assert rep["steps"] == 3
    assert np.isfinite(rep["final_eval_loss"])
