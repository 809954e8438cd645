"""Command-line tools for depth/normal evaluation and reconstruction.

Exit codes: 0 on success, 1 when a computation fails (bad file contents,
degenerate scenes, non-convergence), 2 for usage errors. Commands that draw
random numbers require an explicit ``--seed``; given identical inputs and
seeds, every output file is byte-identical across runs. Each command writes
a ``<out>.runlog.json`` next to its primary output recording the tool
version, parameters, and a digest of every file produced.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys

import numpy as np

from . import __version__
from .alignment import apply_affine, optimize_scale_shift_by_normal
from .diffusion import ToyConfig, ToyDenoiser, make_schedule, multires_noise, save_toy_params, train_toy
from .diffusion.toy import draw_step_noise, make_toy_batch
from .geometry import DEPTH_KINDS, normals_from_depth
from .integration import IntegrationParams, integrate_normals, reconstruct
from .io import (
    FormatError,
    atomic_write_text,
    read_depth_png16,
    read_intrinsics,
    read_normal_png,
    read_pfm_depth,
    read_pfm_normal,
    write_depth_png16,
    write_mesh,
    write_normal_png,
    write_pfm_depth,
    write_pfm_normal,
)
from .metrics import (
    ALIGNMENT_MODES,
    absrel,
    delta1,
    geometric_consistency,
    normal_metrics,
    prealign,
    scene_depth_histogram,
)


def _load_depth(path: str, kind: str = "metric", divisor: float = 256.0):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        return read_pfm_depth(path, kind=kind)
    if ext == ".png":
        return read_depth_png16(path, divisor=divisor, kind=kind)
    raise FormatError(f"unsupported depth file extension {ext!r}, expected .pfm or .png")


def _save_depth(path: str, depth, divisor: float = 256.0) -> None:
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        write_pfm_depth(path, depth)
    elif ext == ".png":
        write_depth_png16(path, depth, divisor=divisor)
    else:
        raise FormatError(f"unsupported depth file extension {ext!r}, expected .pfm or .png")


def _load_normal(path: str):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".pfm":
        return read_pfm_normal(path)
    if ext == ".png":
        return read_normal_png(path)
    raise FormatError(f"unsupported normal file extension {ext!r}, expected .pfm or .png")


def _sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _write_json(path: str, payload: dict) -> None:
    atomic_write_text(path, json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _write_run_log(args: argparse.Namespace, outputs: list[str]) -> None:
    # No timestamps: the log itself must be byte-reproducible.
    params = {k: v for k, v in vars(args).items() if k not in ("func", "command")}
    log = {
        "tool": "monogeo",
        "version": __version__,
        "command": args.command,
        "parameters": params,
        "outputs": [
            {"path": os.path.basename(p), "bytes": os.path.getsize(p), "sha256": _sha256(p)}
            for p in outputs
        ],
    }
    _write_json(outputs[0] + ".runlog.json", log)


# ---------------------------------------------------------------------------
# Command handlers

def _cmd_eval_depth(args) -> int:
    pred = _load_depth(args.pred, kind=args.pred_kind, divisor=args.divisor)
    gt = _load_depth(args.gt, kind="metric", divisor=args.divisor)
    aligned = prealign(pred, gt, mode=args.alignment)
    report = {
        "absrel": absrel(aligned, gt),
        "delta1": delta1(aligned, gt),
        "pixel_count": int(np.count_nonzero(aligned.mask & gt.mask)),
        "alignment": args.alignment,
    }
    _write_json(args.out, report)
    _write_run_log(args, [args.out])
    print(json.dumps(report, sort_keys=True))
    return 0


def _cmd_eval_normal(args) -> int:
    pred = _load_normal(args.pred)
    gt = _load_normal(args.gt)
    mean_deg, within = normal_metrics(pred, gt, inlier_deg=args.inlier_deg)
    report = {
        "mean_angular_deg": mean_deg,
        "pct_within": within,
        "inlier_deg": args.inlier_deg,
        "pixel_count": int(np.count_nonzero(pred.mask & gt.mask)),
    }
    _write_json(args.out, report)
    _write_run_log(args, [args.out])
    print(json.dumps(report, sort_keys=True))
    return 0


def _cmd_gc(args) -> int:
    pred_depth = _load_depth(args.depth, kind=args.pred_kind, divisor=args.divisor)
    pred_normal = _load_normal(args.normal)
    gt = _load_depth(args.gt, kind="metric", divisor=args.divisor)
    intrinsics = read_intrinsics(args.intrinsics)
    value = geometric_consistency(pred_depth, pred_normal, gt, intrinsics, window=args.window)
    report = {"geometric_consistency_deg": value, "window": args.window}
    _write_json(args.out, report)
    _write_run_log(args, [args.out])
    print(json.dumps(report, sort_keys=True))
    return 0


def _cmd_align(args) -> int:
    pred = _load_depth(args.pred, kind="affine_invariant", divisor=args.divisor)
    normal = _load_normal(args.normal)
    intrinsics = read_intrinsics(args.intrinsics)
    params = optimize_scale_shift_by_normal(
        pred, normal, intrinsics, window=args.window, target_median=args.target_median
    )
    aligned = apply_affine(pred, params)
    write_pfm_depth(args.out, aligned)
    outputs = [args.out]
    if args.report:
        _write_json(args.report, {
            "scale": params.scale,
            "shift": params.shift,
            "target_median": args.target_median,
        })
        outputs.append(args.report)
    _write_run_log(args, outputs)
    print(json.dumps({"scale": params.scale, "shift": params.shift}, sort_keys=True))
    return 0


def _cmd_normals_from_depth(args) -> int:
    depth = _load_depth(args.depth, kind="metric", divisor=args.divisor)
    intrinsics = read_intrinsics(args.intrinsics)
    normals = normals_from_depth(depth, intrinsics, window=args.window)
    write_pfm_normal(args.out, normals)
    outputs = [args.out]
    if args.png:
        write_normal_png(args.png, normals)
        outputs.append(args.png)
    _write_run_log(args, outputs)
    return 0


def _cmd_integrate(args) -> int:
    normals = _load_normal(args.normal)
    intrinsics = read_intrinsics(args.intrinsics) if args.intrinsics else None
    prior = None
    if args.prior:
        prior_kind = "metric" if args.model == "perspective" else "affine_invariant"
        prior = _load_depth(args.prior, kind=prior_kind, divisor=args.divisor)
    params = IntegrationParams(
        model=args.model,
        irls_iterations=args.iterations,
        cg_tol=args.cg_tol,
        cg_max_iters=args.cg_max_iters,
        bilateral_k=args.k,
        depth_prior_weight=args.prior_weight,
    )
    depth, diagnostics = integrate_normals(
        normals, params=params, intrinsics=intrinsics, prior=prior, return_diagnostics=True
    )
    write_pfm_depth(args.out, depth)
    outputs = [args.out]
    if args.report:
        _write_json(args.report, {
            "model": args.model,
            "energies": diagnostics.energies,
            "cg_iterations": diagnostics.cg_iterations,
        })
        outputs.append(args.report)
    _write_run_log(args, outputs)
    return 0


def _cmd_recon(args) -> int:
    pred_depth = _load_depth(args.depth, kind="affine_invariant", divisor=args.divisor)
    pred_normal = _load_normal(args.normal)
    intrinsics = read_intrinsics(args.intrinsics)
    params = IntegrationParams(
        model="perspective",
        irls_iterations=args.iterations,
        bilateral_k=args.k,
        depth_prior_weight=args.prior_weight,
    )
    result = reconstruct(
        pred_depth, pred_normal, intrinsics,
        params=params, window=args.window,
        target_median=args.target_median, max_depth_ratio=args.max_depth_ratio,
    )
    write_mesh(args.out, result.mesh)
    outputs = [args.out]
    if args.out_depth:
        write_pfm_depth(args.out_depth, result.fused_depth)
        outputs.append(args.out_depth)
    summary = {
        "scale": result.alignment.scale,
        "shift": result.alignment.shift,
        "vertices": int(len(result.mesh.vertices)),
        "faces": int(len(result.mesh.faces)),
    }
    if args.report:
        _write_json(args.report, summary)
        outputs.append(args.report)
    _write_run_log(args, outputs)
    print(json.dumps(summary, sort_keys=True))
    return 0


def _parse_shape(text: str) -> tuple[int, int]:
    parts = text.lower().split("x")
    if len(parts) != 2:
        raise FormatError(f"shape must look like HxW, got {text!r}")
    try:
        h, w = int(parts[0]), int(parts[1])
    except ValueError:
        raise FormatError(f"shape must look like HxW, got {text!r}") from None
    if h <= 0 or w <= 0:
        raise FormatError(f"shape dimensions must be positive, got {text!r}")
    return h, w


def _cmd_noise(args) -> int:
    h, w = _parse_shape(args.shape)
    rng = np.random.default_rng(args.seed)
    sample = multires_noise((1, h, w), levels=args.levels, decay=args.decay, rng=rng)[0]
    from .io import write_pfm

    write_pfm(args.out, sample.astype(np.float32))
    _write_run_log(args, [args.out])
    print(json.dumps({"mean": float(sample.mean()), "var": float(sample.var())}, sort_keys=True))
    return 0


def _cmd_hist(args) -> int:
    depths = [_load_depth(p, kind="affine_invariant", divisor=args.divisor) for p in args.depths]
    hist = scene_depth_histogram(depths, far=args.far)
    report = {
        "bin_edges": hist.bin_edges.tolist(),
        "proportions": hist.proportions.tolist(),
        "skipped": hist.skipped,
        "images": len(depths),
    }
    _write_json(args.out, report)
    _write_run_log(args, [args.out])
    return 0


def _cmd_toy_check(args) -> int:
    from .diffusion import (
        AttentionWeights,
        cross_domain_attention,
        forward_diffuse,
        recover_from_v,
        v_target,
    )

    rng = np.random.default_rng(args.seed)
    report: dict = {}

    # variance preservation and v-prediction round trips
    vp_dev = 0.0
    roundtrip_dev = 0.0
    for kind in ("scaled_linear", "cosine"):
        sched = make_schedule(timesteps=200, kind=kind)
        vp_dev = max(vp_dev, float(np.abs(sched.alpha**2 + sched.sigma**2 - 1.0).max()))
        for _ in range(100):
            t = int(rng.integers(1, sched.timesteps + 1))
            z0 = rng.standard_normal((2, 3, 3))
            eps = rng.standard_normal((2, 3, 3))
            z_t = forward_diffuse(z0, eps, t, sched)
            z0r, epsr = recover_from_v(z_t, v_target(z0, eps, t, sched), t, sched)
            roundtrip_dev = max(
                roundtrip_dev, float(np.abs(z0r - z0).max()), float(np.abs(epsr - eps).max())
            )
    report["vp_identity_dev"] = vp_dev
    report["v_roundtrip_dev"] = roundtrip_dev

    # attention properties: row-stochastic, symmetric under identical inputs
    dim = 6
    weights = AttentionWeights(
        q=rng.standard_normal((dim, dim)),
        k=rng.standard_normal((dim, dim)),
        v=rng.standard_normal((dim, dim)),
    )
    tokens = rng.standard_normal((5, dim))
    out_d, out_n, att_d, att_n = cross_domain_attention(
        tokens, tokens.copy(), weights, return_attention=True
    )
    report["attention_row_sum_dev"] = float(
        max(np.abs(att_d.sum(-1) - 1.0).max(), np.abs(att_n.sum(-1) - 1.0).max())
    )
    report["attention_symmetry_dev"] = float(np.abs(out_d - out_n).max())

    # gradients against central finite differences
    config = ToyConfig(size=args.size, features=args.features, embed_dim=args.embed_dim)
    model = ToyDenoiser(config)
    params = model.init_params(rng)
    batch = make_toy_batch(config, 2, rng)
    schedule = make_schedule(timesteps=50)
    t, eps_d, eps_n = draw_step_noise(batch, schedule, rng)
    loss, grads = model.loss_and_grads(params, batch, t, eps_d, eps_n, schedule)

    coords = rng.choice(params.size, size=min(args.coords, params.size), replace=False)
    step = args.step
    # float64 FD noise floor; below it relative comparison is meaningless
    atol = 64.0 * np.finfo(float).eps * (1.0 + abs(loss)) / (2.0 * step)
    worst = 0.0
    for idx in coords:
        shifted = params.copy()
        shifted[idx] = params[idx] + step
        hi, _ = model.loss_and_grads(shifted, batch, t, eps_d, eps_n, schedule)
        shifted[idx] = params[idx] - step
        lo, _ = model.loss_and_grads(shifted, batch, t, eps_d, eps_n, schedule)
        fd = (hi - lo) / (2.0 * step)
        worst = max(worst, abs(fd - grads[idx]) / max(abs(fd), abs(grads[idx]), atol / args.tol))
    report["gradient_max_rel_error"] = worst
    report["gradient_coords_checked"] = int(len(coords))

    checks = {
        "vp_identity": vp_dev <= 1e-6,
        "v_roundtrip": roundtrip_dev <= 1e-9,
        "attention_rows": report["attention_row_sum_dev"] <= 1e-9,
        "attention_symmetry": report["attention_symmetry_dev"] == 0.0,
        "gradients": worst <= args.tol,
    }
    report["passed"] = bool(all(checks.values()))
    if args.out:
        _write_json(args.out, report)
        _write_run_log(args, [args.out])
    print(json.dumps(report, sort_keys=True))
    if not report["passed"]:
        failed = ", ".join(name for name, ok in checks.items() if not ok)
        print(f"error: checks failed: {failed}", file=sys.stderr)
        return 1
    return 0


def _cmd_toy_train(args) -> int:
    config = ToyConfig(size=args.size, features=args.features, embed_dim=args.embed_dim)
    schedule = make_schedule(timesteps=args.timesteps, kind=args.schedule)
    result = train_toy(
        steps=args.steps, seed=args.seed, lr=args.lr,
        batch_size=args.batch_size, config=config, schedule=schedule,
        eval_size=args.eval_size,
    )
    save_toy_params(args.out, config, result.params)
    outputs = [args.out]
    summary = {
        "steps": args.steps,
        "initial_eval_loss": result.initial_eval_loss,
        "final_eval_loss": result.final_eval_loss,
        "reduction": 1.0 - result.final_eval_loss / result.initial_eval_loss,
    }
    if args.report:
        _write_json(args.report, summary)
        outputs.append(args.report)
    _write_run_log(args, outputs)
    print(json.dumps(summary, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# Parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="monogeo",
        description="Depth/normal map evaluation, alignment, and reconstruction tools.",
    )
    parser.add_argument("--version", action="version", version=f"monogeo {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text)
        p.set_defaults(func=func)
        return p

    p = add("eval-depth", _cmd_eval_depth, "depth accuracy metrics (AbsRel, delta1)")
    p.add_argument("--pred", required=True, help="predicted depth (.pfm or 16-bit .png)")
    p.add_argument("--gt", required=True, help="ground-truth metric depth")
    p.add_argument("--out", required=True, help="output JSON report")
    p.add_argument("--alignment", choices=ALIGNMENT_MODES, default="ls")
    p.add_argument("--pred-kind", choices=DEPTH_KINDS, default="affine_invariant")
    p.add_argument("--divisor", type=float, default=256.0, help="PNG integer-to-depth divisor")

    p = add("eval-normal", _cmd_eval_normal, "normal accuracy metrics (mean angle, inlier rate)")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--inlier-deg", type=float, default=11.25)

    p = add("gc", _cmd_gc, "geometric consistency between predicted depth and normals")
    p.add_argument("--depth", required=True, help="predicted depth")
    p.add_argument("--normal", required=True, help="predicted normals")
    p.add_argument("--gt", required=True, help="ground-truth metric depth (alignment target)")
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--pred-kind", choices=DEPTH_KINDS, default="affine_invariant")
    p.add_argument("--divisor", type=float, default=256.0)

    p = add("align", _cmd_align, "recover scale/shift for affine depth from its normals")
    p.add_argument("--pred", required=True, help="affine-invariant depth")
    p.add_argument("--normal", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True, help="aligned depth (.pfm)")
    p.add_argument("--report", help="optional JSON with recovered scale/shift")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--target-median", type=float, default=1.0)
    p.add_argument("--divisor", type=float, default=256.0)

    p = add("normals-from-depth", _cmd_normals_from_depth, "estimate normals from metric depth")
    p.add_argument("--depth", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True, help="output normal map (.pfm)")
    p.add_argument("--png", help="optional 8-bit RGB visualization")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--divisor", type=float, default=256.0)

    p = add("integrate", _cmd_integrate, "integrate a normal map into a depth/height map")
    p.add_argument("--normal", required=True)
    p.add_argument("--out", required=True, help="output depth (.pfm)")
    p.add_argument("--model", choices=("perspective", "orthographic"), default="perspective")
    p.add_argument("--intrinsics", help="required for the perspective model")
    p.add_argument("--prior", help="optional depth prior (.pfm or .png)")
    p.add_argument("--prior-weight", type=float, default=1e-2)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--k", type=float, default=2.0, help="bilateral weight sharpness")
    p.add_argument("--cg-tol", type=float, default=1e-8)
    p.add_argument("--cg-max-iters", type=int, default=5000)
    p.add_argument("--report", help="optional JSON with solver diagnostics")
    p.add_argument("--divisor", type=float, default=256.0)

    p = add("recon", _cmd_recon, "align, fuse, and mesh an affine depth + normal prediction")
    p.add_argument("--depth", required=True, help="affine-invariant depth")
    p.add_argument("--normal", required=True)
    p.add_argument("--intrinsics", required=True)
    p.add_argument("--out", required=True, help="output mesh (.ply or .obj)")
    p.add_argument("--out-depth", help="optional fused depth (.pfm)")
    p.add_argument("--report", help="optional JSON summary")
    p.add_argument("--window", type=int, default=5)
    p.add_argument("--target-median", type=float, default=1.0)
    p.add_argument("--max-depth-ratio", type=float, default=1.2)
    p.add_argument("--iterations", type=int, default=20)
    p.add_argument("--k", type=float, default=2.0)
    p.add_argument("--prior-weight", type=float, default=1e-2)
    p.add_argument("--divisor", type=float, default=256.0)

    p = add("noise", _cmd_noise, "sample multiresolution noise to a PFM file")
    p.add_argument("--shape", required=True, help="HxW, e.g. 64x64")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--levels", type=int, default=4)
    p.add_argument("--decay", type=float, default=0.5)

    p = add("hist", _cmd_hist, "pooled normalized depth histogram over many images")
    p.add_argument("depths", nargs="+", help="depth files (.pfm or .png)")
    p.add_argument("--out", required=True)
    p.add_argument("--far", type=float, default=float("inf"))
    p.add_argument("--divisor", type=float, default=256.0)

    p = add("toy-check", _cmd_toy_check, "finite-difference check of toy denoiser gradients")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--size", type=int, default=8)
    p.add_argument("--features", type=int, default=4)
    p.add_argument("--embed-dim", type=int, default=16)
    p.add_argument("--coords", type=int, default=10)
    p.add_argument("--step", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--out", help="optional JSON report")

    p = add("toy-train", _cmd_toy_train, "train the toy denoiser and save its parameters")
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output parameter file")
    p.add_argument("--report", help="optional JSON summary")
    p.add_argument("--lr", type=float, default=3e-3)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--features", type=int, default=16)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--timesteps", type=int, default=1000)
    p.add_argument("--schedule", choices=("scaled_linear", "cosine"), default="scaled_linear")
    p.add_argument("--eval-size", type=int, default=32)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, RuntimeError, OSError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
