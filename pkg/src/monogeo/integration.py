"""Surface reconstruction from normal maps.

:func:`integrate_normals` recovers a depth (or height) field whose discrete
gradients match the gradients implied by a normal map. Each pixel constrains
its forward and backward difference along both axes; the two sides are
weighted bilaterally, ``w_plus = sigmoid(k * (r_minus^2 - r_plus^2))``, so
that the side straddling a depth discontinuity loses its vote and edges stay
sharp. The weights depend on the solution, so the quadratic problem is
re-solved under iteratively reweighted least squares with a conjugate
gradient inner solver; a backtracking step keeps the true objective
non-increasing across outer iterations.

Orthographic integration works on the height field directly and is
determined up to an additive constant; perspective integration works in
log-depth (where the normal constraint is linear) and is determined up to a
multiplicative constant. Without a depth prior the gauge is fixed by
anchoring the first valid pixel of each 4-connected mask component at
height 0 (orthographic) or depth 1 (perspective).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.ndimage import label
from scipy.special import expit

from .geometry import DepthMap, Intrinsics, NormalMap, unproject

INTEGRATION_MODELS = ("orthographic", "perspective")

# Normals nearly perpendicular to the viewing direction imply unbounded
# gradients; such pixels are dropped from the system.
_DENOM_EPS = 1e-6

_FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])


class ConvergenceError(RuntimeError):
    """The inner conjugate-gradient solve did not reach tolerance."""

    def __init__(self, message: str, residual: float):
        super().__init__(message)
        self.residual = residual


@dataclass
class IntegrationParams:
    model: str = "perspective"
    irls_iterations: int = 20
    cg_tol: float = 1e-8
    cg_max_iters: int = 5000
    bilateral_k: float = 2.0
    depth_prior_weight: float = 1e-2

    def __post_init__(self):
        if self.model not in INTEGRATION_MODELS:
            raise ValueError(f"model must be one of {INTEGRATION_MODELS}, got {self.model!r}")
        if self.irls_iterations < 1:
            raise ValueError("irls_iterations must be >= 1")
        if not self.cg_tol > 0:
            raise ValueError("cg_tol must be positive")
        if self.cg_max_iters < 1:
            raise ValueError("cg_max_iters must be >= 1")
        if self.bilateral_k < 0:
            raise ValueError("bilateral_k must be non-negative")
        if self.depth_prior_weight < 0:
            raise ValueError("depth_prior_weight must be non-negative")


@dataclass
class IntegrationDiagnostics:
    """Per-outer-iteration energy and inner-solver effort."""

    energies: list[float] = field(default_factory=list)
    cg_iterations: list[int] = field(default_factory=list)
    residuals: list[float] = field(default_factory=list)


@dataclass
class TriangleMesh:
    """Triangle mesh with (V, 3) float vertices and (F, 3) int vertex indices."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64)
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.vertices.ndim != 2 or self.vertices.shape[1] != 3:
            raise ValueError(f"vertices must be (V, 3), got {self.vertices.shape}")
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ValueError(f"faces must be (F, 3), got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face indices out of vertex range")
        if not np.all(np.isfinite(self.vertices)):
            raise ValueError("mesh vertices must be finite")


def _gradient_targets(
    normals: NormalMap, model: str, intrinsics: Intrinsics | None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-pixel (d/du, d/dv) targets and the mask where they are defined."""
    n = normals.values
    if model == "orthographic":
        denom = n[..., 2]
        fx = fy = 1.0
    else:
        if intrinsics is None:
            raise ValueError("perspective integration requires intrinsics")
        if normals.shape != (intrinsics.height, intrinsics.width):
            raise ValueError(
                f"normal map shape {normals.shape} does not match intrinsics "
                f"{intrinsics.height}x{intrinsics.width}"
            )
        denom = np.sum(n * intrinsics.ray_grid(), axis=-1)
        fx, fy = intrinsics.fx, intrinsics.fy
    ok = normals.mask & (np.abs(denom) > _DENOM_EPS)
    tu = np.zeros(normals.shape)
    tv = np.zeros(normals.shape)
    np.divide(-n[..., 0], fx * denom, out=tu, where=ok)
    np.divide(-n[..., 1], fy * denom, out=tv, where=ok)
    return tu, tv, ok


def _one_sided_residuals(z: np.ndarray, mask: np.ndarray, tu: np.ndarray, tv: np.ndarray):
    """Forward/backward residual images per axis; NaN where a side has no pair."""
    zf = np.where(mask, z, np.nan)
    rp_u = np.full(z.shape, np.nan)
    rm_u = np.full(z.shape, np.nan)
    rp_v = np.full(z.shape, np.nan)
    rm_v = np.full(z.shape, np.nan)
    rp_u[:, :-1] = zf[:, 1:] - zf[:, :-1] - tu[:, :-1]
    rm_u[:, 1:] = zf[:, 1:] - zf[:, :-1] - tu[:, 1:]
    rp_v[:-1, :] = zf[1:, :] - zf[:-1, :] - tv[:-1, :]
    rm_v[1:, :] = zf[1:, :] - zf[:-1, :] - tv[1:, :]
    return (rp_u, rm_u), (rp_v, rm_v)


def _side_weights(rp: np.ndarray, rm: np.ndarray, k: float) -> tuple[np.ndarray, np.ndarray]:
    """Bilateral weights for the forward (+) and backward (-) residuals."""
    has_p = np.isfinite(rp)
    has_m = np.isfinite(rm)
    both = has_p & has_m
    wp = np.where(has_p, 1.0, 0.0)
    wm = np.where(has_m, 1.0, 0.0)
    diff = np.zeros(rp.shape)
    diff[both] = rm[both] ** 2 - rp[both] ** 2
    wp[both] = expit(k * diff[both])
    wm[both] = 1.0 - wp[both]
    return wp, wm


def _energy(z, mask, tu, tv, k, lam, prior_vals, prior_mask) -> float:
    total = 0.0
    for rp, rm in _one_sided_residuals(z, mask, tu, tv):
        wp, wm = _side_weights(rp, rm, k)
        total += float(np.nansum(wp * np.nan_to_num(rp) ** 2))
        total += float(np.nansum(wm * np.nan_to_num(rm) ** 2))
    if lam > 0 and prior_mask is not None:
        total += lam * float(np.sum((z[prior_mask] - prior_vals[prior_mask]) ** 2))
    return total


def integrate_normals(
    normals: NormalMap,
    params: IntegrationParams | None = None,
    intrinsics: Intrinsics | None = None,
    prior: DepthMap | None = None,
    return_diagnostics: bool = False,
):
    """Integrate a normal map into a height field or depth map.

    Orthographic output has kind ``affine_invariant`` (a height field, known
    up to an additive constant, anchored at 0); perspective output is metric
    pseudo-depth (anchored at 1, or scaled by the prior when one is given
    with positive weight). Raises :class:`ConvergenceError` if conjugate
    gradients stalls, and ValueError when no usable pixels exist.
    """
    params = params if params is not None else IntegrationParams()
    tu, tv, mask = _gradient_targets(normals, params.model, intrinsics)
    n_px = int(mask.sum())
    if n_px == 0:
        raise ValueError("no valid pixels with usable normals to integrate")

    h, w = mask.shape
    idx = np.full((h, w), -1, dtype=np.int64)
    idx[mask] = np.arange(n_px)

    lam = params.depth_prior_weight if prior is not None else 0.0
    prior_vals = None
    prior_mask = None
    if lam > 0:
        if prior.shape != mask.shape:
            raise ValueError(f"prior shape {prior.shape} does not match normals {mask.shape}")
        prior_mask = mask & prior.mask
        if params.model == "perspective":
            if prior.kind != "metric":
                raise ValueError("perspective integration takes a metric depth prior")
            prior_vals = np.zeros(mask.shape)
            prior_vals[prior_mask] = np.log(prior.values[prior_mask])
        else:
            prior_vals = np.where(prior_mask, prior.values, 0.0)

    # Gauge anchors: one pixel per 4-connected component that the prior term
    # does not already pin down.
    components, n_comp = label(mask, structure=_FOUR_CONNECTED)
    anchors = []
    flat_comp = components.reshape(-1)
    for comp in range(1, n_comp + 1):
        comp_px = flat_comp == comp
        if lam > 0 and np.any(prior_mask.reshape(-1)[comp_px]):
            continue
        anchors.append(idx.reshape(-1)[np.flatnonzero(comp_px)[0]])
    anchors = np.asarray(anchors, dtype=np.int64)

    pairs = []
    for axis, targets in ((1, tu), (0, tv)):
        if axis == 1:
            lo, hi = (slice(None), slice(None, -1)), (slice(None), slice(1, None))
        else:
            lo, hi = (slice(None, -1), slice(None)), (slice(1, None), slice(None))
        pair_mask = mask[lo] & mask[hi]
        pairs.append(
            dict(
                lo_idx=idx[lo][pair_mask],
                hi_idx=idx[hi][pair_mask],
                t_lo=targets[lo][pair_mask],
                t_hi=targets[hi][pair_mask],
                lo_sel=lo,
                hi_sel=hi,
                pair_mask=pair_mask,
            )
        )
    if all(p["lo_idx"].size == 0 for p in pairs) and lam == 0:
        raise ValueError("mask has no adjacent valid pixels; nothing to integrate")

    z = np.zeros((h, w))
    if lam > 0:
        z[prior_mask] = prior_vals[prior_mask]
    zvec = z[mask].copy()

    def energy_of(vec: np.ndarray) -> float:
        img = np.zeros((h, w))
        img[mask] = vec
        return _energy(img, mask, tu, tv, params.bilateral_k, lam, prior_vals, prior_mask)

    diagnostics = IntegrationDiagnostics()
    energy = energy_of(zvec)

    for _ in range(params.irls_iterations):
        img = np.zeros((h, w))
        img[mask] = zvec
        sides = _one_sided_residuals(img, mask, tu, tv)

        rows_i, rows_j, rows_w, rows_t = [], [], [], []
        for (rp, rm), p in zip(sides, pairs):
            wp, wm = _side_weights(rp, rm, params.bilateral_k)
            w_lo = wp[p["lo_sel"]][p["pair_mask"]]  # forward weight at the low pixel
            w_hi = wm[p["hi_sel"]][p["pair_mask"]]  # backward weight at the high pixel
            for wgt, tgt in ((w_lo, p["t_lo"]), (w_hi, p["t_hi"])):
                rows_i.append(p["hi_idx"])
                rows_j.append(p["lo_idx"])
                rows_w.append(wgt)
                rows_t.append(tgt)

        hi_all = np.concatenate(rows_i) if rows_i else np.empty(0, dtype=np.int64)
        lo_all = np.concatenate(rows_j) if rows_j else np.empty(0, dtype=np.int64)
        w_all = np.concatenate(rows_w) if rows_w else np.empty(0)
        t_all = np.concatenate(rows_t) if rows_t else np.empty(0)

        data = np.concatenate([w_all, w_all, -w_all, -w_all])
        ii = np.concatenate([hi_all, lo_all, hi_all, lo_all])
        jj = np.concatenate([hi_all, lo_all, lo_all, hi_all])
        rhs = np.zeros(n_px)
        np.add.at(rhs, hi_all, w_all * t_all)
        np.add.at(rhs, lo_all, -w_all * t_all)

        if lam > 0:
            pv = prior_vals[prior_mask]
            pidx = idx[prior_mask]
            ii = np.concatenate([ii, pidx])
            jj = np.concatenate([jj, pidx])
            data = np.concatenate([data, np.full(pidx.size, lam)])
            np.add.at(rhs, pidx, lam * pv)
        if anchors.size:
            ii = np.concatenate([ii, anchors])
            jj = np.concatenate([jj, anchors])
            data = np.concatenate([data, np.ones(anchors.size)])
            # anchored value is 0 in both parameterizations, so rhs is unchanged

        system = sp.coo_matrix((data, (ii, jj)), shape=(n_px, n_px)).tocsr()
        diag = system.diagonal()
        precond = sp.diags(1.0 / np.maximum(diag, np.finfo(float).tiny))

        iters = [0]

        def count(_xk):
            iters[0] += 1

        solution, info = sp.linalg.cg(
            system,
            rhs,
            x0=zvec,
            rtol=params.cg_tol,
            maxiter=params.cg_max_iters,
            M=precond,
            callback=count,
        )
        bnorm = float(np.linalg.norm(rhs))
        residual = float(np.linalg.norm(system @ solution - rhs)) / max(bnorm, 1e-300)
        if info != 0:
            raise ConvergenceError(
                f"conjugate gradients did not converge within {params.cg_max_iters} "
                f"iterations (relative residual {residual:.3e})",
                residual=residual,
            )

        # The bilateral weights move with z, so the exact objective can rise
        # after a full reweighted step; backtrack along the step if needed.
        new_energy = energy_of(solution)
        step = solution - zvec
        eta = 1.0
        while new_energy > energy * (1 + 1e-12) + 1e-15 and eta > 1e-4:
            eta *= 0.5
            new_energy = energy_of(zvec + eta * step)
        if new_energy > energy * (1 + 1e-12) + 1e-15:
            break
        zvec = zvec + eta * step
        moved = energy - new_energy
        energy = new_energy
        diagnostics.energies.append(energy)
        diagnostics.cg_iterations.append(iters[0])
        diagnostics.residuals.append(residual)
        if moved <= 1e-12 * max(energy, 1.0):
            break

    out = np.full((h, w), np.nan)
    if params.model == "perspective":
        out[mask] = np.exp(zvec)
        result = DepthMap(values=out, mask=mask, kind="metric")
    else:
        out[mask] = zvec
        result = DepthMap(values=out, mask=mask, kind="affine_invariant")
    if return_diagnostics:
        return result, diagnostics
    return result


def mesh_from_depth(
    depth: DepthMap, intrinsics: Intrinsics, max_depth_ratio: float = 1.2
) -> TriangleMesh:
    """Triangulate a metric depth map into a camera-frame mesh.

    Each valid 2x2 pixel quad yields two triangles; quads with exactly three
    valid corners yield one. Triangles spanning a depth discontinuity, where
    the deepest vertex exceeds the shallowest by more than
    ``max_depth_ratio``, are dropped, as are zero-area triangles. Faces wind
    so their geometric normal points toward the camera.
    """
    if not max_depth_ratio > 1.0:
        raise ValueError(f"max_depth_ratio must exceed 1, got {max_depth_ratio}")
    points = unproject(depth, intrinsics)
    h, w = depth.shape
    m = depth.mask

    grid_idx = np.full((h, w), -1, dtype=np.int64)
    grid_idx[m] = np.arange(int(m.sum()))

    a = grid_idx[:-1, :-1]
    b = grid_idx[:-1, 1:]
    c = grid_idx[1:, :-1]
    d = grid_idx[1:, 1:]
    va, vb, vc, vd = a >= 0, b >= 0, c >= 0, d >= 0
    n_valid = va.astype(int) + vb + vc + vd

    tris = []
    full = n_valid == 4
    tris.append(np.stack([a[full], c[full], b[full]], axis=1))
    tris.append(np.stack([b[full], c[full], d[full]], axis=1))
    for missing, tri in ((va, (b, c, d)), (vb, (a, c, d)), (vc, (a, d, b)), (vd, (a, c, b))):
        sel = (n_valid == 3) & ~missing
        tris.append(np.stack([tri[0][sel], tri[1][sel], tri[2][sel]], axis=1))
    faces = np.concatenate(tris, axis=0) if tris else np.empty((0, 3), dtype=np.int64)

    vertices = points[m]
    if faces.size:
        zs = vertices[:, 2][faces]
        keep = zs.max(axis=1) <= max_depth_ratio * zs.min(axis=1)
        faces = faces[keep]
        e1 = vertices[faces[:, 1]] - vertices[faces[:, 0]]
        e2 = vertices[faces[:, 2]] - vertices[faces[:, 0]]
        area2 = np.linalg.norm(np.cross(e1, e2), axis=1)
        faces = faces[area2 > 0]

    used = np.unique(faces) if faces.size else np.empty(0, dtype=np.int64)
    remap = np.full(len(vertices), -1, dtype=np.int64)
    remap[used] = np.arange(used.size)
    return TriangleMesh(vertices=vertices[used], faces=remap[faces] if faces.size else faces)


@dataclass
class ReconstructionResult:
    mesh: TriangleMesh
    aligned_depth: DepthMap
    fused_depth: DepthMap
    alignment: "object"


def reconstruct(
    pred_depth: DepthMap,
    pred_normal: NormalMap,
    intrinsics: Intrinsics,
    params: IntegrationParams | None = None,
    window: int = 5,
    target_median: float = 1.0,
    max_depth_ratio: float = 1.2,
) -> ReconstructionResult:
    """Full single-view pipeline: align depth to normals, integrate, mesh.

    The relative depth prediction is promoted to pseudo-metric depth via
    :func:`monogeo.alignment.optimize_scale_shift_by_normal`, fused with the
    normals by perspective bilateral integration (the aligned depth acts as
    the prior that pins scale), and triangulated.
    """
    from .alignment import apply_affine, optimize_scale_shift_by_normal

    params = params if params is not None else IntegrationParams(model="perspective")
    if params.model != "perspective":
        raise ValueError("reconstruct requires perspective integration")
    aff = optimize_scale_shift_by_normal(
        pred_depth, pred_normal, intrinsics, window=window, target_median=target_median
    )
    aligned = apply_affine(pred_depth, aff)
    fused = integrate_normals(pred_normal, params, intrinsics, prior=aligned)
    mesh = mesh_from_depth(fused, intrinsics, max_depth_ratio=max_depth_ratio)
    return ReconstructionResult(mesh=mesh, aligned_depth=aligned, fused_depth=fused, alignment=aff)
