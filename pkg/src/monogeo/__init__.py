"""Monocular geometry toolkit: depth/normal maps, alignment, integration.

Submodules:

- ``geometry``: camera model, depth/normal containers, normals from depth
- ``alignment``: affine depth alignment, normal-guided scale/shift recovery
- ``integration``: bilateral normal integration, meshing, reconstruction
- ``diffusion``: variance-preserving schedules, multiresolution noise,
  conditioning encodings, cross-domain attention, toy denoiser
- ``metrics``: depth/normal evaluation, geometric consistency, histograms
- ``io``: PFM / PNG / OBJ / PLY / config readers and writers
- ``cli``: command-line entry points
- ``synthetic``: analytic test scenes with exact ground truth
"""

from .alignment import (
    AffineDepthParams,
    DegenerateFitError,
    UnidentifiableSceneError,
    apply_affine,
    fit_affine_ls,
    normal_consistency_objective,
    optimize_scale_shift_by_normal,
)
from .geometry import (
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
from .integration import (
    ConvergenceError,
    IntegrationDiagnostics,
    IntegrationParams,
    ReconstructionResult,
    TriangleMesh,
    integrate_normals,
    mesh_from_depth,
    reconstruct,
)
from .metrics import (
    DepthHistogram,
    MetricReport,
    absrel,
    delta1,
    full_report,
    geometric_consistency,
    normal_metrics,
    prealign,
    scene_depth_histogram,
)

__version__ = "0.1.0"

__all__ = [
    "AffineDepthParams",
    "ConvergenceError",
    "DegenerateFitError",
    "DepthHistogram",
    "DepthMap",
    "IntegrationDiagnostics",
    "IntegrationParams",
    "Intrinsics",
    "MetricReport",
    "NormalMap",
    "ReconstructionResult",
    "TriangleMesh",
    "UnidentifiableSceneError",
    "absrel",
    "angular_distance",
    "apply_affine",
    "apply_far_plane",
    "decode_normal_rgb",
    "delta1",
    "encode_normal_rgb",
    "fit_affine_ls",
    "full_report",
    "geometric_consistency",
    "integrate_normals",
    "mesh_from_depth",
    "normal_consistency_objective",
    "normal_metrics",
    "normals_from_depth",
    "optimize_scale_shift_by_normal",
    "prealign",
    "reconstruct",
    "scene_depth_histogram",
    "unproject",
    "__version__",
]
