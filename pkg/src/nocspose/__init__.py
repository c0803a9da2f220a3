"""Camera pose estimation from NOCS maps, render-and-compare refinement and evaluation."""

from .errors import NocsPoseError
from .evalkit import align_meshes, fscore, pose_metrics, psnr
from .geometry import CameraIntrinsics, PoseSE3, SphericalPose, compose, relative_pose, rotation_error_deg
from .posesolve import NocsMap, PnpResult, SolveConfig, poses_from_nocs, ransac_pnp, solve_pnp
from .raster import TriangleMesh, rasterize, render_nocs_view
from .refine import RefineConfig, RenderLossWeights, refine_pose, render_loss, select_expert

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "NocsMap", "NocsPoseError", "PnpResult", "PoseSE3", "RefineConfig",
    "RenderLossWeights", "SolveConfig", "SphericalPose", "TriangleMesh", "align_meshes", "compose",
    "fscore", "pose_metrics", "poses_from_nocs", "psnr", "ransac_pnp", "rasterize", "refine_pose",
    "relative_pose", "render_loss", "render_nocs_view", "rotation_error_deg", "select_expert", "solve_pnp",
]
