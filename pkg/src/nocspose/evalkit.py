"""Evaluation protocol: pairwise relative-pose metrics, mesh alignment, F-score and PSNR."""

from __future__ import annotations

import csv
import io
import itertools
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptyMesh, LengthMismatch, ShapeMismatch, TooFewPoints, ZeroFirstTranslation
from .geometry import CameraIntrinsics, PoseSE3, SphericalPose, relative_pose, rotation_error_deg
from .raster import TriangleMesh, rasterize

ACC_THRESHOLDS_DEG = (15.0, 30.0)
FSCORE_THRESHOLD = 0.05
INLIER_DISTANCE = 0.05
PSNR_CAP_DB = 99.0
N_SURFACE_POINTS = 100_000
ALIGN_ROTATIONS = 12
ALIGN_SCALES = tuple(np.linspace(0.6, 1.4, 10))


# --- relative pose metrics -------------------------------------------------

@dataclass(frozen=True)
class PosePairError:
    view_i: int
    view_j: int
    rotation_error: float
    translation_error: float


@dataclass
class PoseMetricsReport:
    median_rotation_error: float
    acc_at_15: float
    acc_at_30: float
    median_translation_error: float
    pair_count: int
    pairs: list = field(default_factory=list)

    def to_json(self) -> dict:
        return {
            "median_rot_err_deg": self.median_rotation_error,
            "acc_at_15": self.acc_at_15,
            "acc_at_30": self.acc_at_30,
            "median_trans_err": self.median_translation_error,
            "pair_count": self.pair_count,
        }

    def pairs_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["view_i", "view_j", "rotation_error_deg", "translation_error"])
        for p in self.pairs:
            w.writerow([p.view_i, p.view_j, repr(p.rotation_error), repr(p.translation_error)])
        return buf.getvalue()


def pose_metrics(pred: Sequence[PoseSE3], gt: Sequence[PoseSE3]) -> PoseMetricsReport:
    """Compare relative poses over all view pairs i < j.

    Predicted translations are first rescaled by the single factor that
    gives the first view the ground-truth translation norm, which removes
    the global scale ambiguity of the prediction.
    """
    if len(pred) != len(gt):
        raise LengthMismatch(f"{len(pred)} predicted poses vs {len(gt)} ground-truth poses")
    if len(pred) < 2:
        raise LengthMismatch("need at least two views")
    n0 = float(np.linalg.norm(pred[0].translation))
    if n0 == 0.0:
        raise ZeroFirstTranslation("first predicted translation has zero norm")
    s = float(np.linalg.norm(gt[0].translation)) / n0
    scaled = [PoseSE3(p.rotation, s * p.translation) for p in pred]
    pairs = []
    for i, j in itertools.combinations(range(len(pred)), 2):
        rp = relative_pose(scaled[i], scaled[j])
        rg = relative_pose(gt[i], gt[j])
        pairs.append(PosePairError(
            i, j,
            rotation_error_deg(rp.rotation, rg.rotation),
            float(np.linalg.norm(rp.translation - rg.translation)),
        ))
    rot = np.array([p.rotation_error for p in pairs])
    tra = np.array([p.translation_error for p in pairs])
    return PoseMetricsReport(
        median_rotation_error=float(np.median(rot)),
        acc_at_15=float(np.mean(rot < ACC_THRESHOLDS_DEG[0])),
        acc_at_30=float(np.mean(rot < ACC_THRESHOLDS_DEG[1])),
        median_translation_error=float(np.median(tra)),
        pair_count=len(pairs),
        pairs=pairs,
    )


# --- similarity transforms and ICP ----------------------------------------

@dataclass(frozen=True)
class SimilarityTransform:
    """x -> scale * R @ x + t."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", np.asarray(self.rotation, dtype=np.float64).reshape(3, 3))
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64).reshape(3))

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        return self.scale * np.asarray(points, dtype=np.float64) @ self.rotation.T + self.translation

    def __matmul__(self, other: "SimilarityTransform") -> "SimilarityTransform":
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def to_json(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
        }


def umeyama(src: np.ndarray, dst: np.ndarray, with_scale: bool = True) -> SimilarityTransform:
    """Least-squares similarity mapping ``src`` onto ``dst`` (row-paired points)."""
    mu_s, mu_d = src.mean(axis=0), dst.mean(axis=0)
    xs, xd = src - mu_s, dst - mu_d
    cov = xd.T @ xs / len(src)
    u, d, vt = np.linalg.svd(cov)
    sgn = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        sgn[2] = -1.0
    r = u @ np.diag(sgn) @ vt
    var = float(np.mean(np.sum(xs * xs, axis=1)))
    s = float(np.sum(d * sgn) / var) if with_scale and var > 0 else 1.0
    if not s > 0:
        s = 1.0
    return SimilarityTransform(s, r, mu_d - s * r @ mu_s)


@dataclass
class IcpResult:
    transform: SimilarityTransform
    inlier_ratio: float
    rms: float
    iterations: int


def icp(
    source,
    target,
    init: SimilarityTransform = SimilarityTransform(),
    max_iters: int = 50,
    tolerance: float = 1e-7,
    inlier_distance: float = INLIER_DISTANCE,
    target_tree: Optional[cKDTree] = None,
) -> IcpResult:
    """Point-to-point ICP with a closed-form similarity fit per iteration.

    Stops when the rms nearest-neighbour distance changes by less than
    ``tolerance`` or after ``max_iters`` fits. The inlier ratio is the
    fraction of transformed source points whose nearest target point is
    closer than ``inlier_distance``.
    """
    src = np.asarray(source, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(target, dtype=np.float64).reshape(-1, 3)
    if len(src) < 3 or len(dst) < 3:
        raise TooFewPoints("ICP needs at least 3 points in each cloud")
    tree = target_tree if target_tree is not None else cKDTree(dst)
    tf = init
    dist, idx = tree.query(tf.apply(src))
    rms = float(np.sqrt(np.mean(dist * dist)))
    it = 0
    while it < max_iters:
        it += 1
        tf = umeyama(src, dst[idx])
        dist, idx = tree.query(tf.apply(src))
        new_rms = float(np.sqrt(np.mean(dist * dist)))
        done = abs(rms - new_rms) < tolerance
        rms = new_rms
        if done:
            break
    return IcpResult(tf, float(np.mean(dist < inlier_distance)), rms, it)


# --- surface sampling ------------------------------------------------------

def sample_surface(mesh: TriangleMesh, n_points: int, seed: int = 0, return_index: bool = False):
    """Area-weighted uniform samples on the mesh surface."""
    if n_points < 1:
        raise ValueError("n_points must be at least 1")
    areas = mesh.triangle_areas() if not mesh.is_empty() else np.zeros(0)
    total = float(areas.sum())
    if total <= 0:
        raise EmptyMesh("mesh has no surface area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n_points, p=areas / total)
    u = rng.random((n_points, 2))
    su = np.sqrt(u[:, 0])
    b0, b1 = 1.0 - su, su * (1.0 - u[:, 1])
    b2 = 1.0 - b0 - b1
    a, b, c = (mesh.vertices[mesh.triangles[tri, i]] for i in range(3))
    pts = b0[:, None] * a + b1[:, None] * b + b2[:, None] * c
    return (pts, tri) if return_index else pts


def unit_box_normalization(mesh: TriangleMesh) -> SimilarityTransform:
    """Similarity centring the bounding box at the origin with longest side 1."""
    if mesh.is_empty():
        raise EmptyMesh("mesh has no triangles")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    ext = float(np.max(hi - lo))
    if ext <= 0:
        raise EmptyMesh("mesh has zero extent")
    return SimilarityTransform(1.0 / ext, np.eye(3), -(lo + hi) / (2.0 * ext))


def _yaw(deg: float) -> np.ndarray:
    a = math.radians(deg)
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def alignment_initializations() -> list[SimilarityTransform]:
    """12 up-axis rotations 30 degrees apart times 10 scales in [0.6, 1.4]."""
    return [SimilarityTransform(float(s), _yaw(30.0 * r))
            for r in range(ALIGN_ROTATIONS) for s in ALIGN_SCALES]


@dataclass
class AlignmentResult:
    transform: SimilarityTransform  # pred (original coordinates) -> gt (original coordinates)
    inlier_ratio: float
    rms: float
    n_initializations: int
    init_index: int


def align_meshes(
    pred: TriangleMesh,
    gt: TriangleMesh,
    seed: int = 0,
    n_points: int = N_SURFACE_POINTS,
    coarse_points: int = 500,
    polish_top: int = 3,
    inlier_distance: float = INLIER_DISTANCE,
) -> AlignmentResult:
    """Similarity alignment of ``pred`` onto ``gt``.

    Both meshes are first brought into unit bounding boxes. Every member of
    the 12 x 10 rotation/scale grid seeds an ICP run on a coarse subsample;
    the ``polish_top`` best by inlier ratio (ties by rms) are then refined on
    the full ``n_points`` clouds and the best of those is returned. The
    transform is expressed between the original mesh coordinates.
    """
    np_ = unit_box_normalization(pred)
    ng = unit_box_normalization(gt)
    src = np_.apply(sample_surface(pred, n_points, seed))
    dst = ng.apply(sample_surface(gt, n_points, seed + 1))
    m = min(coarse_points, n_points)
    src_c, dst_c = src[:m], dst[: 4 * m]
    tree_c = cKDTree(dst_c)
    inits = alignment_initializations()
    coarse = []
    for i, init in enumerate(inits):
        r = icp(src_c, dst_c, init, max_iters=20, tolerance=1e-5,
                inlier_distance=inlier_distance, target_tree=tree_c)
        coarse.append((-r.inlier_ratio, r.rms, i, r))
    coarse.sort(key=lambda c: c[:3])
    tree = cKDTree(dst)
    best = None
    for _, _, i, r in coarse[:polish_top]:
        fine = icp(src, dst, r.transform, max_iters=50, tolerance=1e-8,
                   inlier_distance=inlier_distance, target_tree=tree)
        key = (-fine.inlier_ratio, fine.rms, i)
        if best is None or key < best[0]:
            best = (key, i, fine)
    _, i, fine = best
    tf = ng.inverse() @ fine.transform @ np_
    return AlignmentResult(tf, fine.inlier_ratio, fine.rms, len(inits), i)


def apply_similarity(mesh: TriangleMesh, tf: SimilarityTransform) -> TriangleMesh:
    return mesh.with_vertices(tf.apply(mesh.vertices))


# --- F-score and PSNR ----------------------------------------------------

@dataclass(frozen=True)
class FScore:
    fscore: float  # percentage
    precision: float
    recall: float


def fscore_points(pred_pts, gt_pts, threshold: float = FSCORE_THRESHOLD) -> FScore:
    """F-score (percent) between two point clouds at a distance threshold."""
    p = np.asarray(pred_pts, dtype=np.float64).reshape(-1, 3)
    g = np.asarray(gt_pts, dtype=np.float64).reshape(-1, 3)
    if len(p) == 0 or len(g) == 0:
        raise EmptyMesh("empty point cloud")
    d_pg, _ = cKDTree(g).query(p)
    d_gp, _ = cKDTree(p).query(g)
    prec = float(np.mean(d_pg < threshold))
    rec = float(np.mean(d_gp < threshold))
    f = 0.0 if prec + rec == 0 else 200.0 * (prec * rec) / (prec + rec)
    return FScore(f, prec, rec)


def fscore(pred: TriangleMesh, gt: TriangleMesh, threshold: float = FSCORE_THRESHOLD,
           n_points: int = N_SURFACE_POINTS, seed: int = 0) -> float:
    """Surface F-score in percent; pred and gt sampled with seeds ``seed`` and ``seed + 1``."""
    pp = sample_surface(pred, n_points, seed)
    gp = sample_surface(gt, n_points, seed + 1)
    return fscore_points(pp, gp, threshold).fscore


def psnr(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"image shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP_DB
    return min(PSNR_CAP_DB, 10.0 * math.log10(1.0 / mse))


@dataclass
class ViewsReport:
    azimuths: list
    psnrs: list
    mean_psnr: float


def eval_viewpoints(gt: TriangleMesh, n_views: int = 24, elevation: float = 15.0,
                    radius_factor: float = 2.6) -> list[PoseSE3]:
    """Azimuth-uniform ring of look-at cameras around the gt bounding box centre."""
    lo, hi = gt.vertices.min(axis=0), gt.vertices.max(axis=0)
    centre = tuple((lo + hi) / 2.0)
    radius = radius_factor * float(np.max(hi - lo))
    return [SphericalPose(elevation, 360.0 * i / n_views, radius, centre).to_pose() for i in range(n_views)]


def eval_views_protocol(
    pred_mesh: TriangleMesh,
    gt_mesh: TriangleMesh,
    k: Optional[CameraIntrinsics] = None,
    n_views: int = 24,
    elevation: float = 15.0,
    radius_factor: float = 2.6,
    supersample: int = 2,
) -> ViewsReport:
    """PSNR between renders of two aligned meshes from a full 360 degree ring."""
    if pred_mesh.is_empty() or gt_mesh.is_empty():
        raise EmptyMesh("cannot render an empty mesh")
    if k is None:
        k = CameraIntrinsics.from_fov(40.0, 512, 512)
    poses = eval_viewpoints(gt_mesh, n_views, elevation, radius_factor)
    psnrs = []
    for pose in poses:
        a = rasterize(pred_mesh, pose, k, supersample).rgb
        b = rasterize(gt_mesh, pose, k, supersample).rgb
        psnrs.append(psnr(a, b))
    az = [360.0 * i / n_views for i in range(n_views)]
    return ViewsReport(az, psnrs, float(np.mean(psnrs)))

