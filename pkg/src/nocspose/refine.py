"""Pose refinement against a mesh by rendering-loss minimization, and expert selection."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import cv2
import numpy as np

from .errors import EmptyCandidates, MeshNotVisible, ShapeMismatch
from .geometry import CameraIntrinsics, PoseSE3, se3_local_step
from .raster import RenderBuffers, TriangleMesh, rasterize

CE_EPS = 1e-6


@dataclass(frozen=True)
class RenderLossWeights:
    lambda_mask: float = 1.0
    mu_rgb: float = 1.0

    def __post_init__(self):
        if self.lambda_mask < 0 or self.mu_rgb < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.lambda_mask == 0 and self.mu_rgb == 0:
            raise ValueError("at least one loss weight must be positive")


@dataclass(frozen=True)
class RefineConfig:
    max_iters: int = 100
    step_tolerance: float = 1e-5
    fd_epsilon: float = 1e-3
    damping: float = 1e-3
    max_step: float = 0.2
    max_backtracks: int = 8
    supersample: int = 4
    # coarse-to-fine smoothing levels, in pixels at sigma_reference_width
    blur_sigmas: tuple = (4.0, 2.0, 1.0, 0.5)
    sigma_reference_width: int = 128


@dataclass
class RefineResult:
    pose: PoseSE3
    final_loss: float
    initial_loss: float
    iterations: int
    converged: bool
    history: list = field(default_factory=list)


def mask_cross_entropy(pred_mask, target_mask, eps: float = CE_EPS) -> float:
    p = np.clip(pred_mask, eps, 1.0 - eps)
    y = target_mask
    return float(np.mean(-(y * np.log(p) + (1.0 - y) * np.log1p(-p))))


def foreground_mse(pred_rgb, target_rgb, target_mask) -> float:
    fg = target_mask > 0.5
    if not fg.any():
        return 0.0
    d = pred_rgb[fg] - target_rgb[fg]
    return float(np.mean(d * d))


def render_loss(rendered: RenderBuffers, target_rgb, target_mask, w: RenderLossWeights = RenderLossWeights()) -> float:
    """lambda * BCE(mask) + mu * MSE(rgb over target foreground)."""
    target_rgb = np.asarray(target_rgb, dtype=np.float64)
    target_mask = np.asarray(target_mask, dtype=np.float64)
    if rendered.mask.shape != target_mask.shape or rendered.rgb.shape != target_rgb.shape:
        raise ShapeMismatch(
            f"rendered {rendered.mask.shape} does not match target {target_mask.shape}/{target_rgb.shape}")
    loss = 0.0
    if w.lambda_mask:
        loss += w.lambda_mask * mask_cross_entropy(rendered.mask, target_mask)
    if w.mu_rgb:
        loss += w.mu_rgb * foreground_mse(rendered.rgb, target_rgb, target_mask)
    return loss


def resize_targets(rgb, mask, k: CameraIntrinsics, resolution: Optional[int]):
    """Area-resample target images so the longer side equals ``resolution``."""
    h, w = np.shape(mask)
    if not resolution or max(h, w) == resolution:
        return np.asarray(rgb, dtype=np.float64), np.asarray(mask, dtype=np.float64), k
    s = resolution / max(h, w)
    nw, nh = max(1, round(w * s)), max(1, round(h * s))
    rgb_r = cv2.resize(np.asarray(rgb, dtype=np.float64), (nw, nh), interpolation=cv2.INTER_AREA)
    mask_r = cv2.resize(np.asarray(mask, dtype=np.float64), (nw, nh), interpolation=cv2.INTER_AREA)
    return np.clip(rgb_r, 0, 1), np.clip(mask_r, 0, 1), k.resized(nw, nh)


def _blur(img, sigma):
    if sigma <= 0:
        return img
    return cv2.GaussianBlur(img, (0, 0), sigma, borderType=cv2.BORDER_CONSTANT)


class _Objective:
    """Exact rendering loss plus Gaussian-smoothed residual images at ``sigma`` pixels."""

    def __init__(self, mesh, target_rgb, target_mask, k, w, supersample):
        self.mesh, self.k, self.w, self.ss = mesh, k, w, supersample
        self.rgb = np.asarray(target_rgb, dtype=np.float64)
        self.mask = np.asarray(target_mask, dtype=np.float64)
        lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
        self.center = (lo + hi) / 2.0
        fg = self.mask > 0.5
        n = self.mask.size
        # weights that make the squared residual norm mirror lambda*mask + mu*rgb(fg)
        self._wm = math.sqrt(w.lambda_mask / n)
        self._wc = math.sqrt(w.mu_rgb / max(1, 3 * int(fg.sum()))) * fg[..., None]
        self.set_sigma(0.0)
        self.renders = 0

    def set_sigma(self, sigma):
        self.sigma = float(sigma)
        self._t = self._smooth(self.rgb, self.mask)

    def _smooth(self, rgb, mask):
        return _blur(rgb, self.sigma), _blur(mask, self.sigma)

    def evaluate(self, pose):
        """(smoothed residual vector, exact loss) from a single render."""
        self.renders += 1
        buf = rasterize(self.mesh, pose, self.k, self.ss)
        exact = render_loss(buf, self.rgb, self.mask, self.w)
        rgb, mask = self._smooth(buf.rgb, buf.mask)
        r = np.concatenate([
            (self._wm * (mask - self._t[1])).ravel(),
            (self._wc * (rgb - self._t[0])).ravel(),
        ])
        return r, exact

    def step(self, pose, delta):
        # rotate about the object centre so rotation and translation decouple
        return se3_local_step(pose, delta, pivot=pose.apply(self.center))

    def jacobian(self, pose, eps):
        cols = []
        for i in range(6):
            e = np.zeros(6)
            e[i] = eps
            rp = self.evaluate(self.step(pose, e))[0]
            rm = self.evaluate(self.step(pose, -e))[0]
            cols.append((rp - rm) / (2.0 * eps))
        return np.stack(cols, axis=1)


def refine_pose(
    mesh: TriangleMesh,
    target_rgb,
    target_mask,
    k: CameraIntrinsics,
    init: PoseSE3,
    w: RenderLossWeights = RenderLossWeights(),
    config: RefineConfig = RefineConfig(),
) -> RefineResult:
    """Minimize the rendering loss over SE(3) with finite-difference derivatives.

    The pose is updated in a local parameterization that pivots on the
    object centre. Each iteration differentiates the (weighted) mask and
    foreground colour residual images by central differences, 12 renders,
    and takes a damped Gauss-Newton step. Work proceeds coarse to fine over
    ``config.blur_sigmas``: residuals are computed on Gaussian-blurred
    renders and targets, which removes the stair steps that sub-sample
    coverage flips put into the raw loss and widens the basin. A level ends
    when the step length falls below ``step_tolerance`` or no damped step
    reduces the smoothed residual. The returned pose is the best one seen
    under the exact rendering loss, so ``final_loss <= initial_loss``.
    """
    obj = _Objective(mesh, target_rgb, target_mask, k, w, config.supersample)
    first = rasterize(mesh, init, k, config.supersample)
    if not first.mask.any():
        raise MeshNotVisible("mesh has zero coverage at the initial pose")
    initial = render_loss(first, obj.rgb, obj.mask, w)
    best_pose, best = init, initial
    history = [initial]
    pose = init
    it = 0
    converged = False
    scale = k.width / config.sigma_reference_width
    for sigma in config.blur_sigmas:
        obj.set_sigma(sigma * scale)
        r, _ = obj.evaluate(pose)
        cost = float(r @ r)
        eps = config.fd_epsilon * (1.0 + sigma)
        lam = config.damping
        converged = False
        while it < config.max_iters:
            it += 1
            jac = obj.jacobian(pose, eps)
            jtj = jac.T @ jac
            g = jac.T @ r
            diag = np.diag(jtj).copy()
            diag[diag <= 0] = 1e-12
            accepted = False
            for _ in range(config.max_backtracks + 1):
                delta = -np.linalg.solve(jtj + lam * np.diag(diag), g)
                norm = float(np.linalg.norm(delta))
                if norm > config.max_step:
                    delta *= config.max_step / norm
                    norm = config.max_step
                cand = obj.step(pose, delta)
                c_r, c_exact = obj.evaluate(cand)
                if c_exact < best:
                    best_pose, best = cand, c_exact
                c_cost = float(c_r @ c_r)
                if c_cost < cost:
                    pose, r, cost, accepted = cand, c_r, c_cost, True
                    lam = max(lam * 0.3, 1e-9)
                    break
                lam *= 10.0
            history.append(best)
            if not accepted or norm < config.step_tolerance:
                converged = True
                break
    return RefineResult(best_pose, best, initial, it, converged, history)


@dataclass
class ExpertSelection:
    index: int
    poses: list
    total_losses: list
    results: list  # per candidate, per view RefineResult or None


def select_expert(
    candidates: Sequence[Sequence[Optional[PoseSE3]]],
    mesh: TriangleMesh,
    views: Sequence[tuple],
    w: RenderLossWeights = RenderLossWeights(),
    config: RefineConfig = RefineConfig(),
) -> ExpertSelection:
    """Refine every candidate pose set and keep the one with the lowest summed loss.

    ``views`` holds (rgb, mask, intrinsics) per view. Candidates with a
    missing pose or an invisible mesh in any view score +inf. Ties go to the
    lower index.
    """
    if not candidates:
        raise EmptyCandidates("no pose candidates given")
    totals, results = [], []
    for cand in candidates:
        if len(cand) != len(views):
            raise ValueError("each candidate needs one pose per view")
        per_view, total = [], 0.0
        for pose, (rgb, mask, k) in zip(cand, views):
            if pose is None:
                per_view.append(None)
                total = math.inf
                continue
            try:
                r = refine_pose(mesh, rgb, mask, k, pose, w, config)
            except MeshNotVisible:
                per_view.append(None)
                total = math.inf
                continue
            per_view.append(r)
            total += r.final_loss
        totals.append(total)
        results.append(per_view)
    best = min(range(len(totals)), key=lambda i: (totals[i], i))
    if not math.isfinite(totals[best]):
        raise MeshNotVisible("every candidate has a view without a usable pose")
    poses = [r.pose for r in results[best]]
    return ExpertSelection(best, poses, totals, results)
