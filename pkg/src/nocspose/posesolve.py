"""Camera poses from NOCS maps: correspondences, PnP and RANSAC."""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DegenerateConfiguration, InsufficientInliers, NocsPoseError
from .geometry import CameraIntrinsics, PoseSE3, project_to_so3, se3_local_step

MIN_CORRESPONDENCES = 6
# Valid-pixel count above which the automatic stride switches to 2.
AUTO_STRIDE_PIXELS = 20_000


@dataclass
class NocsMap:
    """Per-pixel NOCS coordinates (H, W, 3) and a validity mask (H, W)."""

    coords: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.coords.shape != self.valid.shape + (3,):
            raise ValueError("coords must be (H, W, 3) matching valid (H, W)")

    @property
    def height(self) -> int:
        return self.valid.shape[0]

    @property
    def width(self) -> int:
        return self.valid.shape[1]

    @property
    def n_valid(self) -> int:
        return int(self.valid.sum())

    @classmethod
    def empty(cls, width: int, height: int) -> "NocsMap":
        return cls(np.zeros((height, width, 3)), np.zeros((height, width), dtype=bool))


@dataclass(frozen=True)
class Correspondence:
    pixel: np.ndarray
    nocs_point: np.ndarray


@dataclass
class Correspondences:
    """Column storage for pixel <-> NOCS point pairs."""

    pixels: np.ndarray
    points: np.ndarray

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64).reshape(-1, 2)
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.pixels) != len(self.points):
            raise ValueError("pixels and points must have the same length")

    def __len__(self) -> int:
        return len(self.pixels)

    def __getitem__(self, i):
        if isinstance(i, (int, np.integer)):
            return Correspondence(self.pixels[i], self.points[i])
        return Correspondences(self.pixels[i], self.points[i])

    def __iter__(self):
        return (self[i] for i in range(len(self)))

    @classmethod
    def from_list(cls, corrs: Sequence[Correspondence]) -> "Correspondences":
        if not corrs:
            return cls(np.zeros((0, 2)), np.zeros((0, 3)))
        return cls([c.pixel for c in corrs], [c.nocs_point for c in corrs])


def _as_corrs(corrs) -> Correspondences:
    return corrs if isinstance(corrs, Correspondences) else Correspondences.from_list(list(corrs))


@dataclass
class PnpResult:
    pose: Optional[PoseSE3]
    inliers: np.ndarray
    rms_reprojection_error: float
    converged: bool = True
    iterations: int = 0
    error: Optional[NocsPoseError] = None

    @property
    def ok(self) -> bool:
        return self.error is None

    @property
    def n_inliers(self) -> int:
        return int(np.count_nonzero(self.inliers))


@dataclass(frozen=True)
class SolveConfig:
    iterations: int = 512
    inlier_threshold_px: float = 2.0
    reference_width: int = 512
    min_inlier_ratio: float = 0.25
    seed: int = 0
    confidence: float = 0.9999
    stride: int = 0
    lm_max_iters: int = 100
    lm_damping: float = 1e-3
    gradient_tolerance: float = 1e-8

    def threshold_for(self, width: int) -> float:
        """Inlier threshold scaled with image width relative to ``reference_width``."""
        return self.inlier_threshold_px * width / self.reference_width


def default_stride(nocs_map: NocsMap) -> int:
    return 2 if nocs_map.n_valid > AUTO_STRIDE_PIXELS else 1


def extract_correspondences(nocs_map: NocsMap, stride: int = 1) -> Correspondences:
    """One correspondence per valid pixel on the stride grid, at pixel centres."""
    if stride < 1:
        raise ValueError("stride must be >= 1")
    grid = np.zeros_like(nocs_map.valid)
    grid[::stride, ::stride] = True
    v, u = np.nonzero(nocs_map.valid & grid)
    pixels = np.stack([u + 0.5, v + 0.5], axis=1).astype(np.float64)
    return Correspondences(pixels, nocs_map.coords[v, u])


def reprojection_residuals(pose: PoseSE3, corrs: Correspondences, k: CameraIntrinsics) -> np.ndarray:
    """(N, 2) projected-minus-observed pixel residuals; inf for points behind the camera."""
    cam = pose.apply(corrs.points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        proj = np.stack([k.fx * cam[:, 0] / z + k.cx, k.fy * cam[:, 1] / z + k.cy], axis=1)
    res = proj - corrs.pixels
    res[z <= 0] = np.inf
    return res


def reprojection_cost(pose: PoseSE3, corrs: Correspondences, k: CameraIntrinsics) -> float:
    """Sum of squared reprojection errors."""
    r = reprojection_residuals(pose, corrs, k)
    return float(np.sum(r * r))


def _normalized_rays(pixels: np.ndarray, k: CameraIntrinsics) -> np.ndarray:
    return np.stack([(pixels[:, 0] - k.cx) / k.fx, (pixels[:, 1] - k.cy) / k.fy], axis=1)


def _similarity_normalizer(x: np.ndarray) -> np.ndarray:
    """Hartley normalization: centroid to origin, mean distance sqrt(dim)."""
    dim = x.shape[1]
    mean = x.mean(axis=0)
    d = np.linalg.norm(x - mean, axis=1).mean()
    s = math.sqrt(dim) / d if d > 0 else 1.0
    t = np.eye(dim + 1)
    t[:dim, :dim] *= s
    t[:dim, dim] = -s * mean
    return t


def _dlt_rows(rays: np.ndarray, pts_h: np.ndarray) -> np.ndarray:
    """Stacked 2 x 12 DLT equations for (..., N) correspondences."""
    n = rays.shape[-2]
    zeros = np.zeros(pts_h.shape)
    a = rays[..., 0:1]
    b = rays[..., 1:2]
    r1 = np.concatenate([pts_h, zeros, -a * pts_h], axis=-1)
    r2 = np.concatenate([zeros, pts_h, -b * pts_h], axis=-1)
    return np.stack([r1, r2], axis=-2).reshape(pts_h.shape[:-2] + (2 * n, 12))


def _pose_from_projection(p: np.ndarray):
    """Split a (..., 3, 4) projection matrix into rotation and translation."""
    m = p[..., :3]
    sign = np.sign(np.linalg.det(m))
    sign = np.where(sign == 0, 1.0, sign)
    p = p * sign[..., None, None]
    u, s, vt = np.linalg.svd(p[..., :3])
    d = np.sign(np.linalg.det(u @ vt))
    fix = np.ones(u.shape[:-2] + (3,))
    fix[..., 2] = d
    rot = (u * fix[..., None, :]) @ vt
    scale = s.mean(axis=-1)
    t = p[..., 3] / scale[..., None]
    return rot, t


def _planar_poses(rays: np.ndarray, pts: np.ndarray):
    """Pose hypotheses treating each (B, m) sample as lying on its best-fit plane.

    Points are expressed in plane coordinates, a homography to the
    normalized image plane is fitted and decomposed into [r1 r2 t]. Exact for
    coplanar samples, where the 3x4 DLT is rank deficient.
    """
    o = pts.mean(axis=-2)
    _, sv, basis = np.linalg.svd(pts - o[..., None, :], full_matrices=False)
    e1, e2 = basis[..., 0, :], basis[..., 1, :]
    frame = np.stack([e1, e2, np.cross(e1, e2)], axis=-2)  # rows: plane -> world axes
    local = np.einsum("bij,bnj->bni", frame, pts - o[..., None, :])
    a, b = local[..., 0:1], local[..., 1:2]
    x, y = rays[..., 0:1], rays[..., 1:2]
    one, zero = np.ones_like(a), np.zeros_like(a)
    q = np.concatenate([a, b, one], axis=-1)
    r1 = np.concatenate([q, zero, zero, zero, -x * q], axis=-1)
    r2 = np.concatenate([zero, zero, zero, q, -y * q], axis=-1)
    m = np.stack([r1, r2], axis=-2).reshape(pts.shape[:-2] + (-1, 9))
    _, s, vt = np.linalg.svd(m, full_matrices=False)
    h = vt[..., -1, :].reshape(pts.shape[:-2] + (3, 3))
    scale = (np.linalg.norm(h[..., :, 0], axis=-1) + np.linalg.norm(h[..., :, 1], axis=-1)) / 2.0
    ok = (scale > 0) & (s[..., -2] > 1e-9 * s[..., 0]) & (sv[..., 1] > 1e-9 * sv[..., 0])
    scale = np.where(scale > 0, scale, 1.0)
    h = h / scale[..., None, None]
    h = h * np.where(h[..., 2, 2] < 0, -1.0, 1.0)[..., None, None]  # plane origin in front
    m3 = np.stack([h[..., :, 0], h[..., :, 1], np.cross(h[..., :, 0], h[..., :, 1])], axis=-1)
    u, _, wt = np.linalg.svd(m3)
    d = np.sign(np.linalg.det(u @ wt))
    fix = np.ones(u.shape[:-2] + (3,))
    fix[..., 2] = np.where(d == 0, 1.0, d)
    r_local = (u * fix[..., None, :]) @ wt
    rot = r_local @ frame
    t = h[..., :, 2] - np.einsum("bij,bj->bi", rot, o)
    return rot, t, ok


def _dlt_pose(corrs: Correspondences, k: CameraIntrinsics) -> PoseSE3:
    rays = _normalized_rays(corrs.pixels, k)
    t2 = _similarity_normalizer(rays)
    t3 = _similarity_normalizer(corrs.points)
    rays_n = rays @ t2[:2, :2].T + t2[:2, 2]
    pts_n = np.hstack([corrs.points @ t3[:3, :3].T + t3[:3, 3], np.ones((len(corrs), 1))])
    a = _dlt_rows(rays_n, pts_n)
    _, s, vt = np.linalg.svd(a, full_matrices=False)
    if s[-2] <= 1e-10 * s[0]:
        raise DegenerateConfiguration("correspondences are degenerate (e.g. coplanar) for the linear solver")
    p = np.linalg.inv(t2) @ vt[-1].reshape(3, 4) @ t3
    rot, t = _pose_from_projection(p)
    return PoseSE3(project_to_so3(rot), t)


def _initial_pose(corrs: Correspondences, k: CameraIntrinsics) -> PoseSE3:
    """Lower-cost of the DLT and planar initializers (DLT alone fails on coplanar points)."""
    cands = []
    try:
        cands.append(_dlt_pose(corrs, k))
    except DegenerateConfiguration:
        pass
    rot, t, ok = _planar_poses(_normalized_rays(corrs.pixels, k)[None], corrs.points[None])
    if ok[0]:
        cands.append(PoseSE3(rot[0], t[0]))
    costs = []
    for c in cands:
        z = c.apply(corrs.points)[:, 2]
        costs.append(reprojection_cost(c, corrs, k) if np.all(z > 0) else np.inf)
    if not cands or not np.isfinite(min(costs)):
        raise DegenerateConfiguration("no linear initializer fits the correspondences")
    return cands[int(np.argmin(costs))]


def _residuals_and_jacobian(pose: PoseSE3, corrs: Correspondences, k: CameraIntrinsics):
    cam = pose.apply(corrs.points)
    x, y, z = cam[:, 0], cam[:, 1], cam[:, 2]
    iz = 1.0 / z
    res = np.stack([k.fx * x * iz + k.cx, k.fy * y * iz + k.cy], axis=1) - corrs.pixels
    # d proj / d (omega, v) for X' = exp(omega) X + v, written out per row
    a = k.fx * x * iz * iz
    b = k.fy * y * iz * iz
    jac = np.empty((len(corrs), 2, 6))
    jac[:, 0, 0] = -a * y
    jac[:, 0, 1] = k.fx + a * x
    jac[:, 0, 2] = -k.fx * y * iz
    jac[:, 0, 3] = k.fx * iz
    jac[:, 0, 4] = 0.0
    jac[:, 0, 5] = -a
    jac[:, 1, 0] = -k.fy - b * y
    jac[:, 1, 1] = b * x
    jac[:, 1, 2] = k.fy * x * iz
    jac[:, 1, 3] = 0.0
    jac[:, 1, 4] = k.fy * iz
    jac[:, 1, 5] = -b
    jac = jac.reshape(2 * len(corrs), 6)
    return res.reshape(-1), jac, z


def cost_gradient(pose: PoseSE3, corrs: Correspondences, k: CameraIntrinsics) -> np.ndarray:
    """Gradient of the squared reprojection sum in the 6-dof local parameterization."""
    r, j, _ = _residuals_and_jacobian(pose, corrs, k)
    return 2.0 * j.T @ r


def solve_pnp(
    corrs,
    k: CameraIntrinsics,
    init: Optional[PoseSE3] = None,
    max_iters: int = 100,
    damping: float = 1e-3,
    gradient_tolerance: float = 1e-8,
) -> PnpResult:
    """Minimize the squared reprojection error over SE(3) with Levenberg-Marquardt.

    Without ``init`` the pose is initialized by a normalized DLT whose rotation
    block is projected onto SO(3). Hitting ``max_iters`` with the gradient norm
    still above ``gradient_tolerance`` returns the best pose with
    ``converged=False``.
    """
    corrs = _as_corrs(corrs)
    n = len(corrs)
    if n < MIN_CORRESPONDENCES:
        raise DegenerateConfiguration(f"PnP needs at least {MIN_CORRESPONDENCES} correspondences, got {n}")
    pose = init if init is not None else _initial_pose(corrs, k)

    r, j, z = _residuals_and_jacobian(pose, corrs, k)
    cost = float(r @ r) if np.all(z > 0) else np.inf
    if not np.isfinite(cost):
        raise DegenerateConfiguration("initial pose places points behind the camera")
    mu = damping
    converged = False
    it = 0
    while it < max_iters:
        g = 2.0 * j.T @ r
        if np.linalg.norm(g) < gradient_tolerance:
            converged = True
            break
        it += 1
        jtj = j.T @ j
        diag = np.diag(np.diag(jtj))
        accepted = False
        while mu < 1e16:
            try:
                step = -np.linalg.solve(jtj + mu * diag, j.T @ r)
            except np.linalg.LinAlgError:
                mu *= 10.0
                continue
            if np.linalg.norm(step) < 1e-15 * (1.0 + np.linalg.norm(pose.translation)):
                break  # below float resolution: the step no longer moves the pose
            cand = se3_local_step(pose, step)
            r_c = reprojection_residuals(cand, corrs, k).reshape(-1)
            cost_c = float(r_c @ r_c)
            if cost_c < cost:
                pose, cost = cand, cost_c
                r, j, _ = _residuals_and_jacobian(pose, corrs, k)
                mu = max(mu * 0.3, 1e-12)
                accepted = True
                break
            if cost_c <= cost * (1.0 + 1e-12):
                # cost change lost in rounding: judge the step by the gradient instead
                r_c, j_c, _ = _residuals_and_jacobian(cand, corrs, k)
                if np.linalg.norm(j_c.T @ r_c) < np.linalg.norm(j.T @ r):
                    pose, cost, r, j = cand, cost_c, r_c, j_c
                    accepted = True
                    break
            mu *= 10.0
        if not accepted:
            # no representable descent step left: numerically stationary
            g = 2.0 * j.T @ r
            converged = bool(np.linalg.norm(g) < gradient_tolerance * max(1.0, math.sqrt(n)))
            break

    rms = math.sqrt(cost / n)
    return PnpResult(pose, np.ones(n, dtype=bool), rms, converged, it)


def _batched_dlt(rays_n, pts_n, t2inv, t3, rng_idx):
    """DLT hypotheses for minimal samples; returns rotations, translations, ok mask."""
    a = _dlt_rows(rays_n[rng_idx], pts_n[rng_idx])
    _, s, vt = np.linalg.svd(a)
    ok = s[:, -2] > 1e-9 * s[:, 0]
    p = t2inv @ vt[:, -1].reshape(-1, 3, 4) @ t3
    rot, t = _pose_from_projection(p)
    return rot, t, ok


def _inlier_errors(rot, t, corrs: Correspondences, k: CameraIntrinsics) -> np.ndarray:
    cam = corrs.points @ np.transpose(rot, (0, 2, 1)) + t[:, None, :]
    z = cam[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[..., 0] / z + k.cx - corrs.pixels[:, 0]
        v = k.fy * cam[..., 1] / z + k.cy - corrs.pixels[:, 1]
        err = np.sqrt(u * u + v * v)
    err[z <= 0] = np.inf
    return err


def _local_optimization(best, corrs: Correspondences, k: CameraIntrinsics, thr: float, config):
    """Refit a new best hypothesis on its inliers; keep the refit if it scores better."""
    count, rms, rot, t = best
    for _ in range(4):
        err = _inlier_errors(rot[None], t[None], corrs, k)[0]
        inl = err < thr
        if inl.sum() < MIN_CORRESPONDENCES:
            break
        try:
            fit = solve_pnp(corrs[inl], k, init=PoseSE3(project_to_so3(rot), t), max_iters=10,
                            damping=config.lm_damping, gradient_tolerance=config.gradient_tolerance)
        except DegenerateConfiguration:
            break
        e2 = _inlier_errors(fit.pose.rotation[None], fit.pose.translation[None], corrs, k)[0]
        i2 = e2 < thr
        c2 = int(i2.sum())
        r2 = math.sqrt(float(np.sum(e2[i2] ** 2)) / max(c2, 1))
        if not (c2 > count or (c2 == count and r2 < rms)):
            break
        count, rms, rot, t = c2, r2, fit.pose.rotation, fit.pose.translation
    return (count, rms, rot, t)


def ransac_pnp(corrs, k: CameraIntrinsics, config: SolveConfig = SolveConfig()) -> PnpResult:
    """Robust PnP: minimal 6-point hypotheses, inlier voting, LM refit on inliers.

    Each minimal sample yields a DLT hypothesis and a planar (homography)
    one, so views dominated by a single flat face are still solvable. Every
    new best hypothesis is locally optimized by an LM refit on its inliers,
    which keeps noisy minimal samples from understating the inlier set.

    Hypotheses are drawn in fixed-size batches from a generator seeded by
    ``config.seed``, so results are reproducible. Sampling stops early once
    the best hypothesis' inlier ratio makes finding a clean sample
    sufficiently likely (``config.confidence``).
    """
    corrs = _as_corrs(corrs)
    n = len(corrs)
    if n < MIN_CORRESPONDENCES:
        raise DegenerateConfiguration(f"RANSAC needs at least {MIN_CORRESPONDENCES} correspondences, got {n}")
    thr = config.threshold_for(k.width)
    rng = np.random.default_rng(config.seed)

    rays = _normalized_rays(corrs.pixels, k)
    t2 = _similarity_normalizer(rays)
    t3 = _similarity_normalizer(corrs.points)
    rays_n = rays @ t2[:2, :2].T + t2[:2, 2]
    pts_n = np.hstack([corrs.points @ t3[:3, :3].T + t3[:3, 3], np.ones((n, 1))])
    t2inv = np.linalg.inv(t2)

    batch = 32 if n <= 20_000 else 8
    best = (-1, np.inf, None, None)
    done = 0
    needed = config.iterations
    while done < min(needed, config.iterations):
        b = min(batch, config.iterations - done)
        idx = np.stack([rng.choice(n, MIN_CORRESPONDENCES, replace=False) for _ in range(b)])
        done += b
        rot, t, ok = _batched_dlt(rays_n, pts_n, t2inv, t3, idx)
        prot, pt, pok = _planar_poses(rays[idx], corrs.points[idx])
        rot, t, ok = np.concatenate([rot, prot]), np.concatenate([t, pt]), np.concatenate([ok, pok])
        if not ok.any():
            continue
        err = _inlier_errors(rot[ok], t[ok], corrs, k)
        inl = err < thr
        counts = inl.sum(axis=1)
        sq = np.where(inl, err * err, 0.0).sum(axis=1)
        rms = np.sqrt(sq / np.maximum(counts, 1))
        improved = False
        for c, e, r_, t_ in zip(counts, rms, rot[ok], t[ok]):
            if c > best[0] or (c == best[0] and e < best[1]):
                best = (int(c), float(e), r_, t_)
                improved = True
        if improved and best[0] >= MIN_CORRESPONDENCES:
            best = _local_optimization(best, corrs, k, thr, config)
        w = best[0] / n
        if w >= 1.0:
            needed = 0
        elif w > 0:
            p_clean = w ** MIN_CORRESPONDENCES
            if p_clean > 0:
                needed = math.ceil(math.log(1.0 - config.confidence) / math.log1p(-p_clean)) if p_clean < 1 else 0

    if best[2] is None or best[0] / n < config.min_inlier_ratio or best[0] < MIN_CORRESPONDENCES:
        ratio = max(best[0], 0) / n
        raise InsufficientInliers(
            f"best hypothesis has inlier ratio {ratio:.3f} < {config.min_inlier_ratio}")

    pose = PoseSE3(project_to_so3(best[2]), best[3])
    inliers = _inlier_errors(pose.rotation[None], pose.translation[None], corrs, k)[0] < thr
    result = None
    for _ in range(8):
        if inliers.sum() < MIN_CORRESPONDENCES:
            raise InsufficientInliers("too few inliers remain after refitting")
        result = solve_pnp(corrs[inliers], k, init=pose, max_iters=config.lm_max_iters,
                           damping=config.lm_damping, gradient_tolerance=config.gradient_tolerance)
        pose = result.pose
        new_inliers = np.linalg.norm(reprojection_residuals(pose, corrs, k), axis=1) < thr
        if np.array_equal(new_inliers, inliers):
            break
        inliers = new_inliers
    if inliers.sum() / n < config.min_inlier_ratio:
        raise InsufficientInliers(
            f"final inlier ratio {inliers.sum() / n:.3f} < {config.min_inlier_ratio}")
    res = reprojection_residuals(pose, corrs[inliers], k)
    rms = math.sqrt(float(np.sum(res * res)) / inliers.sum())
    return PnpResult(pose, inliers, rms, result.converged, result.iterations)


def solve_view(nocs_map: NocsMap, k: CameraIntrinsics, config: SolveConfig = SolveConfig()) -> PnpResult:
    """RANSAC PnP on one NOCS map; errors are returned inside the result."""
    stride = config.stride or default_stride(nocs_map)
    corrs = extract_correspondences(nocs_map, stride)
    try:
        if len(corrs) < MIN_CORRESPONDENCES:
            raise InsufficientInliers(f"only {len(corrs)} valid pixels in NOCS map")
        return ransac_pnp(corrs, k, config)
    except NocsPoseError as e:
        return PnpResult(None, np.zeros(len(corrs), dtype=bool), math.nan, False, 0, e)


def poses_from_nocs(
    maps: Sequence[NocsMap],
    intrinsics: Sequence[CameraIntrinsics],
    config: SolveConfig = SolveConfig(),
) -> list[PnpResult]:
    """Solve each view independently; a failed view never aborts the batch."""
    if not 1 <= len(maps) <= 6:
        raise ValueError("between 1 and 6 views are supported")
    if len(intrinsics) != len(maps):
        raise ValueError("need one set of intrinsics per NOCS map")
    return [solve_view(m, k, replace(config, seed=config.seed + i)) for i, (m, k) in enumerate(zip(maps, intrinsics))]
