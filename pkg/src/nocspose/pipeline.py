"""Episode files, scene suites and candidate emulation used by the CLI and benchmarks.

There is no diffusion model here. The "n_init samples" of the multi-sample
pipeline are emulated by corrupting the ground-truth NOCS maps with
independent noise seeds, one seed per candidate and view.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import fileio
from .config import RunConfig
from .errors import InvalidSpec
from .geometry import CameraIntrinsics, PoseSE3
from .posesolve import NocsMap, PnpResult, poses_from_nocs
from .raster import TriangleMesh
from .synth import COLOR_PATTERNS, PRIMITIVE_KINDS, Episode, corrupt_nocs, make_episode, make_primitive_scene

MAX_VIEWS = 6
EPISODE_FILE = "episode.json"
MESH_FILE = "mesh.obj"


# --- scene suites ----------------------------------------------------------

def validate_scene(scene: dict, default_views: int) -> dict:
    if not isinstance(scene, dict):
        raise InvalidSpec("each scene must be a mapping")
    out = dict(scene)
    out.setdefault("color", "random")
    n = out.get("n_views", default_views)
    if isinstance(n, bool) or not isinstance(n, int) or not 1 <= n <= MAX_VIEWS:
        raise InvalidSpec(f"n_views must be an integer within [1, {MAX_VIEWS}], got {n!r}")
    out["n_views"] = n
    if out.get("kind") not in PRIMITIVE_KINDS:
        raise InvalidSpec(f"unknown primitive kind {out.get('kind')!r}; expected one of {PRIMITIVE_KINDS}")
    if out["color"] not in COLOR_PATTERNS:
        raise InvalidSpec(f"unknown color pattern {out['color']!r}")
    return out


def parse_suite(data, default_views: int) -> list[dict]:
    """Scenes from ``{"scenes": [...]}`` or a bare list of scene mappings."""
    scenes = data.get("scenes") if isinstance(data, dict) else data
    if not isinstance(scenes, list) or not scenes:
        raise InvalidSpec("scene spec must contain a non-empty list of scenes")
    if isinstance(data, dict) and "n_views" in data:
        default_views = data["n_views"]
    return [validate_scene(s, default_views) for s in scenes]


DEFAULT_KINDS = (
    {"kind": "box", "dimensions": [1.0, 0.7, 0.5], "subdivisions": 4},
    {"kind": "composite-marker", "dimensions": [1.0], "subdivisions": 3},
    {"kind": "sphere", "dimensions": [1.0], "subdivisions": 2},
    {"kind": "cylinder", "dimensions": [0.5, 1.2], "subdivisions": 6},
)


def default_suite(n_scenes: int, n_views: int) -> list[dict]:
    """Cycle through the four primitive kinds with random vertex colours."""
    return [dict(DEFAULT_KINDS[i % len(DEFAULT_KINDS)], color="random", n_views=n_views)
            for i in range(n_scenes)]


def scene_seed(base: int, index: int) -> int:
    return base * 100_003 + index


# --- episode directories ----------------------------------------------------

@dataclass
class EpisodeData:
    """An episode as read back from disk."""

    mesh: TriangleMesh
    rgb: list
    mask: list
    nocs: list
    intrinsics: list
    gt_poses: list
    meta: dict

    @property
    def n_views(self) -> int:
        return len(self.intrinsics)


def view_prefix(i: int) -> str:
    return f"view_{i}"


def write_episode(out_dir, ep: Episode, scene: dict, cfg: RunConfig) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.write_obj(out / MESH_FILE, ep.mesh)
    views = []
    for i, v in enumerate(ep.views):
        prefix = out / view_prefix(i)
        fileio.write_rgb_png(f"{prefix}_rgb.png", v.rgb)
        fileio.write_mask_png(f"{prefix}_mask.png", v.mask)
        fileio.write_nocs_png(f"{prefix}_nocs.png", v.nocs)
        fileio.write_depth(f"{prefix}_depth.npd", v.depth)
        sph = ep.spherical[i]
        views.append({
            "index": i,
            "intrinsics": v.intrinsics.to_json(),
            "pose": v.pose.to_json(),
            "elevation_deg": sph.elevation,
            "azimuth_deg": sph.azimuth,
            "radius": sph.radius,
        })
    meta = {
        "seed": ep.seed,
        "scene": scene,
        "n_views": ep.n_views,
        "phi0_deg": ep.phi0,
        "nocs_normalization": ep.nocs_frame.to_json(),
        "mesh": MESH_FILE,
        "views": views,
    }
    fileio.dump_json(out / EPISODE_FILE, meta)
    fileio.dump_json(out / "config.json", cfg.to_json())


def read_episode(ep_dir, need_images: bool = True) -> EpisodeData:
    """Load episode metadata, NOCS maps and (optionally) target images; OSError on missing files."""
    d = Path(ep_dir)
    meta = fileio.load_json(d / EPISODE_FILE)
    intr, poses, nocs, rgb, mask = [], [], [], [], []
    for v in meta["views"]:
        i = v["index"]
        intr.append(CameraIntrinsics.from_json(v["intrinsics"]))
        poses.append(PoseSE3.from_json(v["pose"]))
        prefix = d / view_prefix(i)
        nocs.append(fileio.read_nocs_png(f"{prefix}_nocs.png", f"{prefix}_mask.png"))
        if need_images:
            rgb.append(fileio.read_rgb_png(f"{prefix}_rgb.png"))
            mask.append(fileio.read_mask_png(f"{prefix}_mask.png"))
    mesh = fileio.read_obj(d / meta.get("mesh", MESH_FILE)) if need_images else None
    return EpisodeData(mesh, rgb, mask, nocs, intr, poses, meta)


def generate_episode(scene: dict, cfg: RunConfig, seed: int) -> Episode:
    mesh = make_primitive_scene(scene, seed=seed)
    return make_episode(mesh, scene["n_views"], cfg.camera_config(seed), seed=seed,
                        supersample=cfg.supersample)


# --- candidate emulation ---------------------------------------------------------

def noise_seed(base: int, candidate: int, view: int) -> int:
    return (base * 1_000_003 + candidate * 7_919 + view) % (2 ** 63)


def emulate_candidates(
    maps: Sequence[NocsMap],
    intrinsics: Sequence[CameraIntrinsics],
    cfg: RunConfig,
    n_init: Optional[int] = None,
) -> list[list[PnpResult]]:
    """Solve poses for ``n_init`` independently corrupted copies of the NOCS maps.

    Candidate ``c`` uses noise seed ``noise_seed(cfg.seed, c, view)`` and
    RANSAC seed ``cfg.seed + 1000 * c`` (plus the view index), so the first
    ``k`` candidates are the same whatever ``n_init`` is.
    """
    n_init = cfg.n_init if n_init is None else n_init
    out = []
    for c in range(n_init):
        noisy = [corrupt_nocs(m, cfg.noise_spec(noise_seed(cfg.seed, c, i))) for i, m in enumerate(maps)]
        out.append(poses_from_nocs(noisy, intrinsics, cfg.solve_config(cfg.seed + 1000 * c)))
    return out


def result_to_json(r: PnpResult) -> dict:
    return {
        "pose": None if r.pose is None else r.pose.to_json(),
        "converged": bool(r.converged),
        "n_inliers": int(r.n_inliers),
        "rms_reprojection_error": None if not math.isfinite(r.rms_reprojection_error)
        else float(r.rms_reprojection_error),
        "error": None if r.error is None else f"{type(r.error).__name__}: {r.error}",
    }


def candidates_to_json(cands: list[list[PnpResult]]) -> list:
    return [{"index": c, "views": [result_to_json(r) for r in views]} for c, views in enumerate(cands)]


def candidates_from_json(items) -> list[list[Optional[PoseSE3]]]:
    out = []
    for cand in items:
        poses = [v.get("pose") for v in cand["views"]]
        out.append([None if p is None else PoseSE3.from_json(p) for p in poses])
    return out


def load_pose_list(path) -> list[PoseSE3]:
    """Poses from a refine output (``poses``), a candidates file (first candidate) or a bare list."""
    data = fileio.load_json(path)
    if isinstance(data, dict) and "poses" in data:
        items = data["poses"]
    elif isinstance(data, dict) and "candidates" in data:
        items = candidates_from_json(data["candidates"][:1])[0]
        if any(p is None for p in items):
            raise InvalidSpec("first candidate has views without a pose")
        return items
    elif isinstance(data, list):
        items = data
    else:
        raise InvalidSpec(f"{path}: no pose list found")
    if any(p is None for p in items):
        raise InvalidSpec(f"{path}: pose list contains missing poses")
    return [PoseSE3.from_json(p) for p in items]

