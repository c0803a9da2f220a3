"""Command-line front end: generate, solve, refine, eval and bench.

Exit codes: 0 success, 2 invalid input or config, 3 I/O failure, 4 the
pipeline produced nothing usable (every view of every candidate failed).
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np
import yaml

from . import fileio, pipeline
from .config import ConfigError, RunConfig, build_config
from .errors import EmptyCandidates, MeshNotVisible, NocsPoseError
from .evalkit import align_meshes, apply_similarity, eval_views_protocol, fscore, pose_metrics, unit_box_normalization
from .geometry import CameraIntrinsics, PoseSE3
from .refine import resize_targets, select_expert

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_FAILED = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _finite_or_none(x) -> Optional[float]:
    return float(x) if x is not None and math.isfinite(x) else None


def _out_dir_for(path) -> Path:
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    return p.parent


def _relative_to_output(path, out_path) -> str:
    """``path`` as seen from the directory of ``out_path``, so outputs do not embed the run root."""
    return Path(os.path.relpath(Path(path).resolve(), Path(out_path).resolve().parent)).as_posix()


def _echo_config(directory, cfg: RunConfig) -> None:
    Path(directory).mkdir(parents=True, exist_ok=True)
    fileio.dump_json(Path(directory) / "config.json", cfg.to_json())


# --- commands -----------------------------------------------------------------

def cmd_generate(cfg: RunConfig, out_dir, spec_path=None) -> dict:
    """Write one episode directory per scene plus a manifest."""
    if spec_path:
        scenes = pipeline.parse_suite(_load_yaml(spec_path), cfg.n_views)
    else:
        scenes = pipeline.default_suite(cfg.bench_scenes, cfg.n_views)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, scene in enumerate(scenes):
        seed = int(scene.get("seed", pipeline.scene_seed(cfg.seed, i)))
        ep = pipeline.generate_episode(scene, cfg, seed)
        name = f"scene_{i:03d}"
        pipeline.write_episode(out / name, ep, scene, cfg)
        entries.append({"name": name, "kind": scene["kind"], "n_views": scene["n_views"], "seed": seed})
    manifest = {"episodes": entries, "config": cfg.to_json()}
    fileio.dump_json(out / "manifest.json", manifest)
    _echo_config(out, cfg)
    return manifest


def _load_yaml(path):
    """Scene spec file; YAML parses JSON too."""
    try:
        return yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed scene spec {path}: {e}") from e


def cmd_solve(cfg: RunConfig, episode_dir, out_path) -> dict:
    """PnP/RANSAC pose sets for ``cfg.n_init`` emulated samples of the episode's NOCS maps."""
    ep = pipeline.read_episode(episode_dir, need_images=False)
    cands = pipeline.emulate_candidates(ep.nocs, ep.intrinsics, cfg)
    doc = {"episode": _relative_to_output(episode_dir, out_path), "n_init": cfg.n_init,
           "candidates": pipeline.candidates_to_json(cands), "config": cfg.to_json()}
    fileio.dump_json(out_path, doc)
    _echo_config(_out_dir_for(out_path), cfg)
    if all(r.pose is None for views in cands for r in views):
        raise CliError(EXIT_FAILED, "every view of every candidate failed to solve")
    return doc


def cmd_refine(cfg: RunConfig, episode_dir, candidates_path, out_path, mesh_path=None) -> dict:
    """Refine every candidate against the mesh and keep the lowest total rendering loss."""
    ep = pipeline.read_episode(episode_dir)
    mesh = fileio.read_obj(mesh_path) if mesh_path else ep.mesh
    data = fileio.load_json(candidates_path)
    items = data.get("candidates") if isinstance(data, dict) else data
    if not isinstance(items, list):
        raise ConfigError("candidates file has no candidate list")
    if not items:
        raise EmptyCandidates("candidates file holds an empty list")
    cands = pipeline.candidates_from_json(items)
    if any(len(c) != ep.n_views for c in cands):
        raise ConfigError("candidate view count does not match the episode")
    views = [resize_targets(rgb, mask, k, cfg.refine_resolution or None)
             for rgb, mask, k in zip(ep.rgb, ep.mask, ep.intrinsics)]
    try:
        sel = select_expert(cands, mesh, views, cfg.loss_weights(), cfg.refine_config())
    except MeshNotVisible as e:
        raise CliError(EXIT_FAILED, str(e)) from e
    per_cand = []
    for c, (total, res) in enumerate(zip(sel.total_losses, sel.results)):
        per_cand.append({
            "index": c,
            "total_loss": _finite_or_none(total),
            "views": [None if r is None else {
                "initial_loss": r.initial_loss, "final_loss": r.final_loss,
                "iterations": r.iterations, "converged": bool(r.converged),
                "pose": r.pose.to_json()} for r in res],
        })
    chosen = sel.results[sel.index]
    doc = {
        "episode": _relative_to_output(episode_dir, out_path),
        "chosen_index": sel.index,
        "poses": [p.to_json() for p in sel.poses],
        "initial_losses": [r.initial_loss for r in chosen],
        "final_losses": [r.final_loss for r in chosen],
        "total_losses": [_finite_or_none(t) for t in sel.total_losses],
        "candidates": per_cand,
        "config": cfg.to_json(),
    }
    fileio.dump_json(out_path, doc)
    _echo_config(_out_dir_for(out_path), cfg)
    return doc


def eval_poses(pred_path, episode_dir) -> tuple[dict, str]:
    pred = pipeline.load_pose_list(pred_path)
    meta = fileio.load_json(Path(episode_dir) / pipeline.EPISODE_FILE)
    gt = [PoseSE3.from_json(v["pose"]) for v in meta["views"]]
    rep = pose_metrics(pred, gt)
    return rep.to_json(), rep.pairs_csv()


def eval_meshes(cfg: RunConfig, pred_mesh_path, gt_mesh_path) -> dict:
    pred = fileio.read_obj(pred_mesh_path)
    gt = fileio.read_obj(gt_mesh_path)
    al = align_meshes(pred, gt, seed=cfg.seed, n_points=cfg.eval_points)
    aligned = apply_similarity(pred, al.transform)
    norm = unit_box_normalization(gt)
    f = fscore(apply_similarity(aligned, norm), apply_similarity(gt, norm), cfg.fscore_threshold,
               cfg.eval_points, cfg.seed)
    k = CameraIntrinsics.from_fov(40.0, cfg.eval_resolution, cfg.eval_resolution)
    views = eval_views_protocol(aligned, gt, k, cfg.eval_views, cfg.eval_elevation)
    return {
        "fscore_pct": f,
        "psnr_mean_db": views.mean_psnr,
        "psnr_per_view_db": views.psnrs,
        "alignment": dict(al.transform.to_json(), inlier_ratio=al.inlier_ratio, rms=al.rms,
                          n_initializations=al.n_initializations),
    }


def cmd_eval(cfg: RunConfig, out_dir, poses=None, episode=None, pred_mesh=None, gt_mesh=None) -> dict:
    if not ((poses and episode) or (pred_mesh and gt_mesh)):
        raise ConfigError("eval needs --poses with --episode, and/or --pred-mesh with --gt-mesh")
    if bool(poses) != bool(episode) or bool(pred_mesh) != bool(gt_mesh):
        raise ConfigError("--poses/--episode and --pred-mesh/--gt-mesh must be given in pairs")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    if poses:
        report, pairs = eval_poses(poses, episode)
        fileio.dump_json(out / "pose_metrics.json", report)
        (out / "pose_pairs.csv").write_text(pairs)
        result["pose_metrics"] = report
    if pred_mesh:
        mesh = eval_meshes(cfg, pred_mesh, gt_mesh)
        fileio.dump_json(out / "mesh_metrics.json", mesh)
        result["mesh_metrics"] = mesh
    _echo_config(out, cfg)
    return result


BENCH_COLUMNS = ["scene", "kind", "n_views", "n_init", "chosen_index", "pnp_median_rot_err_deg",
                 "refined_median_rot_err_deg", "refined_acc_at_15", "refined_acc_at_30",
                 "refined_median_trans_err", "total_final_loss"]


def cmd_bench(cfg: RunConfig, out_dir, spec_path=None) -> list:
    """generate, solve, refine and eval over a suite; writes bench.csv and bench_summary.json."""
    out = Path(out_dir)
    manifest = cmd_generate(cfg, out / "episodes", spec_path)
    rows = []
    for entry in manifest["episodes"]:
        ep_dir = out / "episodes" / entry["name"]
        run = out / "runs" / entry["name"]
        row = {"scene": entry["name"], "kind": entry["kind"], "n_views": entry["n_views"], "n_init": cfg.n_init}
        try:
            solved = cmd_solve(cfg, ep_dir, run / "candidates.json")
        except CliError:
            solved = None
        refined = None
        if solved is not None:
            try:
                refined = cmd_refine(cfg, ep_dir, run / "candidates.json", run / "refined.json")
            except CliError:
                refined = None
        row.update(_bench_metrics(run, ep_dir, solved, refined, entry["n_views"]))
        rows.append(row)
    with open(out / "bench.csv", "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=BENCH_COLUMNS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _csv_value(r.get(k)) for k in BENCH_COLUMNS})
    refined_errs = [r["refined_median_rot_err_deg"] for r in rows if r.get("refined_median_rot_err_deg") is not None]
    summary = {
        "n_scenes": len(rows),
        "n_refined": len(refined_errs),
        "median_refined_rot_err_deg": float(np.median(refined_errs)) if refined_errs else None,
        "config": cfg.to_json(),
    }
    fileio.dump_json(out / "bench_summary.json", summary)
    _echo_config(out, cfg)
    return rows


def _csv_value(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return v


def _bench_metrics(run: Path, ep_dir: Path, solved, refined, n_views: int) -> dict:
    row = {"chosen_index": None, "pnp_median_rot_err_deg": None, "refined_median_rot_err_deg": None,
           "refined_acc_at_15": None, "refined_acc_at_30": None, "refined_median_trans_err": None,
           "total_final_loss": None}
    if n_views < 2:
        return row
    meta = fileio.load_json(ep_dir / pipeline.EPISODE_FILE)
    gt = [PoseSE3.from_json(v["pose"]) for v in meta["views"]]
    if solved is not None:
        first = pipeline.candidates_from_json(solved["candidates"][:1])[0]
        if all(p is not None for p in first):
            row["pnp_median_rot_err_deg"] = pose_metrics(first, gt).median_rotation_error
    if refined is not None:
        row["chosen_index"] = refined["chosen_index"]
        poses = [PoseSE3.from_json(p) for p in refined["poses"]]
        rep = pose_metrics(poses, gt)
        fileio.dump_json(run / "pose_metrics.json", rep.to_json())
        (run / "pose_pairs.csv").write_text(rep.pairs_csv())
        row.update(refined_median_rot_err_deg=rep.median_rotation_error, refined_acc_at_15=rep.acc_at_15,
                   refined_acc_at_30=rep.acc_at_30, refined_median_trans_err=rep.median_translation_error,
                   total_final_loss=float(sum(refined["final_losses"])))
    return row


# --- argument parsing ----------------------------------------------------------

def _add_config_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run configuration (override config file and environment)")
    g.add_argument("--config", help="YAML or JSON file with run configuration keys")
    for f in fields(RunConfig):
        typ = {"int": int, "float": float}.get(f.type, str)
        g.add_argument("--" + f.name.replace("_", "-"), dest=f.name, type=typ, default=None,
                       metavar=f.type.upper())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nocspose",
        description="NOCS-map pose estimation, render-and-compare refinement and evaluation. "
                    "Candidate samples are emulated by corrupting ground-truth NOCS maps.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render synthetic episodes")
    p.add_argument("--spec", help="scene spec (YAML/JSON); default: built-in suite of bench-scenes")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("solve", help="solve candidate pose sets from an episode's NOCS maps")
    p.add_argument("--episode", required=True)
    p.add_argument("--out", required=True, help="candidates JSON path")
    _add_config_flags(p)

    p = sub.add_parser("refine", help="refine candidates against a mesh and select one")
    p.add_argument("--episode", required=True)
    p.add_argument("--candidates", required=True)
    p.add_argument("--mesh", help="OBJ mesh (default: the episode's mesh)")
    p.add_argument("--out", required=True, help="refined JSON path")
    _add_config_flags(p)

    p = sub.add_parser("eval", help="relative pose and/or mesh metrics")
    p.add_argument("--poses", help="predicted poses (refine output, candidates file or pose list)")
    p.add_argument("--episode", help="ground-truth episode directory")
    p.add_argument("--pred-mesh")
    p.add_argument("--gt-mesh")
    p.add_argument("--out", required=True, help="output directory")
    _add_config_flags(p)

    p = sub.add_parser("bench", help="generate + solve + refine + eval over a suite")
    p.add_argument("--spec", help="scene spec (YAML/JSON); default: built-in suite")
    p.add_argument("--out", required=True)
    _add_config_flags(p)
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = build_config(args.config, overrides)
        if args.command == "generate":
            cmd_generate(cfg, args.out, args.spec)
        elif args.command == "solve":
            cmd_solve(cfg, args.episode, args.out)
        elif args.command == "refine":
            cmd_refine(cfg, args.episode, args.candidates, args.out, args.mesh)
        elif args.command == "eval":
            res = cmd_eval(cfg, args.out, args.poses, args.episode, args.pred_mesh, args.gt_mesh)
            print(json.dumps(res.get("pose_metrics", res.get("mesh_metrics")), indent=2))
        else:
            cmd_bench(cfg, args.out, args.spec)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except (ConfigError, NocsPoseError, KeyError, TypeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
