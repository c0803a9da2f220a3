"""Run configuration shared by every CLI command.

Precedence, lowest first: dataclass defaults, a YAML/JSON config file,
``NOCSPOSE_<FIELD>`` environment variables, explicit command-line flags.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping, Optional

import yaml

from .posesolve import SolveConfig
from .refine import RefineConfig, RenderLossWeights
from .synth import CameraSamplerConfig, NoiseSpec

ENV_PREFIX = "NOCSPOSE_"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    # episode generation
    n_views: int = 3
    width: int = 128
    height: int = 128
    fov_mean: float = 36.0
    fov_std: float = 9.0
    elevation_min: float = -10.0
    elevation_max: float = 50.0
    radius_min: float = 1.8
    radius_max: float = 3.2
    supersample: int = 4
    # RANSAC / LM
    ransac_iterations: int = 512
    inlier_threshold_px: float = 2.0
    min_inlier_ratio: float = 0.25
    ransac_confidence: float = 0.9999
    stride: int = 0
    lm_max_iters: int = 100
    lm_damping: float = 1e-3
    # candidate emulation (stand-in for independent diffusion samples)
    n_init: int = 1
    noise_sigma: float = 0.0
    outlier_fraction: float = 0.0
    boundary_erosion_px: int = 0
    flip_probability: float = 0.0
    # refinement
    lambda_mask: float = 1.0
    mu_rgb: float = 1.0
    refine_max_iters: int = 100
    refine_resolution: int = 0
    fd_epsilon: float = 1e-3
    # evaluation
    eval_points: int = 100_000
    fscore_threshold: float = 0.05
    eval_views: int = 24
    eval_resolution: int = 512
    eval_elevation: float = 15.0
    # bench
    bench_scenes: int = 8

    def __post_init__(self):
        checks = [
            (1 <= self.n_views <= 6, "n_views must be within [1, 6]"),
            (self.width > 0 and self.height > 0, "width and height must be positive"),
            (self.supersample >= 1, "supersample must be >= 1"),
            (self.radius_min > 0 and self.radius_max >= self.radius_min, "invalid radius range"),
            (self.elevation_min <= self.elevation_max, "invalid elevation range"),
            (self.ransac_iterations >= 1, "ransac_iterations must be >= 1"),
            (self.inlier_threshold_px > 0, "inlier_threshold_px must be positive"),
            (0 <= self.min_inlier_ratio <= 1, "min_inlier_ratio must be within [0, 1]"),
            (0 < self.ransac_confidence < 1, "ransac_confidence must be within (0, 1)"),
            (self.stride >= 0, "stride must be >= 0 (0 = automatic)"),
            (self.n_init >= 1, "n_init must be >= 1"),
            (self.refine_max_iters >= 0, "refine_max_iters must be >= 0"),
            (self.refine_resolution >= 0, "refine_resolution must be >= 0 (0 = native)"),
            (self.eval_points >= 1, "eval_points must be >= 1"),
            (self.eval_views >= 1, "eval_views must be >= 1"),
            (self.bench_scenes >= 1, "bench_scenes must be >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)

    # --- views onto module configs ---------------------------------------

    def camera_config(self, seed: Optional[int] = None) -> CameraSamplerConfig:
        return CameraSamplerConfig(
            width=self.width, height=self.height, fov_mean=self.fov_mean, fov_std=self.fov_std,
            elevation_range=(self.elevation_min, self.elevation_max),
            radius_range=(self.radius_min, self.radius_max),
            seed=self.seed if seed is None else seed,
        )

    def solve_config(self, seed: Optional[int] = None) -> SolveConfig:
        return SolveConfig(
            iterations=self.ransac_iterations, inlier_threshold_px=self.inlier_threshold_px,
            min_inlier_ratio=self.min_inlier_ratio, seed=self.seed if seed is None else seed,
            confidence=self.ransac_confidence, stride=self.stride,
            lm_max_iters=self.lm_max_iters, lm_damping=self.lm_damping,
        )

    def noise_spec(self, seed: int) -> NoiseSpec:
        try:
            return NoiseSpec(self.noise_sigma, self.outlier_fraction, self.boundary_erosion_px,
                             self.flip_probability, seed)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def refine_config(self) -> RefineConfig:
        return RefineConfig(max_iters=self.refine_max_iters, fd_epsilon=self.fd_epsilon,
                            supersample=self.supersample)

    def loss_weights(self) -> RenderLossWeights:
        try:
            return RenderLossWeights(self.lambda_mask, self.mu_rgb)
        except ValueError as e:
            raise ConfigError(str(e)) from e

    def to_json(self) -> dict:
        return dataclasses.asdict(self)


def _coerce(name: str, typ, value):
    if isinstance(value, str):
        text = value.strip()
        try:
            if typ == "int":
                return int(text)
            if typ == "float":
                return float(text)
        except ValueError:
            raise ConfigError(f"{name}: cannot parse {value!r} as {typ}") from None
        return text
    if typ == "int":
        if isinstance(value, bool) or not float(value).is_integer():
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return int(value)
    if typ == "float":
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    return value


def _types() -> dict:
    return {f.name: f.type for f in fields(RunConfig)}


def _normalize_keys(values: Mapping) -> dict:
    types = _types()
    out = {}
    for key, value in values.items():
        name = str(key).replace("-", "_").lower()
        if name not in types:
            raise ConfigError(f"unknown config key {key!r}")
        out[name] = _coerce(name, types[name], value)
    return out


def read_config_file(path) -> dict:
    """Key-value mapping from a YAML or JSON file (flat, kebab or snake case keys)."""
    try:
        text = Path(path).read_text()
    except OSError as e:
        raise OSError(f"cannot read config file {path}: {e}") from e
    try:
        data = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as e:
        raise ConfigError(f"malformed config file {path}: {e}") from e
    if not isinstance(data, dict):
        raise ConfigError(f"config file {path} must hold a mapping")
    return _normalize_keys(data)


def env_overrides(environ: Optional[Mapping[str, str]] = None) -> dict:
    environ = os.environ if environ is None else environ
    types = _types()
    found = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX):].lower()
            if name in types:
                found[name] = value
    return _normalize_keys(found)


def build_config(path=None, cli: Optional[Mapping] = None,
                 environ: Optional[Mapping[str, str]] = None) -> RunConfig:
    values = {}
    if path:
        values.update(read_config_file(path))
    values.update(env_overrides(environ))
    if cli:
        values.update(_normalize_keys({k: v for k, v in cli.items() if v is not None}))
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return json.dumps(cfg.to_json(), indent=2) + "\n"
