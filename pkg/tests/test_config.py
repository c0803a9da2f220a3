import json

import pytest

from nocspose.config import ConfigError, RunConfig, build_config, dump_config, env_overrides, read_config_file


class TestRunConfig:
    def test_defaults_match_module_defaults(self):
        cfg = RunConfig()
        s = cfg.solve_config()
        assert (s.iterations, s.inlier_threshold_px, s.min_inlier_ratio) == (512, 2.0, 0.25)
        assert (s.lm_max_iters, s.lm_damping) == (100, 1e-3)
        r = cfg.refine_config()
        assert (r.max_iters, r.fd_epsilon) == (100, 1e-3)
        assert cfg.fscore_threshold == 0.05 and cfg.eval_views == 24 and cfg.eval_points == 100_000

    @pytest.mark.parametrize("kw", [{"n_views": 7}, {"n_views": 0}, {"n_init": 0}, {"radius_min": -1.0},
                                    {"min_inlier_ratio": 1.5}])
    def test_validation(self, kw):
        with pytest.raises(ConfigError):
            RunConfig(**kw)

    def test_n_views_message_names_bound(self):
        with pytest.raises(ConfigError, match=r"\[1, 6\]"):
            RunConfig(n_views=9)

    def test_json_echo(self):
        d = json.loads(dump_config(RunConfig(seed=5)))
        assert d["seed"] == 5 and RunConfig(**d) == RunConfig(seed=5)


class TestPrecedence:
    def test_file_env_cli_order(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("seed: 1\nn-init: 2\nnoise_sigma: 0.01\n")
        env = {"NOCSPOSE_N_INIT": "3", "NOCSPOSE_SEED": "4", "UNRELATED": "x"}
        cfg = build_config(path, {"seed": 9, "width": None}, env)
        assert cfg.seed == 9          # flag beats env and file
        assert cfg.n_init == 3        # env beats file
        assert cfg.noise_sigma == 0.01  # file beats default
        assert cfg.width == 128       # unset flag keeps the default

    def test_json_file(self, tmp_path):
        path = tmp_path / "c.json"
        path.write_text(json.dumps({"ransac_iterations": 64}))
        assert read_config_file(path) == {"ransac_iterations": 64}

    def test_unknown_key(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("no_such_field: 1\n")
        with pytest.raises(ConfigError):
            read_config_file(path)

    def test_bad_types(self, tmp_path):
        with pytest.raises(ConfigError):
            env_overrides({"NOCSPOSE_SEED": "abc"})
        path = tmp_path / "c.yaml"
        path.write_text("seed: 1.5\n")
        with pytest.raises(ConfigError):
            read_config_file(path)

    def test_malformed_and_missing(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("seed: [1,\n")
        with pytest.raises(ConfigError):
            read_config_file(path)
        with pytest.raises(OSError):
            read_config_file(tmp_path / "absent.yaml")
