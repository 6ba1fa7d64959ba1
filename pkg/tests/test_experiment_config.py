import json

import numpy as np
import pandas as pd
import pytest

from app_paths import PRESETS_DIR
from errors import ConfigError
from experiment_config import (
    DEFAULT_EXPERIMENT,
    build_environment,
    feature_cap,
    load_experiment,
    parse_experiment,
    parse_overrides,
    parse_seed_range,
    policy_setup,
)
from simulator import load_feature_file
from utility_models import TwoLayerSigmoidNet, write_model_checkpoint


class TestParseExperiment:
    def test_defaults(self, tmp_path):
        config = parse_experiment({}, tmp_path)
        assert config.horizon == 1000
        assert [p.name for p in config.policies] == [p["name"] for p in DEFAULT_EXPERIMENT["policies"]]
        assert config.seeds == tuple(range(10))
        assert config.schedule_kwargs()["t0_override"] is None

    def test_all_problems_reported_together(self):
        with pytest.raises(ConfigError) as error:
            parse_experiment({"environment": {"n_items": 0, "colour": "red"}, "schedule": {"kappa": 0.5}})
        problems = error.value.problems
        assert any("environment.n_items" in p for p in problems)
        assert any("environment.colour: unknown key" in p for p in problems)
        assert any("schedule.kappa" in p for p in problems)

    def test_capacity_above_items(self):
        with pytest.raises(ConfigError):
            parse_experiment({"environment": {"n_items": 3, "capacity": 4}})

    def test_single_policy_shorthand(self):
        config = parse_experiment({"policy": {"name": "ucb-mnl", "params": {"alpha": 1.0}}})
        assert len(config.policies) == 1
        assert config.policies[0].params == {"alpha": 1.0}

    def test_unknown_policy_parameter(self):
        with pytest.raises(ConfigError) as error:
            parse_experiment({"policies": [{"name": "ts-mnl", "params": {"alpha": 1.0}}]})
        assert "alpha" in str(error.value)

    def test_duplicate_policy(self):
        with pytest.raises(ConfigError):
            parse_experiment({"policies": ["uniform", "uniform"]})

    def test_relative_output_dir(self, tmp_path):
        config = parse_experiment({"output_dir": "out"}, tmp_path)
        assert config.output_dir == tmp_path / "out"

    def test_revenue_list_length(self):
        with pytest.raises(ConfigError):
            parse_experiment({"environment": {"n_items": 3, "capacity": 1, "revenue": [1.0, 0.5]}})

    def test_unequal_revenues_above_brute_force_limit(self):
        revenue = [round(0.5 + 0.01 * i, 2) for i in range(30)]
        with pytest.raises(ConfigError) as error:
            parse_experiment({"environment": {"n_items": 30, "capacity": 2, "horizon": 3, "revenue": revenue}, "policies": ["uniform"]})
        assert any("brute_force_limit" in p for p in error.value.problems)

    def test_unequal_revenues_within_raised_limit(self):
        revenue = [round(0.5 + 0.01 * i, 2) for i in range(30)]
        config = parse_experiment({
            "environment": {"n_items": 30, "capacity": 2, "horizon": 3, "revenue": revenue},
            "solver": {"brute_force_limit": 30},
            "policies": ["uniform"],
        })
        assert build_environment(config, seed=0).brute_force_limit == 30

    def test_equal_revenue_list_skips_the_limit(self):
        config = parse_experiment({"environment": {"n_items": 30, "capacity": 2, "revenue": [0.7] * 30}})
        assert build_environment(config, seed=0).revenues.is_uniform

    def test_feature_file_needs_paths(self):
        with pytest.raises(ConfigError):
            parse_experiment({"environment": {"kind": "feature_file", "context": "feature_file"}})

    def test_with_overrides(self):
        config = parse_experiment({"name": "x"}).with_overrides({"schedule.c_beta": 0.5, "environment.horizon": 50})
        assert config.schedule["c_beta"] == 0.5
        assert config.horizon == 50
        assert config.name == "x"


class TestCliHelpers:
    def test_seed_range(self):
        assert parse_seed_range("0..29") == list(range(30))
        with pytest.raises(ConfigError):
            parse_seed_range("5..2")
        with pytest.raises(ConfigError):
            parse_seed_range("five")

    def test_overrides(self):
        assert parse_overrides(["a.b=3", "c=fast", "d=[1, 2]"]) == {"a.b": 3, "c": "fast", "d": [1, 2]}
        with pytest.raises(ConfigError):
            parse_overrides(["novalue"])


class TestLoadExperiment:
    def test_json_with_overrides(self, tmp_path):
        path = tmp_path / "exp.json"
        path.write_text(json.dumps({"name": "exp", "environment": {"horizon": 20}}), encoding="utf-8")
        config = load_experiment(path, ["environment.n_items=7"], "3..4", tmp_path / "out")
        assert config.environment["n_items"] == 7
        assert config.seeds == (3, 4)
        assert config.output_dir == (tmp_path / "out").resolve()

    def test_toml(self, tmp_path):
        path = tmp_path / "exp.toml"
        path.write_text('name = "t"\nseeds = [1]\n\n[environment]\nhorizon = 12\n\n[[policies]]\nname = "uniform"\n', encoding="utf-8")
        config = load_experiment(path)
        assert config.horizon == 12
        assert [p.name for p in config.policies] == ["uniform"]

    def test_missing_file(self, tmp_path):
        with pytest.raises(ConfigError):
            load_experiment(tmp_path / "absent.json")

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{", encoding="utf-8")
        with pytest.raises(ConfigError):
            load_experiment(path)


class TestBuilders:
    def test_feature_cap_follows_the_contexts(self):
        box = parse_experiment({"environment": {"context": "uniform_box", "dim": 4}})
        assert feature_cap(box) == pytest.approx(6.0)
        assert policy_setup(box).estimator.feature_cap == pytest.approx(6.0)
        ball = parse_experiment({"environment": {"enforce_unit_ball": True}})
        assert feature_cap(ball) == 1.0
        pinned = parse_experiment({"environment": {"context": "uniform_box"}, "estimator": {"feature_cap": 2.5}})
        assert feature_cap(pinned) == 2.5

    def test_feature_file_contexts_come_from_held_out_rows(self, tmp_path):
        rng = np.random.default_rng(0)
        X = rng.standard_normal((50, 2))
        pd.DataFrame({"id": range(50), "f0": X[:, 0], "f1": X[:, 1]}).to_csv(tmp_path / "items.csv", index=False)
        truth = TwoLayerSigmoidNet(2, 4)
        write_model_checkpoint(tmp_path / "truth.json", truth, truth.truth_params(rng))
        config = parse_experiment({
            "environment": {
                "kind": "feature_file", "context": "feature_file", "n_items": 5, "capacity": 2,
                "feature_file": "items.csv", "truth_checkpoint": "truth.json",
            },
        }, tmp_path)
        env = build_environment(config, seed=0)
        held = {tuple(row) for row in load_feature_file(tmp_path / "items.csv").features[40:]}
        for t in range(1, 30):
            assert {tuple(row) for row in env.draw_context(rng, t).items} <= held
        assert feature_cap(config) == pytest.approx(np.linalg.norm(X[40:], axis=1).max())

    def test_holdout_fraction_range(self):
        with pytest.raises(ConfigError):
            parse_experiment({"environment": {"holdout_fraction": 1.0}})

    def test_environment_and_setup_agree(self):
        config = parse_experiment({"environment": {"n_items": 10, "capacity": 2, "dim": 2, "horizon": 30}, "schedule": {"t0": 5}})
        env = build_environment(config, seed=1)
        setup = policy_setup(config)
        assert (env.dim, env.capacity, env.horizon) == (setup.dim, setup.capacity, setup.horizon)
        assert setup.schedule["t0_override"] == 5

    def test_misspecified(self):
        config = parse_experiment({"environment": {"kind": "misspecified", "context": "uniform_box", "n_items": 10, "capacity": 2}})
        assert build_environment(config, seed=0).truth.kind == "cosine_mixture"


@pytest.mark.parametrize("path", sorted(PRESETS_DIR.iterdir()), ids=lambda path: path.name)
def test_shipped_presets_parse(path):
    config = load_experiment(path)
    assert config.name == path.stem
    assert policy_setup(config).estimator.feature_cap > 0
