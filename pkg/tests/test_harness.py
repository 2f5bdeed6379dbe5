import io
import json
import subprocess
import sys

import jsonschema
import numpy as np
import pytest

from robust_ctrl import cli, harness
from robust_ctrl import mdp as M
from robust_ctrl.envs import default_params, energy_pumping_controller, make_env_set
from robust_ctrl.exceptions import ConfigError, TrainingError


def tiny(tmp_path, **kw):
    cfg = {
        "name": "tiny",
        "domain": "pendulum_swingup",
        "training_values": [1.0, 1.1, 1.4],
        "holdout_values": [1.7, 1.5, 1.6],
        "episodes": 4,
        "seeds": [0, 1],
        "n_eval_episodes": 3,
        "env": {"episode_length": 40},
        "agent": {"policy_hidden": [8], "critic_hidden": [8], "batch_size": 16, "warmup_steps": 40,
                  "steps_per_round": 40, "critic_updates_per_round": 2, "policy_batch_size": 8,
                  "n_envs": 2},
        "output_dir": str(tmp_path / "runs"),
    }
    cfg.update(kw)
    return cfg


def write(tmp_path, doc, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(doc))
    return path


class ZeroPolicy:
    def mean_action(self, obs):
        return np.zeros((len(obs), 1))


class ControllerPolicy:
    """Adapts a raw-state pendulum controller to the observation interface."""

    def __init__(self, controller):
        self.controller = controller

    def mean_action(self, obs):
        states = np.stack([np.arctan2(obs[:, 1], obs[:, 0]), obs[:, 2]], axis=1)
        return self.controller(states)


class TestConfig:
    def test_defaults_filled(self, tmp_path):
        cfg = harness.validate_config(tiny(tmp_path))
        assert cfg["mode"] == "robust" and cfg["algorithm"] == "mpo" and cfg["nominal"] == "min"
        assert harness.agent_config(cfg).critic_hidden == (8,)

    @pytest.mark.parametrize("bad", [
        {"unknown_key": 1},
        {"agent": {"learning_rate": 1e-3}},
        {"mode": "paranoid"},
        {"episodes": -1},
        {"training_values": []},
        {"weights": [0.5, 0.5]},
        {"domain": "acrobot"},
        {"algorithm": "svg", "limited_dr": True},
    ])
    def test_invalid_configs_rejected(self, tmp_path, bad):
        with pytest.raises(ConfigError):
            harness.validate_config(tiny(tmp_path, **bad))

    def test_schema_diagnostics_name_the_key(self, tmp_path):
        with pytest.raises(ConfigError, match="unknown_key"):
            harness.validate_config(tiny(tmp_path, unknown_key=1))


class TestEvaluation:
    def test_zero_torque_from_bottom(self):
        env = make_env_set("pendulum_swingup", (1.0,), (1.0,)).nominal
        # start states are uniform in angle; compare with an at-rest bottom start
        returns = harness.episode_returns(ZeroPolicy(), env, 5, seed=0)
        assert np.all(returns >= 0)
        bottom = np.array([[np.pi, 0.0]])
        total = 0.0
        for _ in range(env.params.episode_length):
            bottom, r = env.batch_step(bottom, np.zeros((1, 1)))
            total += r[0]
        assert total < 1e-6

    def test_energy_pumping_beats_half_of_max(self):
        env = make_env_set("pendulum_swingup", (1.0,), (1.0,)).nominal
        policy = ControllerPolicy(energy_pumping_controller(env.params))
        mean, _ = harness.eval_policy(policy, env, 10, seed=0)
        assert mean > 0.5 * env.params.episode_length

    def test_mean_is_mean_of_logged_returns(self):
        env = make_env_set("pendulum_swingup", (1.0,), (1.2,)).holdout_set[0]
        policy = ControllerPolicy(energy_pumping_controller(default_params("pendulum_swingup")))
        mean, std = harness.eval_policy(policy, env, 7, seed=3)
        returns = harness.episode_returns(policy, env, 7, seed=3)
        assert mean == np.mean(returns) and std == np.std(returns)

    def test_holdout_order_by_perturbation_size(self):
        es = make_env_set("pendulum_swingup", (1.0, 1.1), (1.7, 1.5, 1.6))
        assert [es.holdout_values[k] for k in harness.holdout_order(es)] == [1.5, 1.6, 1.7]


class TestRun:
    def test_zero_episodes_still_evaluates(self, tmp_path):
        cfg = harness.validate_config(tiny(tmp_path, episodes=0))
        doc = harness.run(cfg)
        assert doc["status"] == "complete"
        assert [r["perturbation_value"] for r in doc["rows"]] == [1.5, 1.6, 1.7]
        assert [r["env_index"] for r in doc["rows"]] == [0, 1, 2]
        assert all(r["n_seeds"] == 2 and r["std_return"] >= 0 for r in doc["rows"])

    def test_results_are_reproducible_and_valid(self, tmp_path):
        cfg = harness.validate_config(tiny(tmp_path))
        harness.run(cfg)
        out = tmp_path / "runs" / "tiny"
        first = {p: (out / p).read_bytes() for p in ("results.json", "results.csv", "seed_1/eval.json",
                                                     "seed_1/policy.ckpt")}
        harness.run(cfg)
        for p, blob in first.items():
            assert (out / p).read_bytes() == blob, p
        doc = json.loads(first["results.json"])
        jsonschema.validate(doc, harness.load_schema("results.schema.json"))
        lines = first["results.csv"].decode().splitlines()
        assert lines[0] == ",".join(harness.RESULT_COLUMNS) and len(lines) == 4
        metrics = (out / "seed_0" / "metrics.csv").read_text().splitlines()
        assert len(metrics) == 1 + cfg["episodes"]

    def test_parallel_seeds_match_serial(self, tmp_path, monkeypatch):
        serial = harness.run(harness.validate_config(tiny(tmp_path, name="serial")))
        monkeypatch.setenv("ROBUST_CTRL_THREADS", "2")
        parallel = harness.run(harness.validate_config(tiny(tmp_path, name="parallel")))
        assert serial["rows"] == parallel["rows"]

    def test_bad_thread_setting(self, monkeypatch):
        monkeypatch.setenv("ROBUST_CTRL_THREADS", "many")
        with pytest.raises(ConfigError):
            harness.worker_count(3)

    def test_svg_and_limited_dr_run(self, tmp_path):
        for extra in ({"algorithm": "svg", "name": "svg"}, {"limited_dr": True, "name": "ldr"}):
            doc = harness.run(harness.validate_config(tiny(tmp_path, seeds=[0], **extra)))
            assert doc["status"] == "complete"

    def test_ddr_run(self, tmp_path):
        cfg = tiny(tmp_path, seeds=[0], name="ddr", ddr={"dataset_size": 200, "epochs": 1,
                                                         "min_updates": 10})
        assert harness.run(harness.validate_config(cfg))["status"] == "complete"

    def test_aborted_run_is_flagged(self, tmp_path):
        cfg = harness.validate_config(tiny(tmp_path, domain="cartpole_swingup",
                                           training_values=[1.0], holdout_values=[1.2], seeds=[0],
                                           env={"episode_length": 40, "actuator_limit": 1e300}))
        with pytest.raises(TrainingError):
            harness.run(cfg)
        out = tmp_path / "runs" / "tiny"
        doc = json.loads((out / "results.json").read_text())
        assert doc["status"] == "aborted" and doc["completed_seeds"] == []
        assert (out / "seed_0" / "aborted_policy.ckpt").exists()

    def test_comparison_table(self, tmp_path):
        a = harness.run(harness.validate_config(tiny(tmp_path, name="a", episodes=0)))
        b = harness.run(harness.validate_config(tiny(tmp_path, name="b", episodes=0, seeds=[1, 2])))
        rows = harness.comparison_table(a, b, "a", "b")
        assert [r["n_seeds"] for r in rows] == [1, 1, 1]
        for r, ra, rb in zip(rows, a["rows"], b["rows"]):
            assert r["mean_a"] == ra["seed_means"][1] and r["mean_b"] == rb["seed_means"][0]
            assert r["wins"] == int(r["mean_a"] >= r["mean_b"])


class TestStudies:
    def base(self, tmp_path, **kw):
        return harness.validate_config(tiny(tmp_path, **kw))

    def test_extra_samples_budgets(self, tmp_path):
        cells = harness.study_cells("extra_samples", self.base(tmp_path))
        budgets = {c["episodes"] // 4 for c in cells if c["mode"] == "non_robust"}
        assert budgets == {1, 3}

    def test_modify_uncertainty_third_values(self, tmp_path):
        cells = harness.study_cells("modify_uncertainty", self.base(tmp_path))
        assert [c["training_values"] for c in cells] == [[1.0, 1.1, 1.2], [1.0, 1.1, 1.3], [1.0, 1.1, 2.0]]

    def test_ddr_grid_sizes(self, tmp_path):
        cells = harness.study_cells("ddr_grid", self.base(tmp_path))
        sizes = [c["ddr"]["dataset_size"] for c in cells if c["ddr"]]
        assert sizes == [100, 1_000, 10_000, 100_000, 1_000_000]
        assert all(c["training_values"] == [1.0, 1.1, 1.2] for c in cells)

    def test_larger_test_set_values(self, tmp_path):
        cells = harness.study_cells("larger_test_set", self.base(tmp_path))
        assert {c["mode"] for c in cells} == {"robust", "soft_robust", "non_robust"}
        assert all(c["holdout_values"] == [1.0, 1.1, 1.2, 1.3, 1.4, 1.5] for c in cells)
        assert all(c["parameter"] == "pole_length" for c in cells)
        cart = self.base(tmp_path, domain="cartpole_balance", training_values=[0.5, 1.9, 2.1],
                         holdout_values=[2.0])
        assert harness.study_cells("larger_test_set", cart)[0]["holdout_values"] == \
            [0.5, 0.7, 0.9, 1.1, 1.3, 1.5, 1.7, 1.9]

    def test_nominal_choice_grid(self, tmp_path):
        cells = harness.study_cells("nominal_choice", self.base(tmp_path))
        assert len(cells) == 9
        assert {(c["nominal"], c["mode"]) for c in cells} == {
            (n, m) for n in ("min", "median", "max") for m in ("robust", "soft_robust", "non_robust")}
        assert len({c["name"] for c in cells}) == 9

    def test_unknown_study(self, tmp_path):
        with pytest.raises(ConfigError):
            harness.study_cells("bigger_hammer", self.base(tmp_path))

    def test_limited_dr_study_emits_table(self, tmp_path):
        doc = harness.study("limited_dr", self.base(tmp_path, seeds=[0]))
        assert {r["cell"] for r in doc["rows"]} == {"robust", "limited_dr"}
        text = (tmp_path / "runs" / "tiny" / "study.csv").read_text().splitlines()
        assert text[0].startswith("cell,env_index") and len(text) == 1 + 6


class TestCli:
    def test_run_exit_codes(self, tmp_path):
        good = write(tmp_path, tiny(tmp_path, episodes=0, seeds=[0]))
        out = io.StringIO()
        assert cli.main(["run", str(good)], out) == 0
        assert out.getvalue().startswith("env_index,")
        bad = write(tmp_path, tiny(tmp_path, surprise=True), "bad.json")
        assert cli.main(["run", str(bad)], io.StringIO()) == 2
        assert cli.main(["run", str(tmp_path / "missing.json")], io.StringIO()) == 2
        (tmp_path / "broken.json").write_text("{not json")
        assert cli.main(["run", str(tmp_path / "broken.json")], io.StringIO()) == 2
        assert cli.main(["bogus"], io.StringIO()) == 2

    def test_runtime_failure_exit_code(self, tmp_path):
        cfg = write(tmp_path, tiny(tmp_path, domain="cartpole_swingup", training_values=[1.0],
                                   holdout_values=[1.2], seeds=[0],
                                   env={"episode_length": 40, "actuator_limit": 1e300}))
        assert cli.main(["run", str(cfg)], io.StringIO()) == 3

    def test_eval_checkpoint(self, tmp_path):
        cfg_path = write(tmp_path, tiny(tmp_path, seeds=[0]))
        assert cli.main(["run", str(cfg_path)], io.StringIO()) == 0
        ckpt = tmp_path / "runs" / "tiny" / "seed_0" / "policy.ckpt"
        out = io.StringIO()
        assert cli.main(["eval", str(ckpt), str(cfg_path)], out) == 0
        lines = out.getvalue().splitlines()
        assert len(lines) == 4
        ev = json.loads((tmp_path / "runs" / "tiny" / "seed_0" / "eval.json").read_text())
        # first holdout in nominal order is 1.5, stored at index 1
        assert float(lines[1].split(",")[2]) == pytest.approx(np.mean(ev["returns"][1]), rel=1e-5)
        assert cli.main(["eval", str(tmp_path / "nope.ckpt"), str(cfg_path)], io.StringIO()) == 2

    def test_solve_mdp(self, tmp_path):
        mdp, U = M.random_mdp(np.random.default_rng(0), 4, 2, 3, 0.9)
        M.save_mdp(tmp_path / "m.json", mdp, U)
        out = io.StringIO()
        assert cli.main(["solve-mdp", str(tmp_path / "m.json"), "--mode", "soft_robust",
                         "--tau", "0.1"], out) == 0
        doc = json.loads(out.getvalue())
        ref = M.value_iteration(mdp, U, M.RegularizationSpec(0.1), "soft_robust")
        np.testing.assert_allclose(doc["values"], ref.values, rtol=0, atol=0)
        assert doc["converged"]

    def test_solve_mdp_rejects_bad_documents(self, tmp_path):
        mdp, U = M.random_mdp(np.random.default_rng(0), 3, 2, 2, 0.9)
        M.save_mdp(tmp_path / "m.json", mdp, U)
        doc = json.loads((tmp_path / "m.json").read_text())
        doc["kernels"][0][0][0] = [0.9, 0.9, 0.9]
        (tmp_path / "bad.json").write_text(json.dumps(doc))
        assert cli.main(["solve-mdp", str(tmp_path / "bad.json")], io.StringIO()) == 2
        doc["extra"] = 1
        (tmp_path / "bad2.json").write_text(json.dumps(doc))
        assert cli.main(["solve-mdp", str(tmp_path / "bad2.json")], io.StringIO()) == 2

    def test_console_script(self):
        proc = subprocess.run([sys.executable, "-m", "robust_ctrl.cli", "--help"], capture_output=True,
                              text=True)
        assert proc.returncode == 0 and "solve-mdp" in proc.stdout
