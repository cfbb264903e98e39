import json

import numpy as np
import pytest
import yaml
from click.testing import CliRunner

from config import load_config
from env_core import GridWorld
from main import cli
from persistence import read_csv

QUICK = ["--set", "training.epochs=2", "--set", "training.rollouts_per_epoch=2",
         "--set", "training.hidden_sizes=[8]"]


@pytest.fixture
def runner():
    return CliRunner()


@pytest.fixture
def trained(runner, tiny_path, tmp_path):
    out = tmp_path / "train"
    result = runner.invoke(cli, ["train", str(tiny_path), *QUICK, "--out", str(out)])
    assert result.exit_code == 0, result.output
    return out


def test_validate_config_prints_resolved_yaml(runner, tiny_path):
    result = runner.invoke(cli, ["validate-config", str(tiny_path), "--seed", "4"])
    assert result.exit_code == 0
    doc = yaml.safe_load(result.output)
    assert doc["scenario"]["horizon"] == 5
    assert doc["training"]["seed"] == 4


def test_missing_horizon_exits_with_config_error(runner, tiny_path, tmp_path):
    raw = yaml.safe_load(tiny_path.read_text())
    del raw["scenario"]["horizon"]
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(raw))
    result = runner.invoke(cli, ["validate-config", str(bad)])
    assert result.exit_code == 1
    assert "scenario.horizon" in result.output


def test_train_writes_run_directory(trained):
    assert (trained / "config.yaml").exists()
    assert (trained / "checkpoints" / "final.safetensors").exists()
    manifest = json.loads((trained / "manifest.json").read_text())
    assert manifest["command"] == "train"
    assert "metrics.csv" in manifest["files"]
    assert len(read_csv(trained / "metrics.csv")) == 2
    assert (trained / "events.jsonl").exists()


def test_seeded_training_is_byte_identical(runner, tiny_path, tmp_path, trained):
    again = tmp_path / "again"
    runner.invoke(cli, ["train", str(tiny_path), *QUICK, "--out", str(again)])
    assert (again / "metrics.csv").read_bytes() == (trained / "metrics.csv").read_bytes()


def test_default_run_directory(runner, tiny_path, tmp_path):
    result = runner.invoke(cli, ["train", str(tiny_path), *QUICK, "--set", "training.epochs=1"])
    assert result.exit_code == 0, result.output
    assert (tmp_path / "runs" / "train-tiny-seed0" / "metrics.csv").exists()


def test_offpolicy_training_from_cli(runner, tiny_path, tmp_path):
    out = tmp_path / "vdn"
    result = runner.invoke(cli, ["train", str(tiny_path), *QUICK, "--set", "training.algorithm=vdn",
                                 "--set", "baseline.hidden_sizes=[8]", "--set", "baseline.batch_size=4",
                                 "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "checkpoints" / "final.safetensors").exists()


def test_eval_trace_rewards_replay(runner, tiny_path, tmp_path, trained):
    out = tmp_path / "eval"
    result = runner.invoke(cli, ["eval", str(tiny_path), *QUICK, "--checkpoint",
                                 str(trained / "checkpoints" / "final.safetensors"),
                                 "--episodes", "2", "--trace", "--out", str(out)])
    assert result.exit_code == 0, result.output
    world = GridWorld(load_config(tiny_path).scenario)
    frame = read_csv(out / "trace_000.csv")
    assert len(frame) == world.horizon * world.n_uavs
    logged = frame.groupby("slot")["reward"].first().to_numpy()
    assert np.allclose(world.rewards_from_frame(frame), logged, atol=1e-9, rtol=0)
    reports = yaml.safe_load((out / "constraints.yaml").read_text())
    assert [r["passed"] for r in reports] == [True, True]
    assert len(read_csv(out / "aou_curve.csv")) == 2 * world.horizon


def test_eval_needs_checkpoint_unless_uniform(runner, tiny_path, tmp_path):
    assert runner.invoke(cli, ["eval", str(tiny_path), "--out", str(tmp_path / "e")]).exit_code == 1
    result = runner.invoke(cli, ["eval", str(tiny_path), "--mode", "uniform", "--episodes", "3",
                                 "--out", str(tmp_path / "u")])
    assert result.exit_code == 0, result.output
    assert len(read_csv(tmp_path / "u" / "eval_metrics.csv")) == 3


def test_checkpoint_shape_mismatch_is_a_runtime_error(runner, tiny_path, tmp_path, trained):
    result = runner.invoke(cli, ["eval", str(tiny_path), "--set", "training.hidden_sizes=[16]",
                                 "--checkpoint", str(trained / "checkpoints" / "final.safetensors"),
                                 "--out", str(tmp_path / "e")])
    assert result.exit_code == 2
    assert "CheckpointMismatchError" in result.output


def test_oracle_writes_solution(runner, tiny_path, tmp_path, trained):
    out = tmp_path / "oracle"
    result = runner.invoke(cli, ["oracle", str(tiny_path), *QUICK, "--out", str(out),
                                 "--checkpoint", str(trained / "checkpoints" / "final.safetensors")])
    assert result.exit_code == 0, result.output
    doc = yaml.safe_load((out / "oracle.yaml").read_text())
    assert len(doc["trajectory"]) == 5
    assert doc["return_agreement"] <= 1e-9
    assert doc["uniform_expected_return"] <= doc["optimal_return"]
    assert doc["gap"]["policy_return"] <= doc["optimal_return"] + 1e-12
    assert len(read_csv(out / "oracle_trace.csv")) == 5


def test_oracle_rejects_large_instances(runner, tiny_path, tmp_path):
    result = runner.invoke(cli, ["oracle", str(tiny_path), "--horizon", "7", "--out", str(tmp_path / "o")])
    assert result.exit_code == 2
    assert "horizon 7 exceeds" in result.output


def test_meta_train_writes_curve(runner, tiny_path, tmp_path):
    out = tmp_path / "meta"
    meta = ["--set", "meta={horizon_range: [3, 5], rate_min_range: [50000, 53000], num_tasks: 3, "
                     "tasks_per_step: 2, meta_epochs: 2, rollouts_per_task: 2, adapt_budget: 1, "
                     "held_out: {horizon: 5, rate_min: 53000}}"]
    result = runner.invoke(cli, ["meta-train", str(tiny_path), *QUICK, *meta, "--seed", "7", "--out", str(out)])
    assert result.exit_code == 0, result.output
    assert (out / "checkpoints" / "meta_init.safetensors").exists()
    assert len(read_csv(out / "meta_metrics.csv")) == 4
    assert len(read_csv(out / "adaptation_curve.csv")) == 4
    snapshot = yaml.safe_load((out / "config.yaml").read_text())
    assert snapshot["meta"]["num_tasks"] == 3 and snapshot["meta"]["seed"] == 7


def test_inverted_meta_range_is_a_config_error(runner, tiny_path):
    result = runner.invoke(cli, ["meta-train", str(tiny_path), "--set", "meta.horizon_range=[9, 3]"])
    assert result.exit_code == 1
    assert "meta.horizon_range" in result.output
