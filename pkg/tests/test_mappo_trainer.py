import numpy as np
import pytest

from config import TrainConfig
from env_core import GridWorld
from logger import EventLog, read_events, verify_chain
from mappo_trainer import (METRIC_COLUMNS, build_agent, collect_rollout, evaluate, load_agent, run_episode,
                           train)
from nn_core import Mlp
from oracle import OracleInstance, uniform_expectation
from persistence import write_csv
from seeding import make_rng


def test_rollout_fills_one_row_per_agent_and_slot(small, quick_train):
    world = GridWorld(small)
    agent = build_agent(world, quick_train)
    buf, m = collect_rollout(world, agent, make_rng(0, "env"), make_rng(0, "pol"), quick_train)
    assert len(buf) == small.n_uavs * small.horizon
    assert len(m.aou_curve) == small.horizon
    assert m.total_aou == sum(m.aou_curve)


def test_actor_only_sees_local_observations(small, quick_train):
    world = GridWorld(small)
    agent = build_agent(world, quick_train)
    assert agent.actor.in_dim == world.obs_dim
    assert agent.critic.in_dim == world.global_dim
    seen = []

    def act(obs):
        seen.append(obs.shape)
        return np.zeros(world.n_uavs, dtype=np.int64), np.zeros(world.n_uavs)

    run_episode(world, agent.actor, make_rng(0, "env"), make_rng(0, "pol"), act=act)
    assert seen == [(small.n_uavs, world.obs_dim)] * small.horizon


def test_argmax_episodes_are_deterministic(small, quick_train):
    world = GridWorld(small)
    agent = build_agent(world, quick_train)
    runs = [run_episode(world, agent.actor, make_rng(1, "env"), make_rng(k, "pol"), "argmax")[0] for k in (1, 2)]
    assert (runs[0].actions == runs[1].actions).all()
    assert (runs[0].rewards == runs[1].rewards).all()


def test_single_epoch_single_rollout(tiny, quick_train):
    cfg = quick_train.model_copy(update={"epochs": 1, "rollouts_per_epoch": 1})
    result = train(tiny, cfg)
    assert len(result.metrics) == 1
    assert list(result.metrics.columns) == METRIC_COLUMNS
    assert result.metrics["epoch"].tolist() == [1]
    assert np.isfinite(result.metrics[["actor_loss", "critic_loss", "entropy"]].to_numpy()).all()


def test_horizon_override(tiny, quick_train):
    cfg = quick_train.model_copy(update={"epochs": 1, "horizon": 3})
    result = train(tiny, cfg)
    ev = evaluate(result.agent.actor, tiny.with_task(horizon=3), 1)
    assert len(ev.aou_curve) == 3


def test_seeded_runs_write_identical_metrics(tiny, quick_train, tmp_path):
    paths = []
    for name in ("a", "b"):
        result = train(tiny, quick_train)
        paths.append(write_csv(result.metrics, tmp_path / name / "metrics.csv"))
    assert paths[0].read_bytes() == paths[1].read_bytes()
    other = train(tiny, quick_train.model_copy(update={"seed": 6}))
    assert not other.metrics.equals(train(tiny, quick_train).metrics)


def test_training_events_and_checkpoints(tiny, quick_train, tmp_path):
    cfg = quick_train.model_copy(update={"checkpoint_every": 1, "eval_every": 2, "eval_episodes": 2})
    log = tmp_path / "events.jsonl"
    result = train(tiny, cfg, out_dir=tmp_path / "run", events=EventLog(log))
    names = [p.name for p in result.checkpoints]
    assert names == ["epoch_00001.safetensors", "epoch_00002.safetensors", "final.safetensors"]
    actions = [e["action"] for e in read_events(log)]
    assert actions[0] == "run_start" and actions[-1] == "run_end"
    assert actions.count("epoch") == 2
    assert verify_chain(log) == (True, "OK")
    assert result.evals["epoch"].tolist() == [2]
    restored = load_agent(result.checkpoints[-1], GridWorld(tiny), cfg)
    assert restored.digest() == result.agent.digest()


def test_eval_metrics_match_traces(small, quick_train):
    world = GridWorld(small)
    agent = build_agent(world, quick_train)
    ev = evaluate(agent.actor, world, 3, mode="sample", seed=4)
    assert len(ev.episodes) == 3 and len(ev.traces) == 3
    for k, trace in enumerate(ev.traces):
        assert ev.episodes["reward"][k] == pytest.approx(trace.total_reward, abs=1e-12)
        assert ev.episodes["reward"][k] == pytest.approx(world.recompute_rewards(trace).sum(), abs=1e-9)
        assert ev.episodes["total_aou"][k] == sum(int(r.aou.sum()) for r in trace.records)
    summary = ev.summary()
    assert summary["mean_reward"] == pytest.approx(ev.episodes["reward"].mean())
    assert summary["constraints_passed"] is True


def test_eval_needs_episodes(tiny, quick_train):
    agent = build_agent(GridWorld(tiny), quick_train)
    with pytest.raises(ValueError):
        evaluate(agent.actor, tiny, 0)


def test_uniform_policy_mean_matches_exact_expectation(tiny):
    world = GridWorld(tiny)
    actor = Mlp([world.obs_dim, 5])
    returns = np.array([
        run_episode(world, actor, make_rng(0, "env"), make_rng(k, "uniform"), "uniform")[1].reward
        for k in range(2000)
    ])
    exact = uniform_expectation(OracleInstance(tiny))
    assert abs(returns.mean() - exact) <= 4 * returns.std() / np.sqrt(len(returns)) + 1e-12


def test_training_config_is_honoured(tiny):
    cfg = TrainConfig(epochs=1, rollouts_per_epoch=3, hidden_sizes=[4, 4], seed=2)
    agent = train(tiny, cfg).agent
    assert [layer.out_features for layer in agent.actor.layers] == [4, 4, 5]


def test_mean_reward_is_recoverable_from_the_metric_columns(small, quick_train):
    world = GridWorld(small)
    w = small.weights
    m = train(small, quick_train.model_copy(update={"epochs": 3})).metrics
    rebuilt = (w.data * m["data_collected_bits"] / (world.slot_duration * world.rate_norm)
               - w.aou * m["total_aou"] / world.aou_norm
               - w.terminal * m["terminal_distance"] / world.dist_norm)
    assert np.allclose(m["mean_reward"], rebuilt, rtol=0, atol=1e-9)
