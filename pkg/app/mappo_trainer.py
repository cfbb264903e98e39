# app/mappo_trainer.py
"""Centralized-training / decentralized-execution PPO over the grid world.

Each epoch collects B episodes with the shared actor acting on local
observations only, runs GAE against the centralized critic's values, then
one PPO update. Metrics CSVs carry no timestamps so seeded repeats are
byte-identical.
"""
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from tqdm import tqdm

from config import ScenarioConfig, TrainConfig
from env_core import EpisodeTrace, GridWorld, check_constraints
from errors import NonFiniteError
from logger import EventLog
from nn_core import Mlp, load_into, load_params, save_params
from ppo_core import ActorCritic, PpoOptimizers, RolloutBuffer, UpdateStats, select_actions, update
from seeding import make_rng, torch_generator

METRIC_COLUMNS = [
    "epoch", "mean_reward", "total_aou", "data_collected_bits", "devices_served",
    "entropy", "clip_fraction", "actor_loss", "critic_loss",
    "communications", "terminal_distance",
]


@dataclass
class EpisodeMetrics:
    reward: float = 0.0
    total_aou: float = 0.0           # sum over slots of system AoU
    data_collected_bits: float = 0.0
    devices_served: int = 0          # distinct devices served at least once
    communications: int = 0
    terminal_distance: float = 0.0   # meters, at slot T
    aou_curve: list[int] = field(default_factory=list)

    def row(self) -> dict:
        d = asdict(self)
        d.pop("aou_curve")
        return d


@dataclass
class Trajectory:
    obs: np.ndarray
    global_states: np.ndarray
    actions: np.ndarray
    logp: np.ndarray
    rewards: np.ndarray
    values: np.ndarray


def run_episode(world: GridWorld, actor: Mlp, env_rng: np.random.Generator, policy_rng: np.random.Generator,
                mode: str = "sample", agent: ActorCritic | None = None, include_aou: bool = True,
                trace: EpisodeTrace | None = None, act=None) -> tuple[Trajectory, EpisodeMetrics]:
    """One full episode. The actor only ever sees per-UAV observations.

    `act(obs) -> (actions, logp)` replaces the actor when given.
    """
    state, obs = world.reset(env_rng)
    if trace is not None:
        trace.initial_cells = state.uav_cells.copy()
    T = world.horizon
    traj = Trajectory(
        obs=np.zeros((T, world.n_uavs, world.obs_dim)),
        global_states=np.zeros((T, world.global_dim)),
        actions=np.zeros((T, world.n_uavs), dtype=np.int64),
        logp=np.zeros((T, world.n_uavs)),
        rewards=np.zeros(T),
        values=np.zeros(T),
    )
    m = EpisodeMetrics()
    for t in range(T):
        gs = world.global_state(state, include_aou)
        if act is None:
            actions, logp = select_actions(actor, obs, mode, policy_rng)
        else:
            actions, logp = act(obs)
        res = world.step(state, actions, env_rng)
        traj.obs[t], traj.global_states[t] = obs, gs
        traj.actions[t], traj.logp[t] = actions, logp
        traj.rewards[t] = res.reward
        if agent is not None:
            traj.values[t] = agent.value(gs)
        if trace is not None:
            trace.append(res)
        system_aou = int(res.next_state.aou.sum())
        m.aou_curve.append(system_aou)
        m.total_aou += system_aou
        state, obs = res.next_state, res.per_uav_obs
    m.reward = float(traj.rewards.sum())
    m.data_collected_bits = float(state.cum_data)
    m.devices_served = int(state.served_ever.sum())
    m.communications = int(state.communications)
    m.terminal_distance = float(world.terminal_distances(state.uav_cells).sum())
    return traj, m


def collect_rollout(world: GridWorld, agent: ActorCritic, env_rng: np.random.Generator,
                    policy_rng: np.random.Generator, cfg: TrainConfig,
                    buffer: RolloutBuffer | None = None, mode: str = "sample") -> tuple[RolloutBuffer, EpisodeMetrics]:
    buffer = buffer if buffer is not None else RolloutBuffer()
    traj, metrics = run_episode(world, agent.actor, env_rng, policy_rng, mode,
                                agent=agent, include_aou=cfg.critic_sees_aou)
    buffer.add_trajectory(traj.obs, traj.global_states, traj.actions, traj.logp,
                          traj.rewards, traj.values, cfg.ppo.gamma, cfg.ppo.gae_lambda)
    return buffer, metrics


def build_agent(world: GridWorld, cfg: TrainConfig) -> ActorCritic:
    return ActorCritic.build(world.obs_dim, world.global_dim, cfg.hidden_sizes, cfg.actor_output_gain, cfg.seed)


def save_agent(path, agent: ActorCritic, **metadata) -> Path:
    return save_params(path, {"actor": agent.actor, "critic": agent.critic}, metadata)


def load_agent(path, world: GridWorld, cfg: TrainConfig) -> ActorCritic:
    agent = build_agent(world, cfg)
    tensors = load_params(path)
    load_into(agent.actor, tensors, "actor")
    load_into(agent.critic, tensors, "critic")
    return agent


def epoch_row(epoch: int, episodes: list[EpisodeMetrics], stats: UpdateStats | None) -> dict:
    frame = pd.DataFrame([e.row() for e in episodes])
    row = {
        "epoch": epoch,
        "mean_reward": frame["reward"].mean(),
        "total_aou": frame["total_aou"].mean(),
        "data_collected_bits": frame["data_collected_bits"].mean(),
        "devices_served": frame["devices_served"].mean(),
        "entropy": np.nan, "clip_fraction": np.nan, "actor_loss": np.nan, "critic_loss": np.nan,
        "communications": frame["communications"].mean(),
        "terminal_distance": frame["terminal_distance"].mean(),
    }
    if stats is not None:
        row.update(entropy=stats.entropy, clip_fraction=stats.clip_fraction,
                   actor_loss=stats.actor_loss, critic_loss=stats.critic_loss)
    return row


# ---------- Training ----------

@dataclass
class TrainResult:
    agent: ActorCritic
    metrics: pd.DataFrame
    evals: pd.DataFrame
    checkpoints: list[Path] = field(default_factory=list)


def train(scenario: ScenarioConfig, cfg: TrainConfig, out_dir=None,
          events: EventLog | None = None, progress: bool = False,
          agent: ActorCritic | None = None) -> TrainResult:
    events = events or EventLog()
    if cfg.horizon is not None:
        scenario = scenario.with_task(horizon=cfg.horizon)
    world = GridWorld(scenario)
    agent = agent or build_agent(world, cfg)
    opt = PpoOptimizers.for_agent(agent, cfg.ppo)
    out = Path(out_dir) if out_dir else None
    rows, eval_rows, checkpoints = [], [], []

    events("run_start", algorithm="mappo", epochs=cfg.epochs, rollouts=cfg.rollouts_per_epoch,
           horizon=scenario.horizon, seed=cfg.seed)
    for epoch in tqdm(range(1, cfg.epochs + 1), desc="mappo", disable=not progress):
        buffer = RolloutBuffer()
        episodes = []
        for b in range(cfg.rollouts_per_epoch):
            _, m = collect_rollout(world, agent, make_rng(cfg.seed, f"env/{epoch}/{b}"),
                                   make_rng(cfg.seed, f"sampling/{epoch}/{b}"), cfg, buffer)
            episodes.append(m)
        try:
            stats = update(agent, buffer, cfg.ppo, torch_generator(cfg.seed, f"minibatch/{epoch}"), opt)
        except NonFiniteError as e:
            events("run_abort", epoch=epoch, error=str(e))
            raise NonFiniteError(f"epoch {epoch}: {e}") from e
        row = epoch_row(epoch, episodes, stats)
        rows.append(row)
        events("epoch", epoch=epoch, mean_reward=row["mean_reward"], total_aou=row["total_aou"])

        if cfg.eval_every and epoch % cfg.eval_every == 0:
            ev = evaluate(agent.actor, scenario, cfg.eval_episodes, "argmax", seed=cfg.seed)
            eval_rows.append({"epoch": epoch, **ev.summary()})
        if out and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
            path = save_agent(out / "checkpoints" / f"epoch_{epoch:05d}.safetensors", agent, epoch=epoch)
            checkpoints.append(path)
            events("checkpoint", epoch=epoch, path=str(path), digest=agent.digest())

    if out:
        path = save_agent(out / "checkpoints" / "final.safetensors", agent, epoch=cfg.epochs)
        checkpoints.append(path)
        events("checkpoint", epoch=cfg.epochs, path=str(path), digest=agent.digest())
    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    events("run_end", algorithm="mappo", final_mean_reward=float(metrics["mean_reward"].iloc[-1]))
    return TrainResult(agent, metrics, pd.DataFrame(eval_rows), checkpoints)


# ---------- Evaluation ----------

@dataclass
class EvalResult:
    episodes: pd.DataFrame
    reports: list
    traces: list[EpisodeTrace]
    aou_curve: pd.DataFrame

    def summary(self) -> dict:
        cols = ["reward", "total_aou", "data_collected_bits", "devices_served", "communications", "terminal_distance"]
        out = {f"mean_{c}": float(self.episodes[c].mean()) for c in cols}
        out["constraints_passed"] = bool(self.episodes["constraints_passed"].all())
        return out


def evaluate(actor: Mlp, scenario: ScenarioConfig | GridWorld, episodes: int,
             mode: str = "argmax", seed: int = 0) -> EvalResult:
    """Frozen-policy rollouts with a constraint audit of every episode."""
    if episodes < 1:
        raise ValueError(f"evaluate needs at least one episode, got {episodes}")
    world = scenario if isinstance(scenario, GridWorld) else GridWorld(scenario)
    rows, reports, traces, curve = [], [], [], []
    for k in range(episodes):
        trace = EpisodeTrace(initial_cells=world.cds_cells.copy())
        _, m = run_episode(world, actor, make_rng(seed, f"eval/{k}"), make_rng(seed, f"eval-sampling/{k}"),
                           mode, trace=trace)
        report = check_constraints(trace, world)
        rows.append({"episode": k, **m.row(), "constraints_passed": report.passed})
        reports.append(report)
        traces.append(trace)
        curve.extend({"episode": k, "slot": t + 1, "system_aou": a} for t, a in enumerate(m.aou_curve))
    return EvalResult(pd.DataFrame(rows), reports, traces, pd.DataFrame(curve))
