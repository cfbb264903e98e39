# app/baselines.py
"""Off-policy value-decomposition comparators.

Per-agent Q networks (shared weights, agent one-hot in the observation)
trained by TD on the team reward through a mixer: a plain sum (VDN style)
or a state-conditioned mixer with non-negative weights (QMIX style).
"""
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from torch import nn
from torch.nn import functional as F
from tqdm import tqdm

from config import BaselineConfig, ScenarioConfig, TrainConfig
from env_core import N_ACTIONS, GridWorld
from errors import NonFiniteError
from logger import EventLog
from mappo_trainer import METRIC_COLUMNS, epoch_row, run_episode
from nn_core import Mlp, as_tensor, backward, clone, make_optimizer, optimizer_step, save_params
from seeding import make_rng, torch_generator


def q_values(agent_net: Mlp, local_state) -> torch.Tensor:
    return agent_net(as_tensor(local_state))


def greedy(q) -> np.ndarray:
    """Lowest action index wins ties."""
    return np.asarray(q).argmax(axis=-1)


# ---------- Replay ----------

class ReplayBuffer:
    """Fixed-capacity FIFO ring of joint transitions, sampled uniformly."""

    def __init__(self, capacity: int, n_agents: int, obs_dim: int, state_dim: int):
        self.capacity = capacity
        self.obs = np.zeros((capacity, n_agents, obs_dim))
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, n_agents), dtype=np.int64)
        self.rewards = np.zeros(capacity)
        self.next_obs = np.zeros((capacity, n_agents, obs_dim))
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self.ptr = 0
        self.size = 0

    def add(self, obs, state, actions, reward, next_obs, next_state, done) -> None:
        i = self.ptr
        self.obs[i], self.states[i], self.actions[i] = obs, state, actions
        self.rewards[i], self.next_obs[i], self.next_states[i] = reward, next_obs, next_state
        self.dones[i] = float(done)
        self.ptr = (self.ptr + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __len__(self) -> int:
        return self.size

    def sample(self, batch_size: int, rng: np.random.Generator) -> dict[str, torch.Tensor]:
        if self.size == 0:
            raise ValueError("replay buffer is empty")
        idx = rng.integers(0, self.size, size=batch_size)
        return {
            "obs": as_tensor(self.obs[idx]), "states": as_tensor(self.states[idx]),
            "actions": torch.as_tensor(self.actions[idx]), "rewards": as_tensor(self.rewards[idx]),
            "next_obs": as_tensor(self.next_obs[idx]), "next_states": as_tensor(self.next_states[idx]),
            "dones": as_tensor(self.dones[idx]),
        }


# ---------- Mixers ----------

class AdditiveMixer(nn.Module):
    def forward(self, agent_qs: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        return agent_qs.sum(dim=-1)


MIXER_ACTIVATIONS = {"elu": F.elu, "identity": lambda x: x}


def monotonic_combine(agent_qs, w1, b1, w2, v, activation: str = "elu") -> torch.Tensor:
    """agent_qs (N, U), w1 (N, U, E) >= 0, b1 (N, E), w2 (N, E) >= 0, v (N,).

    With the identity activation, w1 = I, w2 = 1 and zero biases the result is the plain sum.
    """
    hidden = MIXER_ACTIVATIONS[activation](torch.einsum("nu,nue->ne", agent_qs, w1) + b1)
    return (hidden * w2).sum(dim=-1) + v


class MonotonicMixer(nn.Module):
    """Hypernetworks map the global state to absolute-valued mixing weights."""

    def __init__(self, n_agents: int, state_dim: int, embed: int, hyper_hidden: int,
                 generator: torch.Generator | None = None, activation: str = "elu"):
        super().__init__()
        self.n_agents, self.embed = n_agents, embed
        self.activation = activation
        self.hyper_w1 = Mlp([state_dim, hyper_hidden, n_agents * embed], generator=generator)
        self.hyper_b1 = Mlp([state_dim, embed], generator=generator)
        self.hyper_w2 = Mlp([state_dim, hyper_hidden, embed], generator=generator)
        self.state_value = Mlp([state_dim, embed, 1], generator=generator)

    def forward(self, agent_qs: torch.Tensor, states: torch.Tensor) -> torch.Tensor:
        w1 = self.hyper_w1(states).abs().view(-1, self.n_agents, self.embed)
        w2 = self.hyper_w2(states).abs()
        return monotonic_combine(agent_qs, w1, self.hyper_b1(states), w2, self.state_value(states).squeeze(-1),
                                 self.activation)


def mix(agent_qs, states, mixer: nn.Module) -> torch.Tensor:
    agent_qs = as_tensor(agent_qs)
    states = as_tensor(states)
    squeeze = agent_qs.dim() == 1
    if squeeze:
        agent_qs, states = agent_qs.unsqueeze(0), states.unsqueeze(0)
    out = mixer(agent_qs, states)
    return out.squeeze(0) if squeeze else out


# ---------- Learner ----------

def egreedy_entropy(eps: float, n_actions: int = N_ACTIONS) -> float:
    p_other = eps / n_actions
    p_best = 1.0 - eps + p_other
    terms = [p_best] + [p_other] * (n_actions - 1)
    return float(-sum(p * np.log(p) for p in terms if p > 0))


class ValueMixingLearner:
    def __init__(self, world: GridWorld, cfg: BaselineConfig, mixer_mode: str, total_steps: int):
        self.cfg = cfg
        self.total_steps = max(total_steps, 1)
        self.agent_net = Mlp([world.obs_dim, *cfg.hidden_sizes, N_ACTIONS],
                             generator=torch_generator(cfg.seed, "offpolicy/agent_init"))
        if mixer_mode == "monotonic":
            self.mixer = MonotonicMixer(world.n_uavs, world.global_dim, cfg.mixing_embed, cfg.hypernet_hidden,
                                        torch_generator(cfg.seed, "offpolicy/mixer_init"), cfg.mixer_activation)
        else:
            self.mixer = AdditiveMixer()
        self.target_agent = clone(self.agent_net)
        self.target_mixer = clone(self.mixer)
        params = nn.ModuleList([self.agent_net, self.mixer])
        self.optimizer = make_optimizer(params, cfg.lr)
        self.updates = 0

    def epsilon(self, step: int) -> float:
        c = self.cfg
        if c.epsilon_fixed is not None:
            return c.epsilon_fixed
        frac = min(step / (c.epsilon_decay_fraction * self.total_steps), 1.0)
        return c.epsilon_start + frac * (c.epsilon_end - c.epsilon_start)

    def act(self, obs: np.ndarray, eps: float, rng: np.random.Generator) -> np.ndarray:
        with torch.no_grad():
            best = greedy(q_values(self.agent_net, obs).numpy())
        explore = rng.random(len(obs)) < eps
        random_actions = rng.integers(0, N_ACTIONS, size=len(obs))
        return np.where(explore, random_actions, best).astype(np.int64)

    def td_loss(self, batch: dict[str, torch.Tensor]) -> torch.Tensor:
        q = self.agent_net(batch["obs"])
        chosen = q.gather(-1, batch["actions"].unsqueeze(-1)).squeeze(-1)
        q_team = self.mixer(chosen, batch["states"])
        with torch.no_grad():
            next_best = self.target_agent(batch["next_obs"]).max(dim=-1).values
            target = batch["rewards"] + self.cfg.gamma * (1.0 - batch["dones"]) * \
                self.target_mixer(next_best, batch["next_states"])
        return F.mse_loss(q_team, target)

    def learn(self, batch: dict[str, torch.Tensor]) -> float:
        loss = self.td_loss(batch)
        if not torch.isfinite(loss):
            raise NonFiniteError(f"non-finite TD loss at update {self.updates}")
        self.optimizer.zero_grad()
        backward(loss)
        optimizer_step(self.optimizer, self.cfg.max_grad_norm)
        self.updates += 1
        if self.updates % self.cfg.target_update_period == 0:
            self.sync_targets()
        return float(loss.detach())

    def sync_targets(self) -> None:
        self.target_agent.load_state_dict(self.agent_net.state_dict())
        self.target_mixer.load_state_dict(self.mixer.state_dict())


@dataclass
class OffPolicyResult:
    learner: ValueMixingLearner
    metrics: pd.DataFrame
    checkpoint: Path | None = None


def train_offpolicy(scenario: ScenarioConfig, cfg: TrainConfig, base: BaselineConfig, algorithm: str,
                    out_dir=None, events: EventLog | None = None, progress: bool = False) -> OffPolicyResult:
    """Budget = training epochs x rollouts per epoch episodes; one TD update per collected step."""
    events = events or EventLog()
    if cfg.horizon is not None:
        scenario = scenario.with_task(horizon=cfg.horizon)
    world = GridWorld(scenario)
    T = world.horizon
    learner = ValueMixingLearner(world, base, base.resolved_mixer(algorithm),
                                 cfg.epochs * cfg.rollouts_per_epoch * T)
    replay = ReplayBuffer(base.buffer_capacity, world.n_uavs, world.obs_dim, world.global_dim)
    zero_obs, zero_state = np.zeros((world.n_uavs, world.obs_dim)), np.zeros(world.global_dim)
    rows, step = [], 0

    events("run_start", algorithm=algorithm, epochs=cfg.epochs, rollouts=cfg.rollouts_per_epoch,
           horizon=T, seed=base.seed)
    for epoch in tqdm(range(1, cfg.epochs + 1), desc=algorithm, disable=not progress):
        episodes, losses, entropies = [], [], []
        for b in range(cfg.rollouts_per_epoch):
            eps = learner.epsilon(step)
            policy_rng = make_rng(base.seed, f"offpolicy/sampling/{epoch}/{b}")
            act = lambda obs: (learner.act(obs, eps, policy_rng), np.zeros(world.n_uavs))
            traj, m = run_episode(world, None, make_rng(base.seed, f"offpolicy/env/{epoch}/{b}"),
                                  policy_rng, include_aou=True, act=act)
            episodes.append(m)
            entropies.append(egreedy_entropy(eps))
            for t in range(T):
                last = t == T - 1
                replay.add(traj.obs[t], traj.global_states[t], traj.actions[t], traj.rewards[t],
                           zero_obs if last else traj.obs[t + 1],
                           zero_state if last else traj.global_states[t + 1], last)
            sample_rng = make_rng(base.seed, f"offpolicy/replay/{epoch}/{b}")
            for _ in range(T):
                if len(replay) >= base.batch_size:
                    try:
                        losses.append(learner.learn(replay.sample(base.batch_size, sample_rng)))
                    except NonFiniteError as e:
                        events("run_abort", epoch=epoch, error=str(e))
                        raise
            step += T
        row = epoch_row(epoch, episodes, None)
        row.update(entropy=float(np.mean(entropies)),
                   critic_loss=float(np.mean(losses)) if losses else np.nan)
        rows.append(row)
        events("epoch", epoch=epoch, mean_reward=row["mean_reward"], total_aou=row["total_aou"],
               epsilon=learner.epsilon(step))

    checkpoint = None
    if out_dir:
        checkpoint = save_params(Path(out_dir) / "checkpoints" / "final.safetensors",
                                 {"agent": learner.agent_net, "mixer": learner.mixer},
                                 {"algorithm": algorithm, "epoch": cfg.epochs})
        events("checkpoint", epoch=cfg.epochs, path=str(checkpoint))
    metrics = pd.DataFrame(rows, columns=METRIC_COLUMNS)
    events("run_end", algorithm=algorithm, final_mean_reward=float(metrics["mean_reward"].iloc[-1]))
    return OffPolicyResult(learner, metrics, checkpoint)
