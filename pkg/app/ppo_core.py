# app/ppo_core.py
"""PPO pieces shared by MAPPO and the meta-trainer.

One shared actor acts on each UAV's local observation (agent one-hot
appended); one centralized critic scores the global state. The team reward
is shared, so GAE runs once per timestep and the advantage is replicated
into every agent's row.
"""
from dataclasses import dataclass, field

import numpy as np
import torch
from torch.distributions import Categorical

from config import PpoHyper
from errors import NonFiniteError, ShapeError
from nn_core import Mlp, as_tensor, backward, clone, make_optimizer, optimizer_step, param_digest
from seeding import torch_generator

N_ACTIONS = 5
ADV_STD_FLOOR = 1e-8


# ---------- Policy ----------

def policy_distribution(actor: Mlp, local_state) -> torch.Tensor:
    return torch.softmax(actor(as_tensor(local_state)), dim=-1)


def inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Row-wise categorical draw from uniforms u in [0, 1)."""
    cdf = np.cumsum(probs, axis=1)
    cdf /= cdf[:, -1:]  # last entry exactly 1, so every u lands in some bin
    return (cdf > u[:, None]).argmax(axis=1)


def select_actions(actor: Mlp, obs: np.ndarray, mode: str, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """Joint action for all UAVs; returns (actions, log-probs under the actor)."""
    with torch.no_grad():
        probs = policy_distribution(actor, obs).numpy()
    if mode == "sample":
        actions = inverse_cdf(probs, rng.random(len(probs)))
    elif mode == "argmax":
        actions = probs.argmax(axis=1)
    elif mode == "uniform":
        actions = rng.integers(0, N_ACTIONS, size=len(probs))
    else:
        raise ValueError(f"unknown action mode {mode!r}; expected sample, argmax or uniform")
    logp = np.log(probs[np.arange(len(probs)), actions])
    return actions.astype(np.int64), logp


# ---------- Advantages ----------

def gae(rewards, values, bootstrap_value: float, gamma: float, lam: float) -> tuple[np.ndarray, np.ndarray]:
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    if len(rewards) == 0:
        raise ValueError("gae needs at least one step")
    if rewards.shape != values.shape:
        raise ShapeError(f"rewards {rewards.shape} and values {values.shape} differ")
    adv = np.zeros_like(rewards)
    running = 0.0
    for t in reversed(range(len(rewards))):
        next_v = bootstrap_value if t == len(rewards) - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_v - values[t]
        running = delta + gamma * lam * running
        adv[t] = running
    return adv, adv + values


# ---------- Buffer ----------

@dataclass
class Batch:
    obs: torch.Tensor
    global_states: torch.Tensor
    actions: torch.Tensor
    logp_old: torch.Tensor
    values_old: torch.Tensor
    advantages: torch.Tensor
    returns: torch.Tensor

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx: torch.Tensor) -> "Batch":
        return Batch(*(getattr(self, f)[idx] for f in self.__dataclass_fields__))


@dataclass
class RolloutBuffer:
    """Per-(slot, agent) rows, slot-major. Cleared at the start of each epoch."""
    obs: list[np.ndarray] = field(default_factory=list)
    global_states: list[np.ndarray] = field(default_factory=list)
    actions: list[np.ndarray] = field(default_factory=list)
    logp: list[np.ndarray] = field(default_factory=list)
    values: list[np.ndarray] = field(default_factory=list)
    advantages: list[np.ndarray] = field(default_factory=list)
    returns: list[np.ndarray] = field(default_factory=list)
    rewards: list[np.ndarray] = field(default_factory=list)

    def add_trajectory(self, obs, global_states, actions, logp, rewards, values,
                       gamma: float, lam: float, bootstrap_value: float = 0.0) -> None:
        """obs (T, U, d), global_states (T, g), actions/logp (T, U), rewards/values (T,)."""
        obs = np.asarray(obs, dtype=np.float64)
        n_steps, n_agents = obs.shape[:2]
        adv, ret = gae(rewards, values, bootstrap_value, gamma, lam)
        rep = lambda a: np.repeat(np.asarray(a, dtype=np.float64), n_agents, axis=0)
        self.obs.append(obs.reshape(n_steps * n_agents, -1))
        self.global_states.append(rep(global_states))
        self.actions.append(np.asarray(actions, dtype=np.int64).reshape(-1))
        self.logp.append(np.asarray(logp, dtype=np.float64).reshape(-1))
        self.values.append(rep(values))
        self.advantages.append(rep(adv))
        self.returns.append(rep(ret))
        self.rewards.append(rep(rewards))

    def __len__(self) -> int:
        return int(sum(len(a) for a in self.actions))

    def clear(self) -> None:
        for f in self.__dataclass_fields__:
            getattr(self, f).clear()

    def tensors(self, normalize_advantages: bool = True) -> Batch:
        if len(self) == 0:
            raise ValueError("rollout buffer is empty")
        adv = np.concatenate(self.advantages)
        if not np.isfinite(adv).all():
            raise NonFiniteError("non-finite advantages in rollout buffer")
        if normalize_advantages:
            adv = (adv - adv.mean()) / max(adv.std(), ADV_STD_FLOOR)
        return Batch(
            obs=as_tensor(np.concatenate(self.obs)),
            global_states=as_tensor(np.concatenate(self.global_states)),
            actions=torch.as_tensor(np.concatenate(self.actions)),
            logp_old=as_tensor(np.concatenate(self.logp)),
            values_old=as_tensor(np.concatenate(self.values)),
            advantages=as_tensor(adv),
            returns=as_tensor(np.concatenate(self.returns)),
        )


# ---------- Losses ----------

def actor_loss(actor: Mlp, batch: Batch, hyper: PpoHyper) -> tuple[torch.Tensor, dict]:
    """Clipped surrogate plus entropy bonus; a quantity to maximize."""
    dist = Categorical(logits=actor(batch.obs))
    ratio = torch.exp(dist.log_prob(batch.actions) - batch.logp_old)
    if not torch.isfinite(ratio).all():
        raise NonFiniteError("non-finite probability ratio; buffer is stale for this actor")
    clipped = torch.clamp(ratio, 1.0 - hyper.clip, 1.0 + hyper.clip)
    surrogate = torch.min(ratio * batch.advantages, clipped * batch.advantages).mean()
    entropy = dist.entropy().mean()
    stats = {
        "entropy": float(entropy.detach()),
        "clip_fraction": float(((ratio.detach() - 1.0).abs() > hyper.clip).double().mean()),
    }
    return surrogate + hyper.entropy_coef * entropy, stats


def critic_loss(critic: Mlp, batch: Batch, hyper: PpoHyper) -> torch.Tensor:
    v = critic(batch.global_states).squeeze(-1)
    v_clipped = batch.values_old + torch.clamp(v - batch.values_old, -hyper.value_clip, hyper.value_clip)
    return torch.max((v - batch.returns) ** 2, (v_clipped - batch.returns) ** 2).mean()


# ---------- Agent ----------

@dataclass
class ActorCritic:
    actor: Mlp
    critic: Mlp

    @classmethod
    def build(cls, obs_dim: int, global_dim: int, hidden_sizes: list[int],
              output_gain: float, seed: int) -> "ActorCritic":
        actor = Mlp([obs_dim, *hidden_sizes, N_ACTIONS], output_gain, torch_generator(seed, "actor_init"))
        critic = Mlp([global_dim, *hidden_sizes, 1], 1.0, torch_generator(seed, "critic_init"))
        return cls(actor, critic)

    def clone(self) -> "ActorCritic":
        return ActorCritic(clone(self.actor), clone(self.critic))

    def digest(self) -> str:
        return param_digest(self.actor, self.critic)

    def value(self, global_state) -> np.ndarray:
        with torch.no_grad():
            return self.critic(as_tensor(global_state)).squeeze(-1).numpy()


@dataclass
class PpoOptimizers:
    actor: torch.optim.Adam
    critic: torch.optim.Adam

    @classmethod
    def for_agent(cls, agent: ActorCritic, hyper: PpoHyper,
                  actor_lr: float | None = None, critic_lr: float | None = None) -> "PpoOptimizers":
        lr_a = hyper.actor_lr if actor_lr is None else actor_lr
        lr_c = hyper.critic_lr if critic_lr is None else critic_lr
        return cls(make_optimizer(agent.actor, lr_a, hyper.betas, hyper.adam_eps),
                   make_optimizer(agent.critic, lr_c, hyper.betas, hyper.adam_eps))


@dataclass
class UpdateStats:
    actor_loss: float
    critic_loss: float
    entropy: float
    clip_fraction: float
    minibatches: int


def update(agent: ActorCritic, buffer: RolloutBuffer, hyper: PpoHyper,
           generator: torch.Generator, optimizers: PpoOptimizers | None = None) -> UpdateStats:
    """Shuffled-minibatch PPO epochs on both networks."""
    batch = buffer.tensors(hyper.normalize_advantages)
    opt = optimizers or PpoOptimizers.for_agent(agent, hyper)
    n = len(batch)
    sums = {"actor_loss": 0.0, "critic_loss": 0.0, "entropy": 0.0, "clip_fraction": 0.0}
    count = 0
    for _ in range(hyper.epochs):
        perm = torch.randperm(n, generator=generator)
        for start in range(0, n, hyper.minibatch_size):
            mb = batch.take(perm[start:start + hyper.minibatch_size])

            opt.actor.zero_grad()
            objective, stats = actor_loss(agent.actor, mb, hyper)
            backward(-objective)
            optimizer_step(opt.actor, hyper.max_grad_norm)

            opt.critic.zero_grad()
            c_loss = critic_loss(agent.critic, mb, hyper)
            if not torch.isfinite(c_loss):
                raise NonFiniteError("non-finite critic loss")
            backward(c_loss)
            optimizer_step(opt.critic, hyper.max_grad_norm)

            sums["actor_loss"] += float(objective.detach())
            sums["critic_loss"] += float(c_loss.detach())
            sums["entropy"] += stats["entropy"]
            sums["clip_fraction"] += stats["clip_fraction"]
            count += 1
    return UpdateStats(**{k: v / count for k, v in sums.items()}, minibatches=count)


def full_batch_losses(agent: ActorCritic, buffer: RolloutBuffer, hyper: PpoHyper) -> tuple[torch.Tensor, torch.Tensor]:
    """(surrogate objective, critic loss) over the whole buffer, graph attached."""
    batch = buffer.tensors(hyper.normalize_advantages)
    objective, _ = actor_loss(agent.actor, batch, hyper)
    return objective, critic_loss(agent.critic, batch, hyper)
