# app/meta_trainer.py
"""Meta-training of the actor/critic initialisation across tasks (T, R_min).

Per task: collect rollouts under the meta-policy, adapt a copy with PPO,
collect fresh rollouts under the adapted copy and score the PPO losses
there. The meta-update is first-order: the post-adaptation gradients taken
at the adapted parameters are summed onto the meta-parameters. The reptile
mode instead feeds (theta - theta') as the meta-gradient.
"""
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
import torch
from tqdm import tqdm

from config import MetaConfig, ScenarioConfig, TrainConfig
from env_core import GridWorld
from errors import NonFiniteError
from logger import EventLog
from mappo_trainer import build_agent, collect_rollout, save_agent
from nn_core import backward, optimizer_step
from ppo_core import ActorCritic, PpoOptimizers, RolloutBuffer, full_batch_losses, update
from seeding import make_rng, torch_generator

META_COLUMNS = ["meta_epoch", "task_id", "T", "R_min", "pre_adapt_reward", "post_adapt_reward", "outer_loss"]
CURVE_COLUMNS = ["init", "update", "mean_reward", "total_aou"]


def sample_task(meta: MetaConfig, template: ScenarioConfig, rng: np.random.Generator) -> ScenarioConfig:
    (t_lo, t_hi), (r_lo, r_hi) = meta.horizon_range, meta.rate_min_range
    horizon = int(rng.integers(t_lo, t_hi + 1))
    rate_min = float(rng.uniform(r_lo, r_hi)) if r_hi > r_lo else float(r_lo)
    return template.with_task(horizon=horizon, rate_min=rate_min)


def sample_tasks(meta: MetaConfig, template: ScenarioConfig) -> list[ScenarioConfig]:
    rng = make_rng(meta.seed, "tasks")
    return [sample_task(meta, template, rng) for _ in range(meta.num_tasks)]


def _collect(world: GridWorld, agent: ActorCritic, cfg: TrainConfig, n: int, label: str) -> tuple[RolloutBuffer, float]:
    buffer, rewards = RolloutBuffer(), []
    for b in range(n):
        _, m = collect_rollout(world, agent, make_rng(cfg.seed, f"{label}/env/{b}"),
                               make_rng(cfg.seed, f"{label}/sampling/{b}"), cfg, buffer)
        rewards.append(m.reward)
    return buffer, float(np.mean(rewards))


def inner_adapt(agent: ActorCritic, buffer: RolloutBuffer, cfg: TrainConfig, meta: MetaConfig,
                label: str) -> ActorCritic:
    """PPO steps on a copy; the meta-parameters are never touched."""
    adapted = agent.clone()
    opt = PpoOptimizers.for_agent(adapted, cfg.ppo, meta.inner_lr, meta.inner_lr)
    for k in range(meta.inner_steps):
        update(adapted, buffer, cfg.ppo, torch_generator(cfg.seed, f"{label}/inner/{k}"), opt)
    return adapted


@dataclass
class TaskOutcome:
    task_id: int
    horizon: int
    rate_min: float
    pre_adapt_reward: float
    post_adapt_reward: float
    outer_loss: float


def outer_step(agent: ActorCritic, meta_opt: PpoOptimizers, tasks: list[tuple[int, ScenarioConfig]],
               cfg: TrainConfig, meta: MetaConfig, label: str) -> list[TaskOutcome]:
    if not tasks:
        raise ValueError("outer_step needs at least one task")
    meta_opt.actor.zero_grad()
    meta_opt.critic.zero_grad()
    meta_params = list(agent.actor.parameters()) + list(agent.critic.parameters())
    for p in meta_params:
        p.grad = torch.zeros_like(p)

    outcomes = []
    for task_id, task in tasks:
        world = GridWorld(task)
        tl = f"{label}/task/{task_id}"
        pre_buf, pre_reward = _collect(world, agent, cfg, meta.rollouts_per_task, f"{tl}/pre")
        adapted = inner_adapt(agent, pre_buf, cfg, meta, tl)
        post_buf, post_reward = _collect(world, adapted, cfg, meta.rollouts_per_task, f"{tl}/post")

        objective, c_loss = full_batch_losses(adapted, post_buf, cfg.ppo)
        task_loss = -objective + c_loss
        if not torch.isfinite(task_loss):
            raise NonFiniteError(f"non-finite post-adaptation loss on task {task_id}")
        adapted_params = list(adapted.actor.parameters()) + list(adapted.critic.parameters())
        if meta.mode == "fomaml":
            # inner_adapt leaves its last minibatch gradient on the copy
            adapted.actor.zero_grad()
            adapted.critic.zero_grad()
            backward(task_loss)
            for p, q in zip(meta_params, adapted_params):
                p.grad += q.grad
        else:
            with torch.no_grad():
                for p, q in zip(meta_params, adapted_params):
                    p.grad += (p - q) / len(tasks)
        outcomes.append(TaskOutcome(task_id, task.horizon, task.rate_min, pre_reward, post_reward,
                                    float(task_loss.detach())))

    optimizer_step(meta_opt.actor, cfg.ppo.max_grad_norm)
    optimizer_step(meta_opt.critic, cfg.ppo.max_grad_norm)
    return outcomes


@dataclass
class MetaResult:
    agent: ActorCritic
    metrics: pd.DataFrame
    tasks: list[ScenarioConfig] = field(default_factory=list)
    checkpoint: Path | None = None


def meta_train(template: ScenarioConfig, cfg: TrainConfig, meta: MetaConfig, out_dir=None,
               events: EventLog | None = None, progress: bool = False) -> MetaResult:
    events = events or EventLog()
    tasks = sample_tasks(meta, template)
    agent = build_agent(GridWorld(tasks[0]), cfg)
    meta_opt = PpoOptimizers.for_agent(agent, cfg.ppo, meta.meta_lr, meta.meta_lr)
    rows = []
    events("run_start", algorithm=f"meta-{meta.mode}", meta_epochs=meta.meta_epochs,
           num_tasks=meta.num_tasks, tasks_per_step=meta.tasks_per_step, seed=meta.seed)
    for epoch in tqdm(range(1, meta.meta_epochs + 1), desc=f"meta-{meta.mode}", disable=not progress):
        pick = make_rng(meta.seed, f"meta/{epoch}/pick").choice(
            meta.num_tasks, size=meta.tasks_per_step, replace=meta.tasks_per_step > meta.num_tasks)
        batch = [(int(i), tasks[int(i)]) for i in pick]
        outcomes = outer_step(agent, meta_opt, batch, cfg, meta, f"meta/{epoch}")
        for o in outcomes:
            rows.append({"meta_epoch": epoch, "task_id": o.task_id, "T": o.horizon, "R_min": o.rate_min,
                         "pre_adapt_reward": o.pre_adapt_reward, "post_adapt_reward": o.post_adapt_reward,
                         "outer_loss": o.outer_loss})
        events("meta_step", meta_epoch=epoch, tasks=[o.task_id for o in outcomes],
               outer_loss=sum(o.outer_loss for o in outcomes))

    checkpoint = None
    if out_dir:
        checkpoint = save_agent(Path(out_dir) / "checkpoints" / "meta_init.safetensors", agent,
                                meta_epochs=meta.meta_epochs, mode=meta.mode)
        events("checkpoint", path=str(checkpoint), digest=agent.digest())
    events("run_end", algorithm=f"meta-{meta.mode}")
    return MetaResult(agent, pd.DataFrame(rows, columns=META_COLUMNS), tasks, checkpoint)


# ---------- Fast adaptation ----------

def adaptation_curve(agent: ActorCritic, task: ScenarioConfig, cfg: TrainConfig, budget: int,
                     init: str, seed: int) -> list[dict]:
    agent = agent.clone()
    world = GridWorld(task)
    opt = PpoOptimizers.for_agent(agent, cfg.ppo)
    rows = []
    for u in range(budget + 1):
        buffer, episodes = RolloutBuffer(), []
        for b in range(cfg.rollouts_per_epoch):
            _, m = collect_rollout(world, agent, make_rng(seed, f"adapt/{u}/env/{b}"),
                                   make_rng(seed, f"adapt/{u}/sampling/{b}"), cfg, buffer)
            episodes.append(m)
        rows.append({"init": init, "update": u,
                     "mean_reward": float(np.mean([m.reward for m in episodes])),
                     "total_aou": float(np.mean([m.total_aou for m in episodes]))})
        if u < budget:
            update(agent, buffer, cfg.ppo, torch_generator(seed, f"adapt/{u}/minibatch"), opt)
    return rows


def adapt_and_eval(meta_agent: ActorCritic, task: ScenarioConfig, cfg: TrainConfig, budget: int,
                   seed: int = 0) -> pd.DataFrame:
    """Paired curves on one task: meta-initialised vs freshly initialised agent, same seeds."""
    scratch = build_agent(GridWorld(task), cfg)
    rows = adaptation_curve(meta_agent, task, cfg, budget, "meta", seed)
    rows += adaptation_curve(scratch, task, cfg, budget, "scratch", seed)
    return pd.DataFrame(rows, columns=CURVE_COLUMNS)


def updates_to_reach(curve: pd.DataFrame, init: str, target: float, window: int = 5) -> int | None:
    c = curve[curve["init"] == init].sort_values("update")
    smooth = c["mean_reward"].rolling(window, min_periods=1).mean()
    hit = c["update"][smooth >= target]
    return int(hit.iloc[0]) if len(hit) else None
