# app/oracle.py
"""Exact optimum for tiny deterministic instances.

Dynamic programming over (slot, UAV cells, ages, association) with the
environment's own step function as the only source of dynamics. The state
space is finite because ages never exceed the slot index.
"""
import itertools
from dataclasses import dataclass, field

import numpy as np
import torch

from config import ScenarioConfig
from env_core import N_ACTIONS, EpisodeTrace, GridWorld, WorldState
from errors import OracleBoundsError
from limits import check_oracle_instance
from nn_core import Mlp
from ppo_core import policy_distribution


class OracleInstance:
    def __init__(self, scenario: ScenarioConfig, horizon: int | None = None):
        self.horizon = scenario.horizon if horizon is None else int(horizon)
        if self.horizon < 0:
            raise OracleBoundsError(f"horizon must be >= 0, got {self.horizon}")
        ok, msg = check_oracle_instance(scenario.grid.n_cols, scenario.grid.n_rows, scenario.n_uavs,
                                        self.horizon, scenario.channel.deterministic)
        if not ok:
            raise OracleBoundsError(msg)
        self.scenario = scenario if self.horizon == 0 else scenario.with_task(horizon=self.horizon)
        self.world = GridWorld(self.scenario)
        self.joint_actions = list(itertools.product(range(N_ACTIONS), repeat=self.scenario.n_uavs))

    @staticmethod
    def _key(s: WorldState) -> tuple:
        return s.slot, s.uav_cells.tobytes(), s.aou.tobytes(), s.assoc.tobytes()

    def best(self, state: WorldState, memo: dict) -> tuple[float, tuple | None]:
        """(optimal return-to-go, first joint action); lowest action tuple wins ties."""
        if state.slot >= self.horizon:
            return 0.0, None
        key = self._key(state)
        if key not in memo:
            best_v, best_a = -np.inf, None
            for a in self.joint_actions:
                res = self.world.step(state, a)
                v = res.reward + self.best(res.next_state, memo)[0]
                if v > best_v:
                    best_v, best_a = v, a
            memo[key] = (best_v, best_a)
        return memo[key]

    def uniform_value(self, state: WorldState, memo: dict) -> float:
        if state.slot >= self.horizon:
            return 0.0
        key = self._key(state)
        if key not in memo:
            total = 0.0
            for a in self.joint_actions:
                res = self.world.step(state, a)
                total += res.reward + self.uniform_value(res.next_state, memo)
            memo[key] = total / len(self.joint_actions)
        return memo[key]


@dataclass
class OracleSolution:
    optimal_return: float
    actions: list[tuple[int, ...]]
    trace: EpisodeTrace
    breakdown: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "optimal_return": self.optimal_return,
            "trajectory": [list(a) for a in self.actions],
            "per_slot": self.breakdown,
        }


def solve(instance: OracleInstance) -> OracleSolution:
    world = instance.world
    state, _ = world.reset()
    if instance.horizon == 0:
        return OracleSolution(0.0, [], EpisodeTrace(initial_cells=state.uav_cells.copy()))
    memo: dict = {}
    value, _ = instance.best(state, memo)
    actions = []
    while state.slot < instance.horizon:
        _, a = instance.best(state, memo)
        actions.append(tuple(int(x) for x in a))
        state = world.step(state, a).next_state
    trace = world.replay(actions)
    breakdown = []
    for rec in trace.records:
        d, aou, term = world.reward_terms(rec.assoc, rec.rates, rec.aou, rec.uav_cells, rec.slot >= world.horizon)
        breakdown.append({"slot": rec.slot, "reward": rec.reward, "data_term": d, "aou_term": aou,
                          "terminal_term": term, "cells": rec.uav_cells.tolist()})
    return OracleSolution(float(value), actions, trace, breakdown)


def return_agreement(instance: OracleInstance, solution: OracleSolution) -> float:
    """Max abs difference between the DP value, the step-replay sum and the trace-formula sum."""
    replayed = instance.world.replay(solution.actions).total_reward if solution.actions else 0.0
    recomputed = float(instance.world.recompute_rewards(solution.trace).sum()) if solution.actions else 0.0
    v = solution.optimal_return
    return max(abs(v - replayed), abs(v - recomputed), abs(replayed - recomputed))


def uniform_expectation(instance: OracleInstance) -> float:
    """Exact expected return of the uniform random joint policy."""
    if instance.horizon == 0:
        return 0.0
    state, _ = instance.world.reset()
    return float(instance.uniform_value(state, {}))


def gap_ratio(policy_return: float, optimal_return: float) -> float:
    if np.isclose(policy_return, optimal_return, rtol=0.0, atol=1e-12):
        return 1.0
    if optimal_return > 0:
        return policy_return / optimal_return
    if optimal_return < 0 and policy_return < 0:
        return optimal_return / policy_return
    return 0.0


@dataclass
class GapReport:
    policy_return: float
    optimal_return: float
    ratio: float
    uniform_expected_return: float
    policy_actions: list[tuple[int, ...]]

    def to_dict(self) -> dict:
        return {
            "policy_return": self.policy_return,
            "optimal_return": self.optimal_return,
            "ratio": self.ratio,
            "uniform_expected_return": self.uniform_expected_return,
            "policy_trajectory": [list(a) for a in self.policy_actions],
        }


def greedy_actions(instance: OracleInstance, actor: Mlp) -> list[tuple[int, ...]]:
    world = instance.world
    state, obs = world.reset()
    actions = []
    while state.slot < instance.horizon:
        with torch.no_grad():
            a = policy_distribution(actor, obs).numpy().argmax(axis=1)
        actions.append(tuple(int(x) for x in a))
        res = world.step(state, a)
        state, obs = res.next_state, res.per_uav_obs
    return actions


def enumerate_check(instance: OracleInstance, policy, solution: OracleSolution | None = None) -> GapReport:
    """`policy` is an actor network (played greedily) or an explicit joint-action sequence."""
    solution = solution or solve(instance)
    actions = greedy_actions(instance, policy) if isinstance(policy, Mlp) else [tuple(a) for a in policy]
    ret = instance.world.replay(actions).total_reward if actions else 0.0
    return GapReport(ret, solution.optimal_return, gap_ratio(ret, solution.optimal_return),
                     uniform_expectation(instance), actions)
