# app/env_core.py
"""Grid-world environment for cooperative UAV data collection.

UAVs move one cell per slot on an n_cols x n_rows grid at fixed, distinct
altitudes. Each slot the environment draws the air-to-ground channel of
every (device, UAV) pair, associates each device with at most one UAV
(highest rate above R_min, lowest UAV id on ties), advances every device's
Age-of-Updates and pays a shared team reward:

    r[t] = l_R * sum(a * R) / R_norm - l_A * sum(A) / A_norm
           - l_F * [t == T] * sum_u dist(uav_u, final_u) / diag
"""
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from pydantic import ValidationError

from config import ChannelModel, DeviceConfig, ScenarioConfig
from errors import ChannelDomainError, ConfigError, EpisodeStateError

STAY, UP, DOWN, RIGHT, LEFT = range(5)
N_ACTIONS = 5
MOVES = np.array([[0, 0], [0, 1], [0, -1], [1, 0], [-1, 0]], dtype=np.int64)

TRACE_COLUMNS = ["slot", "uav_id", "x", "y", "device_id_served", "rate", "reward", "total_aou"]


# ---------- Communication model ----------

def distance(uav_pos, altitude: float, device_pos) -> float:
    dx = float(uav_pos[0]) - float(device_pos[0])
    dy = float(uav_pos[1]) - float(device_pos[1])
    return float(np.sqrt(dx * dx + dy * dy + float(altitude) ** 2))


def fading_power(channel: ChannelModel, rng: np.random.Generator | None, size=None):
    """|Xi|^2 of the Rician small-scale term; exactly 1 in deterministic mode."""
    if channel.deterministic:
        return 1.0 if size is None else np.ones(size)
    if rng is None:
        raise ValueError("a random generator is required when the channel is stochastic")
    k = channel.rician_factor
    nlos = (rng.standard_normal(size) + 1j * rng.standard_normal(size)) / np.sqrt(2.0)
    xi = np.sqrt(k / (k + 1.0)) + np.sqrt(1.0 / (k + 1.0)) * nlos
    return np.abs(xi) ** 2


def channel_gain(channel: ChannelModel, dist: float, rng: np.random.Generator | None = None) -> float:
    if not dist > 0:
        raise ChannelDomainError(f"channel gain undefined at distance {dist}")
    return float(fading_power(channel, rng) * channel.beta0 * dist ** (-channel.path_loss_exponent))


def rate(channel: ChannelModel, device: DeviceConfig, uav_pos, altitude: float,
         rng: np.random.Generator | None = None) -> float:
    gain = channel_gain(channel, distance(uav_pos, altitude, device.pos), rng)
    return float(device.bandwidth * np.log2(1.0 + device.power * gain / channel.noise_power))


# ---------- Association / AoU / flight time ----------

def associate(rates: np.ndarray, rate_min: float) -> np.ndarray:
    """Greedy max-rate association; a row holds at most one 1."""
    rates = np.asarray(rates, dtype=np.float64)
    eligible = (rates >= rate_min) & (rates > 0.0)
    best = np.argmax(np.where(eligible, rates, -np.inf), axis=1)  # first max = lowest UAV id
    assoc = np.zeros(rates.shape, dtype=np.int8)
    rows = np.flatnonzero(eligible.any(axis=1))
    assoc[rows, best[rows]] = 1
    return assoc


def aou_step(aou: np.ndarray, assoc_prev: np.ndarray) -> np.ndarray:
    served = (np.asarray(assoc_prev).sum(axis=1) > 0).astype(np.int64)
    return (np.asarray(aou, dtype=np.int64) + 1) * (1 - served)


def flight_time(visited_cells, cell_size: float, speed: float) -> float:
    cells = np.asarray(visited_cells, dtype=np.float64).reshape(-1, 2)
    if len(cells) < 2:
        return 0.0
    hops = np.hypot(*np.diff(cells, axis=0).T) * cell_size
    return float(hops.sum() / speed)


# ---------- State containers ----------

@dataclass(frozen=True)
class WorldState:
    slot: int
    uav_cells: np.ndarray      # (U, 2) integer (col, row)
    aou: np.ndarray            # (I,) ages in slots
    assoc: np.ndarray          # (I, U) binary
    cum_data: float = 0.0
    done: bool = False
    served_ever: np.ndarray | None = None
    communications: int = 0


@dataclass(frozen=True)
class StepInfo:
    data_bits: float
    devices_served: int
    rates: np.ndarray
    data_term: float
    aou_term: float
    terminal_term: float


@dataclass(frozen=True)
class StepResult:
    next_state: WorldState
    reward: float
    per_uav_obs: np.ndarray
    info: StepInfo


@dataclass
class SlotRecord:
    slot: int
    uav_cells: np.ndarray
    assoc: np.ndarray
    rates: np.ndarray
    aou: np.ndarray
    reward: float
    data_bits: float


@dataclass
class EpisodeTrace:
    initial_cells: np.ndarray
    records: list[SlotRecord] = field(default_factory=list)

    def append(self, result: StepResult) -> None:
        s = result.next_state
        self.records.append(SlotRecord(
            slot=s.slot, uav_cells=s.uav_cells.copy(), assoc=s.assoc.copy(),
            rates=result.info.rates.copy(), aou=s.aou.copy(),
            reward=float(result.reward), data_bits=float(result.info.data_bits),
        ))

    @property
    def total_reward(self) -> float:
        return float(sum(r.reward for r in self.records))

    def visited_cells(self, u: int) -> np.ndarray:
        return np.vstack([self.initial_cells[u]] + [r.uav_cells[u] for r in self.records])


@dataclass
class ConstraintReport:
    rate_violations: int
    multi_server_violations: int
    non_binary_entries: int
    flight_times: list[float]
    flight_time_limit: float
    x_violations: int
    y_violations: int
    terminal_distances: list[float]

    @property
    def flight_time_ok(self) -> bool:
        return all(ft <= self.flight_time_limit + 1e-9 for ft in self.flight_times)

    @property
    def terminal_met(self) -> bool:
        return all(d <= 1e-9 for d in self.terminal_distances)

    @property
    def passed(self) -> bool:
        """Hard constraints only; the terminal position is shaped by the reward and reported separately."""
        return (self.rate_violations == 0 and self.multi_server_violations == 0
                and self.non_binary_entries == 0 and self.flight_time_ok
                and self.x_violations == 0 and self.y_violations == 0)

    def to_dict(self) -> dict:
        return {
            "rate_violations": self.rate_violations,
            "multi_server_violations": self.multi_server_violations,
            "non_binary_entries": self.non_binary_entries,
            "flight_times_s": self.flight_times,
            "flight_time_limit_s": self.flight_time_limit,
            "flight_time_ok": self.flight_time_ok,
            "terminal_distances_m": self.terminal_distances,
            "terminal_met": self.terminal_met,
            "x_violations": self.x_violations,
            "y_violations": self.y_violations,
            "passed": self.passed,
        }


# ---------- Environment ----------

class GridWorld:
    """Precomputes the static quantities of one scenario; states are passed in and out."""

    def __init__(self, scenario: ScenarioConfig | dict):
        if isinstance(scenario, dict):
            try:
                scenario = ScenarioConfig.model_validate(scenario)
            except ValidationError as e:
                raise ConfigError(f"invalid scenario: {e}") from None
        self.scenario = sc = scenario
        self.n_cols, self.n_rows = sc.grid.n_cols, sc.grid.n_rows
        self.cell_size = sc.grid.cell_size
        self.n_devices, self.n_uavs = sc.n_devices, sc.n_uavs
        self.horizon = sc.horizon

        self.device_pos = np.array([d.pos for d in sc.devices], dtype=np.float64)
        self.power = np.array([d.power for d in sc.devices], dtype=np.float64)
        self.bandwidth = np.array([d.bandwidth for d in sc.devices], dtype=np.float64)
        self.altitude = np.array([u.altitude for u in sc.uavs], dtype=np.float64)
        self.cds_cells = self.cell_of([u.cds for u in sc.uavs])
        self.final_cells = self.cell_of([u.final_pos for u in sc.uavs])

        self.slot_duration = self.cell_size / min(u.speed for u in sc.uavs)
        if sc.normalize:
            self.rate_norm = sc.rate_norm or self._max_link_rate() or 1.0
            self.aou_norm = float(sc.horizon)
            self.dist_norm = float(np.hypot(sc.grid.x_max, sc.grid.y_max))
        else:
            self.rate_norm = sc.rate_norm or 1.0
            self.aou_norm = 1.0
            self.dist_norm = 1.0

        self.obs_dim = 2 + (1 if sc.local_time else 0) + self.n_uavs
        self.global_dim = 2 * self.n_uavs + self.n_devices + 1

    # -- geometry --
    def cell_of(self, positions) -> np.ndarray:
        p = np.asarray(positions, dtype=np.float64).reshape(-1, 2)
        cols = np.clip(np.floor(p[:, 0] / self.cell_size), 0, self.n_cols - 1)
        rows = np.clip(np.floor(p[:, 1] / self.cell_size), 0, self.n_rows - 1)
        return np.stack([cols, rows], axis=1).astype(np.int64)

    def cell_centers(self, cells) -> np.ndarray:
        return (np.asarray(cells, dtype=np.float64) + 0.5) * self.cell_size

    def in_bounds(self, cells) -> np.ndarray:
        c = np.asarray(cells)
        return (c[:, 0] >= 0) & (c[:, 0] < self.n_cols) & (c[:, 1] >= 0) & (c[:, 1] < self.n_rows)

    def terminal_distances(self, cells) -> np.ndarray:
        diff = self.cell_centers(cells) - self.cell_centers(self.final_cells)
        return np.hypot(diff[:, 0], diff[:, 1])

    # -- channel --
    def _max_link_rate(self) -> float:
        ch = self.scenario.channel
        gain = ch.beta0 * self.altitude[None, :] ** (-ch.path_loss_exponent)
        r = self.bandwidth[:, None] * np.log2(1.0 + self.power[:, None] * gain / ch.noise_power)
        return float(r.max())

    def rates(self, cells, rng: np.random.Generator | None = None) -> np.ndarray:
        ch = self.scenario.channel
        centers = self.cell_centers(cells)
        diff = centers[None, :, :] - self.device_pos[:, None, :]
        d = np.sqrt((diff ** 2).sum(axis=2) + self.altitude[None, :] ** 2)
        gain = fading_power(ch, rng, size=d.shape) * ch.beta0 * d ** (-ch.path_loss_exponent)
        return self.bandwidth[:, None] * np.log2(1.0 + self.power[:, None] * gain / ch.noise_power)

    # -- observations --
    def observations(self, state: WorldState) -> np.ndarray:
        pos = state.uav_cells / np.array([max(self.n_cols - 1, 1), max(self.n_rows - 1, 1)], dtype=np.float64)
        parts = [pos]
        if self.scenario.local_time:
            parts.append(np.full((self.n_uavs, 1), state.slot / self.horizon))
        parts.append(np.eye(self.n_uavs))
        return np.hstack(parts)

    def global_state(self, state: WorldState, include_aou: bool = True) -> np.ndarray:
        pos = state.uav_cells / np.array([max(self.n_cols - 1, 1), max(self.n_rows - 1, 1)], dtype=np.float64)
        ages = state.aou / self.horizon if include_aou else np.zeros(self.n_devices)
        return np.concatenate([pos.reshape(-1), ages, [state.slot / self.horizon]])

    # -- dynamics --
    def reset(self, rng: np.random.Generator | None = None) -> tuple[WorldState, np.ndarray]:
        state = WorldState(
            slot=0,
            uav_cells=self.cds_cells.copy(),
            aou=np.zeros(self.n_devices, dtype=np.int64),
            assoc=np.zeros((self.n_devices, self.n_uavs), dtype=np.int8),
            served_ever=np.zeros(self.n_devices, dtype=bool),
        )
        return state, self.observations(state)

    def move(self, cells: np.ndarray, joint_action) -> np.ndarray:
        actions = np.asarray(joint_action, dtype=np.int64).reshape(-1)
        if actions.shape != (self.n_uavs,):
            raise ValueError(f"joint action must have {self.n_uavs} entries, got {actions.shape[0]}")
        if ((actions < 0) | (actions >= N_ACTIONS)).any():
            raise ValueError(f"actions must lie in 0..{N_ACTIONS - 1}, got {actions.tolist()}")
        proposed = cells + MOVES[actions]
        inside = self.in_bounds(proposed)
        return np.where(inside[:, None], proposed, cells)

    def reward_terms(self, assoc, rates, aou, cells, terminal: bool) -> tuple[float, float, float]:
        data_term = float((assoc * rates).sum() / self.rate_norm)
        aou_term = float(np.asarray(aou).sum() / self.aou_norm)
        terminal_term = float(self.terminal_distances(cells).sum() / self.dist_norm) if terminal else 0.0
        return data_term, aou_term, terminal_term

    def combine(self, data_term: float, aou_term: float, terminal_term: float) -> float:
        w = self.scenario.weights
        return w.data * data_term - w.aou * aou_term - w.terminal * terminal_term

    def step(self, state: WorldState, joint_action, rng: np.random.Generator | None = None) -> StepResult:
        if state.done:
            raise EpisodeStateError(f"episode already finished at slot {state.slot}; call reset()")
        cells = self.move(state.uav_cells, joint_action)
        t = state.slot + 1
        aou = aou_step(state.aou, state.assoc)
        rates = self.rates(cells, rng)
        assoc = associate(rates, self.scenario.rate_min)
        terminal = t >= self.horizon
        terms = self.reward_terms(assoc, rates, aou, cells, terminal)
        served_now = assoc.any(axis=1)
        data_bits = float((assoc * rates).sum() * self.slot_duration)
        served_ever = state.served_ever if state.served_ever is not None else np.zeros(self.n_devices, dtype=bool)
        nxt = WorldState(
            slot=t, uav_cells=cells, aou=aou, assoc=assoc,
            cum_data=state.cum_data + data_bits, done=terminal,
            served_ever=served_ever | served_now,
            communications=state.communications + int(served_now.sum()),
        )
        reward = self.combine(*terms)
        info = StepInfo(data_bits=data_bits, devices_served=int(served_now.sum()), rates=rates,
                        data_term=terms[0], aou_term=terms[1], terminal_term=terms[2])
        return StepResult(next_state=nxt, reward=reward, per_uav_obs=self.observations(nxt), info=info)

    # -- traces --
    def replay(self, joint_actions, rng: np.random.Generator | None = None) -> EpisodeTrace:
        state, _ = self.reset(rng)
        trace = EpisodeTrace(initial_cells=state.uav_cells.copy())
        for a in joint_actions:
            result = self.step(state, a, rng)
            trace.append(result)
            state = result.next_state
        return trace

    def recompute_rewards(self, trace: EpisodeTrace) -> np.ndarray:
        """Per-slot rewards rebuilt from the trace's association, rates, ages and cells alone."""
        out = []
        for rec in trace.records:
            terms = self.reward_terms(rec.assoc, rec.rates, rec.aou, rec.uav_cells, rec.slot >= self.horizon)
            out.append(self.combine(*terms))
        return np.array(out)

    def trace_frame(self, trace: EpisodeTrace) -> pd.DataFrame:
        rows = []
        for rec in trace.records:
            centers = self.cell_centers(rec.uav_cells)
            total_aou = int(rec.aou.sum())
            for u in range(self.n_uavs):
                served = np.flatnonzero(rec.assoc[:, u])
                rows.append({
                    "slot": rec.slot,
                    "uav_id": self.scenario.uavs[u].id,
                    "x": float(centers[u, 0]),
                    "y": float(centers[u, 1]),
                    "device_id_served": ";".join(str(self.scenario.devices[i].id) for i in served),
                    "rate": float(rec.rates[served, u].sum()),
                    "reward": rec.reward,
                    "total_aou": total_aou,
                })
        return pd.DataFrame(rows, columns=TRACE_COLUMNS)

    def rewards_from_frame(self, frame: pd.DataFrame) -> np.ndarray:
        """Replay oracle for exported traces: rebuild each slot's reward from the CSV columns."""
        final_centers = self.cell_centers(self.final_cells)
        out = []
        for slot, g in frame.groupby("slot", sort=True):
            g = g.sort_values("uav_id")
            data_term = g["rate"].sum() / self.rate_norm
            aou_term = g["total_aou"].iloc[0] / self.aou_norm
            terminal_term = 0.0
            if slot >= self.horizon:
                d = np.hypot(g["x"].to_numpy() - final_centers[:, 0], g["y"].to_numpy() - final_centers[:, 1])
                terminal_term = d.sum() / self.dist_norm
            out.append(self.combine(data_term, aou_term, terminal_term))
        return np.array(out)


# ---------- Functional entry points ----------

def reset(scenario: ScenarioConfig | dict, rng: np.random.Generator | None = None):
    return GridWorld(scenario).reset(rng)


def step(state: WorldState, joint_action, scenario: ScenarioConfig, rng: np.random.Generator | None = None) -> StepResult:
    return GridWorld(scenario).step(state, joint_action, rng)


def check_constraints(trace: EpisodeTrace, scenario: ScenarioConfig | GridWorld) -> ConstraintReport:
    world = scenario if isinstance(scenario, GridWorld) else GridWorld(scenario)
    rate_v = multi_v = non_binary = x_v = y_v = 0
    for rec in trace.records:
        a = np.asarray(rec.assoc)
        non_binary += int((~np.isin(a, (0, 1))).sum())
        rate_v += int(((a == 1) & (rec.rates < world.scenario.rate_min)).sum())
        multi_v += int((a.sum(axis=1) > 1).sum())
        cells = np.asarray(rec.uav_cells)
        x_v += int(((cells[:, 0] < 0) | (cells[:, 0] >= world.n_cols)).sum())
        y_v += int(((cells[:, 1] < 0) | (cells[:, 1] >= world.n_rows)).sum())
    speeds = [u.speed for u in world.scenario.uavs]
    flight = [flight_time(trace.visited_cells(u), world.cell_size, speeds[u]) for u in range(world.n_uavs)]
    last = trace.records[-1].uav_cells if trace.records else trace.initial_cells
    return ConstraintReport(
        rate_violations=rate_v,
        multi_server_violations=multi_v,
        non_binary_entries=non_binary,
        flight_times=flight,
        flight_time_limit=world.horizon * world.slot_duration,
        x_violations=x_v,
        y_violations=y_v,
        terminal_distances=[float(d) for d in world.terminal_distances(last)],
    )
