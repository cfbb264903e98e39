# app/config.py
"""YAML run configuration: `scenario`, `training`, `meta` and `baseline`
sections validated by frozen pydantic models."""
from pathlib import Path
from typing import Annotated, Any, Iterable, Literal

import yaml
from pydantic import AfterValidator, BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from errors import ConfigError
from limits import check_algorithm
from seeding import make_rng


def _ordered(v):
    if v[0] > v[1]:
        raise ValueError(f"lower bound {v[0]} exceeds upper bound {v[1]}")
    return v


Point = tuple[float, float]
Range = Annotated[tuple[float, float], AfterValidator(_ordered)]
IntRange = Annotated[tuple[int, int], AfterValidator(_ordered)]


class _Frozen(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")


# ---------- Scenario ----------

class DeviceConfig(_Frozen):
    id: int
    pos: Point
    power: float = Field(ge=0)
    bandwidth: float = Field(gt=0)


class UavConfig(_Frozen):
    id: int
    altitude: float = Field(gt=0)
    cds: Point
    final_pos: Point
    speed: float = Field(gt=0)


class ChannelModel(_Frozen):
    rician_factor: float = Field(10.0, ge=0)
    beta0: float = Field(1.0, gt=0)
    noise_power: float = Field(1e-15, gt=0)
    path_loss_exponent: float = Field(2.0, gt=0)
    deterministic: bool = False


class GridConfig(_Frozen):
    x_max: float = Field(1000.0, gt=0)
    y_max: float = Field(1000.0, gt=0)
    cell_size: float = Field(200.0, gt=0)

    @model_validator(mode="after")
    def _whole_cells(self):
        for name, extent in (("x_max", self.x_max), ("y_max", self.y_max)):
            n = extent / self.cell_size
            if abs(n - round(n)) > 1e-9 or round(n) < 1:
                raise ValueError(f"{name}={extent} is not a whole number of cells of size {self.cell_size}")
        return self

    @property
    def n_cols(self) -> int:
        return int(round(self.x_max / self.cell_size))

    @property
    def n_rows(self) -> int:
        return int(round(self.y_max / self.cell_size))

    def contains(self, p: Point) -> bool:
        return 0.0 <= p[0] <= self.x_max and 0.0 <= p[1] <= self.y_max


class RewardWeights(_Frozen):
    data: float = Field(0.3, ge=0)
    aou: float = Field(0.3, ge=0)
    terminal: float = Field(0.4, ge=0)

    @model_validator(mode="before")
    @classmethod
    def _from_triple(cls, data: Any):
        # positional (data, aou, terminal) triple
        if isinstance(data, (list, tuple)):
            if len(data) != 3:
                raise ValueError("weights list must have exactly three entries")
            return {"data": data[0], "aou": data[1], "terminal": data[2]}
        return data


class LayoutConfig(_Frozen):
    num_devices: int = Field(20, ge=1)
    num_uavs: int = Field(3, ge=1)
    altitude_range: Range = (80.0, 100.0)
    power_range: Range = (0.0, 1.0)
    bandwidth_range: Range = (1500.0, 1700.0)
    speed: float = Field(20.0, gt=0)
    cds: Point | None = None
    final_pos: Point | None = None


def generate_layout(layout: LayoutConfig, grid: GridConfig, seed: int) -> tuple[list[dict], list[dict]]:
    """Draw device positions, powers, bandwidths and UAV altitudes once per scenario."""
    rng = make_rng(seed, "layout")
    n = layout.num_devices
    xs = rng.uniform(0.0, grid.x_max, n)
    ys = rng.uniform(0.0, grid.y_max, n)
    p_lo, p_hi = layout.power_range
    powers = p_lo + (p_hi - p_lo) * (1.0 - rng.random(n))  # (lo, hi]
    bandwidths = rng.uniform(*layout.bandwidth_range, n)
    altitudes = sorted(rng.uniform(*layout.altitude_range, layout.num_uavs))
    cds = layout.cds or (grid.cell_size / 2, grid.cell_size / 2)
    final_pos = layout.final_pos or cds
    devices = [
        {"id": i, "pos": (float(xs[i]), float(ys[i])), "power": float(powers[i]), "bandwidth": float(bandwidths[i])}
        for i in range(n)
    ]
    uavs = [
        {"id": u, "altitude": float(altitudes[u]), "cds": tuple(cds), "final_pos": tuple(final_pos), "speed": layout.speed}
        for u in range(layout.num_uavs)
    ]
    return devices, uavs


class ScenarioConfig(_Frozen):
    devices: list[DeviceConfig] = Field(min_length=1)
    uavs: list[UavConfig] = Field(min_length=1)
    grid: GridConfig = GridConfig()
    horizon: int = Field(ge=1)
    rate_min: float = Field(1e5, ge=0)
    weights: RewardWeights = RewardWeights()
    channel: ChannelModel = ChannelModel()
    seed: int = 0
    normalize: bool = True
    rate_norm: float | None = Field(None, gt=0)
    local_time: bool = True

    @model_validator(mode="before")
    @classmethod
    def _resolve_layout(cls, data: Any):
        if not isinstance(data, dict) or "layout" not in data:
            return data
        data = dict(data)
        layout = LayoutConfig.model_validate(data.pop("layout") or {})
        if "devices" in data and "uavs" in data:
            return data
        grid = GridConfig.model_validate(data.get("grid") or {})
        devices, uavs = generate_layout(layout, grid, int(data.get("seed", 0)))
        data.setdefault("devices", devices)
        data.setdefault("uavs", uavs)
        return data

    @model_validator(mode="after")
    def _check_geometry(self):
        for d in self.devices:
            if not self.grid.contains(d.pos):
                raise ValueError(f"device {d.id} position {d.pos} outside grid")
        for u in self.uavs:
            if not self.grid.contains(u.cds):
                raise ValueError(f"uav {u.id} cds {u.cds} outside grid")
            if not self.grid.contains(u.final_pos):
                raise ValueError(f"uav {u.id} final_pos {u.final_pos} outside grid")
        for kind, items in (("device", self.devices), ("uav", self.uavs)):
            ids = [x.id for x in items]
            if len(set(ids)) != len(ids):
                raise ValueError(f"duplicate {kind} ids: {ids}")
        alts = [u.altitude for u in self.uavs]
        if len(set(alts)) != len(alts):
            raise ValueError(f"uav altitudes must be distinct, got {alts}")
        return self

    @property
    def n_devices(self) -> int:
        return len(self.devices)

    @property
    def n_uavs(self) -> int:
        return len(self.uavs)

    def with_task(self, horizon: int | None = None, rate_min: float | None = None) -> "ScenarioConfig":
        update = {}
        if horizon is not None:
            update["horizon"] = int(horizon)
        if rate_min is not None:
            update["rate_min"] = float(rate_min)
        return self.model_copy(update=update)


# ---------- Training ----------

class PpoHyper(_Frozen):
    clip: float = Field(0.2, gt=0, lt=1)
    value_clip: float = Field(0.2, gt=0)
    entropy_coef: float = Field(0.01, ge=0)
    gamma: float = Field(0.99, ge=0, le=1)
    gae_lambda: float = Field(0.95, ge=0, le=1)
    epochs: int = Field(4, ge=1)
    minibatch_size: int = Field(64, ge=1)
    actor_lr: float = Field(3e-4, ge=0)
    critic_lr: float = Field(3e-4, ge=0)
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)
    normalize_advantages: bool = True
    max_grad_norm: float | None = Field(None, gt=0)


class TrainConfig(_Frozen):
    algorithm: str = "mappo"
    epochs: int = Field(500, ge=1)
    rollouts_per_epoch: int = Field(8, ge=1)
    horizon: int | None = Field(None, ge=1)
    ppo: PpoHyper = PpoHyper()
    hidden_sizes: list[int] = Field(default_factory=lambda: [64, 64])
    actor_output_gain: float = Field(0.01, ge=0)
    critic_sees_aou: bool = True
    eval_every: int = Field(0, ge=0)
    eval_episodes: int = Field(4, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    seed: int = 0

    @field_validator("algorithm")
    @classmethod
    def _allowed(cls, v: str):
        ok, msg = check_algorithm(v)
        if not ok:
            raise ValueError(msg)
        return v

    @field_validator("hidden_sizes")
    @classmethod
    def _positive_layers(cls, v: list[int]):
        if any(h < 1 for h in v):
            raise ValueError("hidden layer sizes must be >= 1")
        return v


class HeldOutTask(_Frozen):
    horizon: int = Field(ge=1)
    rate_min: float = Field(ge=0)


class MetaConfig(_Frozen):
    horizon_range: IntRange = (100, 200)
    rate_min_range: Range = (1e5, 1.2e5)
    num_tasks: int = Field(100, ge=1)
    tasks_per_step: int = Field(5, ge=1)
    meta_epochs: int = Field(100, ge=1)
    rollouts_per_task: int = Field(4, ge=1)
    inner_lr: float = Field(3e-4, ge=0)
    inner_steps: int = Field(1, ge=1)
    meta_lr: float = Field(1e-4, ge=0)
    mode: Literal["fomaml", "reptile"] = "fomaml"
    adapt_budget: int = Field(50, ge=0)
    held_out: HeldOutTask | None = None
    seed: int = 0

    @field_validator("horizon_range")
    @classmethod
    def _positive_horizon(cls, v):
        if v[0] < 1:
            raise ValueError("horizons must be >= 1")
        return v


class BaselineConfig(_Frozen):
    mixer: Literal["additive", "monotonic"] | None = None
    hidden_sizes: list[int] = Field(default_factory=lambda: [64, 64])
    mixing_embed: int = Field(32, ge=1)
    mixer_activation: Literal["elu", "identity"] = "elu"
    hypernet_hidden: int = Field(64, ge=1)
    target_update_period: int = Field(200, ge=1)
    epsilon_start: float = Field(1.0, ge=0, le=1)
    epsilon_end: float = Field(0.05, ge=0, le=1)
    epsilon_decay_fraction: float = Field(0.5, gt=0, le=1)
    epsilon_fixed: float | None = Field(None, ge=0, le=1)
    gamma: float = Field(0.99, ge=0, le=1)
    lr: float = Field(5e-4, ge=0)
    buffer_capacity: int = Field(5000, ge=1)
    batch_size: int = Field(32, ge=1)
    max_grad_norm: float = Field(10.0, gt=0)
    seed: int = 0

    def resolved_mixer(self, algorithm: str) -> str:
        if self.mixer:
            return self.mixer
        return "monotonic" if algorithm == "qmix" else "additive"


class RunConfig(_Frozen):
    scenario: ScenarioConfig
    training: TrainConfig = TrainConfig()
    meta: MetaConfig = MetaConfig()
    baseline: BaselineConfig = BaselineConfig()


# ---------- Loading / overrides ----------

def _format_errors(err: ValidationError) -> tuple[str, list[str]]:
    fields, lines = [], []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        fields.append(loc)
        lines.append(f"{loc}: {e['msg']}")
    return "invalid config:\n  " + "\n  ".join(lines), fields


def apply_overrides(raw: dict, overrides: Iterable[str] = (), seed: int | None = None) -> dict:
    """Apply `section.key=value` overrides (values parsed as YAML scalars)."""
    raw = yaml.safe_load(yaml.safe_dump(raw)) or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} must look like section.key=value", [item])
        key, value = item.split("=", 1)
        parts = key.strip().split(".")
        node = raw
        for p in parts[:-1]:
            node = node.setdefault(p, {})
            if not isinstance(node, dict):
                raise ConfigError(f"override {key!r} descends into a non-mapping", [key])
        node[parts[-1]] = yaml.safe_load(value)
    if seed is not None:
        for section in ("scenario", "training", "meta", "baseline"):
            raw.setdefault(section, {})
            if isinstance(raw[section], dict):
                raw[section]["seed"] = int(seed)
    return raw


def parse_config(raw: dict) -> RunConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a mapping with a [scenario] section", ["<root>"])
    try:
        return RunConfig.model_validate(raw)
    except ValidationError as e:
        msg, fields = _format_errors(e)
        raise ConfigError(msg, fields) from None


def load_config(path, overrides: Iterable[str] = (), seed: int | None = None) -> RunConfig:
    try:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}", ["<file>"]) from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config file is not valid YAML: {e}", ["<file>"]) from None
    return parse_config(apply_overrides(raw or {}, overrides, seed))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)


def scenario_from_yaml(text: str) -> ScenarioConfig:
    raw = yaml.safe_load(text) or {}
    raw = raw.get("scenario", raw)
    try:
        return ScenarioConfig.model_validate(raw)
    except ValidationError as e:
        msg, fields = _format_errors(e)
        raise ConfigError(msg, fields) from None
