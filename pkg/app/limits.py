import yaml
from functools import lru_cache
from pathlib import Path

from settings import get_settings


@lru_cache(maxsize=None)
def load_limits(path: str | None = None) -> dict:
    path = Path(path) if path else get_settings().limits_path
    return yaml.safe_load(Path(path).read_text())


def allowed_algorithms() -> list[str]:
    return load_limits()["allow_algorithms"]


def check_algorithm(name: str):
    if name not in allowed_algorithms():
        return False, f"Algorithm {name!r} not allowed (allowed: {allowed_algorithms()})"
    return True, "OK"


def check_oracle_instance(n_cols: int, n_rows: int, n_uavs: int, horizon: int, deterministic: bool):
    lim = load_limits()["oracle"]
    side = lim["max_grid_cells_per_side"]
    if n_cols > side or n_rows > side:
        return False, f"grid {n_cols}x{n_rows} exceeds oracle bound {side}x{side}"
    if n_uavs > lim["max_uavs"]:
        return False, f"{n_uavs} UAVs exceeds oracle bound {lim['max_uavs']}"
    if horizon > lim["max_horizon"]:
        return False, f"horizon {horizon} exceeds oracle bound {lim['max_horizon']}"
    if lim["require_deterministic_channel"] and not deterministic:
        return False, "oracle requires channel.deterministic = true"
    leaves = 5 ** (n_uavs * horizon)
    if leaves > lim["max_joint_trajectories"]:
        return False, f"5^(U*T) = {leaves} joint trajectories exceeds {lim['max_joint_trajectories']}"
    return True, "OK"
