from pathlib import Path

import pytest

from config import TrainConfig, load_config, parse_config

REPO_ROOT = Path(__file__).resolve().parents[1]
CONFIGS = REPO_ROOT / "configs"


@pytest.fixture(autouse=True)
def _quiet_runs(tmp_path, monkeypatch):
    monkeypatch.setenv("UAVSIM_RUNS_DIR", str(tmp_path / "runs"))
    monkeypatch.setenv("UAVSIM_PROGRESS", "0")


@pytest.fixture
def tiny_path():
    return CONFIGS / "tiny.yaml"


@pytest.fixture
def tiny_cfg(tiny_path):
    return load_config(tiny_path)


@pytest.fixture
def tiny(tiny_cfg):
    """3x3 grid, 1 UAV, 2 devices, T=5, deterministic channel."""
    return tiny_cfg.scenario


@pytest.fixture
def small():
    """Stochastic 3x3 scenario with two UAVs and three devices."""
    return parse_config({
        "scenario": {
            "grid": {"x_max": 600, "y_max": 600, "cell_size": 200},
            "horizon": 6,
            "rate_min": 50000,
            "weights": [0.3, 0.3, 0.4],
            "seed": 3,
            "devices": [
                {"id": 0, "pos": [120, 480], "power": 0.8, "bandwidth": 1600},
                {"id": 1, "pos": [510, 90], "power": 0.5, "bandwidth": 1550},
                {"id": 2, "pos": [300, 300], "power": 1.0, "bandwidth": 1700},
            ],
            "uavs": [
                {"id": 0, "altitude": 85, "cds": [100, 100], "final_pos": [100, 100], "speed": 20},
                {"id": 1, "altitude": 95, "cds": [500, 500], "final_pos": [500, 500], "speed": 20},
            ],
        }
    }).scenario


@pytest.fixture
def quick_train():
    return TrainConfig(epochs=2, rollouts_per_epoch=2, hidden_sizes=[16], seed=5)
