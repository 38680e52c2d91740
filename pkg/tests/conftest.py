import json
from pathlib import Path

import pytest

from slarm.world import load_scenario, load_scenario_file

CONFIG_DIR = Path(__file__).resolve().parent.parent / "configs"


@pytest.fixture(scope="session")
def default_config() -> dict:
    with open(CONFIG_DIR / "fig2_room.json") as fh:
        return json.load(fh)


@pytest.fixture(scope="session")
def room_scenario():
    return load_scenario_file(CONFIG_DIR / "fig2_room.json")


@pytest.fixture(scope="session")
def sweep_scenario():
    return load_scenario_file(CONFIG_DIR / "fig2_room_sweep.json")


@pytest.fixture()
def open_room():
    """4 m x 3 m empty room, noiseless sensors."""
    return load_scenario({
        "room": {"x_max": 2.0, "y_max": 1.5, "height": 3.0},
        "lidar": {"beam_count": 8, "max_range": 10.0, "range_noise_sigma": 0.0},
        "odometry_noise": {"sigma_dx": 0.0, "sigma_dy": 0.0, "sigma_dtheta": 0.0},
    })


@pytest.fixture()
def walled_room():
    """6 m x 4 m room with an L of interior walls, noiseless sensors."""
    return load_scenario({
        "room": {"x_max": 3.0, "y_max": 2.0, "height": 3.0},
        "walls": [{"center": [1.5, 0.0], "size": [0.5, 2.5, 1.8]},
                  {"center": [0.0, -1.5], "size": [3.0, 0.5, 1.8]}],
        "lidar": {"beam_count": 90, "max_range": 10.0, "range_noise_sigma": 0.0},
        "odometry_noise": {"sigma_dx": 0.0, "sigma_dy": 0.0, "sigma_dtheta": 0.0},
    })
