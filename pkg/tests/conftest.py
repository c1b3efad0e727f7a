"""Shared fixtures: package path, float64 precision, tiny config, tiny model and windows."""

import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.join(os.path.dirname(os.path.dirname(os.path.abspath(__file__))), "fleetgpt"))

from fleet_config import RunConfig  # noqa: E402
from fleet_data import fleet_spec, generate_fleet, inject_faults, make_windows  # noqa: E402
from fleet_model import FleetModel  # noqa: E402
from fleet_tensor import precision  # noqa: E402


@pytest.fixture
def f64():
    with precision("float64"):
        yield


@pytest.fixture
def tiny_cfg():
    return RunConfig.from_preset("tiny")


@pytest.fixture
def tiny_fleet():
    return fleet_spec("tiny_b")


@pytest.fixture
def tiny_dataset(tiny_cfg, tiny_fleet):
    L = tiny_cfg.data.window_len
    return inject_faults(generate_fleet(tiny_fleet, tiny_cfg.data.points, 0, L), L, 0)


@pytest.fixture
def tiny_windows(tiny_cfg, tiny_dataset):
    return make_windows(tiny_dataset, tiny_cfg.data.window_len)


@pytest.fixture
def tiny_model(f64, tiny_cfg, tiny_fleet):
    return FleetModel.build(tiny_cfg, [tiny_fleet], np.random.default_rng(0), seed=0)
