import os
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from lupulus.config import HwConfig, load_hw, load_network
from lupulus.flow import time_network

settings.register_profile("default", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("ci", max_examples=200, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))

BENCHMARKS = ("alexnet-conv", "vgg16-conv")


@pytest.fixture(scope="session")
def hw() -> HwConfig:
    return load_hw("default")


@pytest.fixture(scope="session")
def networks():
    return {name: load_network(name) for name in BENCHMARKS}


@pytest.fixture(scope="session")
def reports(hw, networks):
    """Default-config timing reports, computed once per session."""
    return {name: time_network(net, hw) for name, net in networks.items()}


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def small_hw(**changes) -> HwConfig:
    """A 6x6 grid of 3x3 groups, handy for hand-checkable mappings."""
    return replace(HwConfig(grid_rows=6, grid_cols=6), **changes)
