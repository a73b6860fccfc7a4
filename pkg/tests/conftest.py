# -*- coding: utf-8 -*-

"""pytest configuration"""


import os
from io import StringIO
from pathlib import Path

import numpy as np
import pytest
import yaml

from urllc_allocator import channel, output


# ------------------------------------ add option for running the full test set
def pytest_addoption(parser):
    parser.addoption(
        "--integration-test",
        action="store_true",
        default=False,
        help="run integration tests",
    )
    parser.addoption(
        "--slow-integration-test",
        action="store_true",
        default=False,
        help="run slow integration tests",
    )


def pytest_collection_modifyitems(config, items):
    if config.getoption("--slow-integration-test"):
        return
    skip_integration = pytest.mark.skip(
        reason="need --integration-test option to run"
    )
    skip_slow_integration = pytest.mark.skip(
        reason="need --slow-integration-test option to run"
    )
    run_integration = config.getoption("--integration-test")
    for item in items:
        if "integration_test" in item.keywords and not run_integration:
            item.add_marker(skip_integration)
        if "slow_integration_test" in item.keywords:
            item.add_marker(skip_slow_integration)


@pytest.fixture(scope="session")
def tests_dir():
    yield os.path.abspath(os.path.dirname(__file__))


@pytest.fixture(scope="session")
def data_dir():
    yield Path(Path(__file__).parent / "data").absolute()


@pytest.fixture(scope="function")
def output_dir(tmp_path):
    outdir = tmp_path / "output"
    outdir.mkdir(exist_ok=True)
    yield outdir


@pytest.fixture(scope="function")
def output_obj(output_dir):
    return output.DirOutput(path=output_dir)


@pytest.fixture(scope="session")
def root_dir():
    yield os.path.abspath(os.path.dirname(os.path.dirname(__file__)))


@pytest.fixture(scope="session")
def package_dir(root_dir):
    yield os.path.join(root_dir, "urllc_allocator")


## Scenarios


@pytest.fixture(scope="function")
def rng():
    return channel.make_rng(20190401)


@pytest.fixture(scope="session")
def template():
    """Default constants without users"""
    return channel.ScenarioConfig()


@pytest.fixture(scope="session", params=[1, 2, 4], ids=lambda k: f"K{k}")
def symmetric_scenario(template, request):
    return channel.make_symmetric(template, request.param)


@pytest.fixture(scope="session")
def symmetric4(template):
    return channel.make_symmetric(template, 4)


@pytest.fixture(scope="session")
def road3(template):
    """Three users at fixed distances on the road"""
    users = [channel.User(d, 0.2) for d in (60.0, 140.0, 230.0)]
    return template.with_users(users, seed=3)


## Configurations


@pytest.fixture(scope="function")
def cfg_fast(data_dir):
    """Small, quick configuration for the command tests"""
    with open(data_dir / "fast_config.yml", "r") as fo:
        return yaml.safe_load(fo)


@pytest.fixture(scope="function")
def cfg_fast_path(data_dir):
    yield data_dir / "fast_config.yml"


@pytest.fixture(scope="function")
def cfg_road_path(data_dir):
    yield data_dir / "road_config.yml"


@pytest.fixture(scope="function")
def cfg_stream(cfg_fast) -> StringIO:
    yield StringIO(yaml.dump(cfg_fast))


@pytest.fixture(scope="function")
def g_small():
    """K=3, batch 4 gains for the gradient checks"""
    gen = np.random.Generator(np.random.PCG64(7))
    return gen.gamma(8.0, 1.0, size=(4, 3))
