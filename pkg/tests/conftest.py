import numpy as np
import pytest

from dyadprobit.data_model import validate_dataset


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="运行较慢的参数恢复测试")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: 较慢的参数恢复测试，需要 --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="需要 --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_row(individual, wave, partner=None, outcomes=(0, 1), covariates=(1.0, 0.5)):
    return {
        "individual_id": individual,
        "wave": wave,
        "partner_id": partner,
        "outcomes": list(outcomes),
        "covariates": list(covariates),
    }


@pytest.fixture
def couple_rows():
    """A 与 B 在第 1-2 期为伴侣，第 3 期单身，第 4 期 A 与 C 结伴"""
    return [
        make_row("A", 1, "B", (1, 0)),
        make_row("B", 1, "A", (0, 1)),
        make_row("A", 2, "B", (1, 1)),
        make_row("B", 2, "A", (0, 0)),
        make_row("A", 3, None, (1, 0)),
        make_row("B", 3, None, (0, 1)),
        make_row("A", 4, "C", (0, 0)),
        make_row("C", 4, "A", (1, 1)),
        make_row("D", 1, None, (1, 0)),
        make_row("D", 2, None, (0, 1)),
    ]


@pytest.fixture
def couple_dataset(couple_rows):
    return validate_dataset(couple_rows, ["y_1", "y_2"], ["x_intercept", "x_1"])
