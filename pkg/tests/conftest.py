from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("pvcgn", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("pvcgn")


@pytest.fixture(scope="session")
def synth_small():
    """Six stations, four days: cheap enough for most module tests."""
    from pvcgn.synthetic import gen_synthetic

    return gen_synthetic(6, 4, seed=3)


@pytest.fixture(scope="session")
def tiny_graphs():
    from pvcgn.train import random_graphs

    return random_graphs(5, np.random.default_rng(11))


_CRITERIA: dict[tuple[int, str], str] = {}


@pytest.fixture
def criterion(request):
    """Record one acceptance criterion: PASS if the test body finishes, FAIL otherwise."""
    state = {}

    def start(number: int, title: str) -> None:
        state["number"], state["title"] = number, title

    yield start
    if "number" in state:
        failed = request.node.rep_call.failed if hasattr(request.node, "rep_call") else True
        line = f"{'FAIL' if failed else 'PASS'} criterion {state['number']:2d}: {state['title']}"
        _CRITERIA[(state["number"], state["title"])] = line
        print(line)


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for key in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[key])
