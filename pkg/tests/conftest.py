from __future__ import annotations

import pytest

from latpush.harness import ENV_NAMES, ExperimentConfig, build_stack, make_world

# lines collected by the acceptance tests, printed once at the end of the session
CRITERIA_REPORT: dict = {}


@pytest.fixture(scope="session")
def stack():
    """Default experiment stack (model loaded from, or built into, the model cache)."""
    return build_stack(ExperimentConfig())


@pytest.fixture(scope="session")
def worlds(stack):
    return {name: make_world(name, stack) for name in ENV_NAMES}


@pytest.fixture(scope="session")
def rel_world(stack):
    return make_world("rel", stack)


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA_REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA_REPORT):
        terminalreporter.write_line(CRITERIA_REPORT[k])
