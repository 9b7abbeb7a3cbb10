import dataclasses

import numpy as np
import pytest

from habitreach.arm import STANDARD_POSTURE, ArmModel, default_arm
from habitreach.templates import generate_library


def passive_free_at(model: ArmModel, q) -> ArmModel:
    """Copy of ``model`` whose muscles sit at l = 0.22 l0 at posture ``q``.

    The passive term vanishes exactly there, so with no activation and no
    gravity nothing pushes on the joints.
    """
    q = np.asarray(q, dtype=float)
    muscles = tuple(
        dataclasses.replace(m, rest_length=0.22 * m.l0 + float(np.dot(m.moment_arms, q)))
        for m in model.muscles)
    return dataclasses.replace(model, muscles=muscles, gravity=0.0)


@pytest.fixture(scope="session")
def arm():
    return default_arm()


@pytest.fixture(scope="session")
def short_arm(arm):
    """Default arm with a 0.1 s movement, for cheap simulations."""
    return arm.with_integrator(duration=0.1)


@pytest.fixture(scope="session")
def quiet_arm(arm):
    return passive_free_at(arm, STANDARD_POSTURE)


@pytest.fixture(scope="session")
def library(arm):
    return generate_library(arm, 50, seed=7)


@pytest.fixture(scope="session")
def small_library(short_arm):
    return generate_library(short_arm, 12, seed=3)


# one line per acceptance criterion, filled in by test_acceptance.py
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
