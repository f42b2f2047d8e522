from __future__ import annotations

import numpy as np
import pytest

from prycecap.instance import Firm, MarketInstance, symmetric_uniform
from prycecap.mechanism import DirectMechanism
from prycecap.probkit import ParetoWeight, Uniform, ValueModel
from prycecap.pryce_cap import PryceCap

ROOT_TWO_MINUS_SQRT3 = 2.0 - np.sqrt(3.0)


@pytest.fixture(scope="session")
def duopoly():
    """Two firms, iid uniform values and types, unit fixed-cost scale, full weights."""
    return symmetric_uniform(2, kappa=1.0)


@pytest.fixture(scope="session")
def duopoly_mech(duopoly):
    return DirectMechanism(duopoly)


@pytest.fixture(scope="session")
def duopoly_cap(duopoly_mech):
    return PryceCap(duopoly_mech)


def single_firm(weight: str = "full", kappa: float = 0.0) -> MarketInstance:
    u = Uniform(0.0, 1.0)
    weights = {"full": ParetoWeight.full(u), "zero": ParetoWeight.zero(),
               "cutoff": ParetoWeight.cutoff(u, 0.5)}
    return MarketInstance((Firm(u, weights[weight], kappa),), ValueModel.independent([u]))


@pytest.fixture(scope="session")
def monopolist():
    return single_firm()


@pytest.fixture(scope="session")
def monopolist_mech(monopolist):
    return DirectMechanism(monopolist)


ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def record_criterion():
    """Log one PASS/FAIL line per acceptance criterion (shown in the terminal summary)."""

    def record(number: int, passed: bool, detail: str) -> None:
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE[number] = line
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
