import math

import numpy as np
import pytest

from mvjump.coefficient_model import builtin_affine, builtin_linear_meanfield, default_taper, lm1
from mvjump.jump_driver import LevyModel

BETA, BETA_BAR = 0.5, 0.25
GROWTH_X = math.exp(BETA)                              # d/dx of the decoupled mean at t = 1
GROWTH_MEAN = math.exp(BETA + BETA_BAR)                # d/dm0 of the coupled mean at t = 1
LIONS_ORACLE = GROWTH_MEAN - GROWTH_X                  # Lions tangent at t = 1


def scheme_growth(rate: float, h: float, T: float = 1.0) -> float:
    """Euler counterpart of exp(rate * T)."""
    return (1.0 + rate * h) ** int(round(T / h))


@pytest.fixture
def plain_lm1():
    return lm1(0.5)


@pytest.fixture
def tapered_lm1():
    return lm1(0.5, taper_start=default_taper())


@pytest.fixture
def levy_half():
    return LevyModel(alpha=0.5)


def zero_model(d: int = 1):
    z = np.zeros((d, d))
    return builtin_affine(z, z, np.zeros(d), z, alpha=0.5)


def measure_free_lm(beta: float = 0.5, alpha: float = 0.5, taper=None):
    return builtin_linear_meanfield(beta, 0.0, 1.0, 0.0, 0.0, alpha=alpha, taper_start=taper)


def pytest_terminal_summary(terminalreporter):
    import sys
    module = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    report = getattr(module, "REPORT", None)
    if report:
        terminalreporter.section("acceptance criteria")
        for criterion in sorted(report):
            terminalreporter.write_line(report[criterion])
