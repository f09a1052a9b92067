import sys

import pytest
from hypothesis import HealthCheck, settings

from knowledge_conflict.model import INDUCTION_DOMINANT, ConstructionConsts, build_perfect_solver
from knowledge_conflict.numerics import make_rng
from knowledge_conflict.tasks import build_vocab

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

SOLVER_CONSTS = ConstructionConsts(C=20.0, C1=8.0, C2=8.0, C3=10.0, C4=10.0)


@pytest.fixture(scope="session")
def vocab():
    return build_vocab(8, 32, make_rng(0))


@pytest.fixture(scope="session")
def solver(vocab):
    return build_perfect_solver(vocab, 8, 128, SOLVER_CONSTS, 1)


@pytest.fixture(scope="session")
def ind_solver(vocab):
    return build_perfect_solver(vocab, 8, 128, INDUCTION_DOMINANT, 1)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULT_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
