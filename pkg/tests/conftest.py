import numpy as np
import pytest

from mondeq_cert.netio import MonDEQ, generate_network


def identity_net(K=2):
    """W = 0, U = I, u = 0, C = I: F(x) = ReLU(x)."""
    return MonDEQ(np.zeros((K, K)), np.eye(K), np.zeros(K), np.eye(K), np.zeros(K), 1.0)


def scalar_net(c=-1.0):
    """z = ReLU(0.5 z + x), F = 3 z + c; slope 6 where active."""
    return MonDEQ([[0.5]], [[1.0]], [0.0], [[3.0]], [c], 0.5)


@pytest.fixture
def ident():
    return identity_net()


@pytest.fixture
def scalar():
    return scalar_net()


@pytest.fixture
def small_net():
    return generate_network(3, 5, 3, m=1.0, seed=11)


# one line per acceptance criterion, printed at the end of the session
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
