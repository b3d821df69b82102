import numpy as np
import pytest

from anosovlab.enumeration import enumerate_ball
from anosovlab.groups import preset_anosov_family, preset_schottky_sl2


def random_sl(d, rng, log_cond=3.0):
    """Random element of SL_d with condition number at most e^(2 log_cond)."""
    q1, _ = np.linalg.qr(rng.standard_normal((d, d)))
    q2, _ = np.linalg.qr(rng.standard_normal((d, d)))
    v = rng.uniform(-log_cond, log_cond, size=d)
    v -= v.mean()
    g = q1 @ np.diag(np.exp(v)) @ q2
    if np.linalg.det(g) < 0:
        g[:, 0] *= -1
    return g


def random_orthogonal(d, rng):
    q, r = np.linalg.qr(rng.standard_normal((d, d)))
    return q * np.sign(np.diag(r))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def schottky():
    return preset_schottky_sl2(3.0, 2)


@pytest.fixture(scope="session")
def sl2_table(schottky):
    return enumerate_ball(schottky, 8)


@pytest.fixture(scope="session")
def sl3_gens():
    return preset_anosov_family(3)


@pytest.fixture(scope="session")
def sl3_table(sl3_gens):
    return enumerate_ball(sl3_gens, 9)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
