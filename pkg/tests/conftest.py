import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from tparafac2.model import Parafac2Factors
from tparafac2.tensor import SliceStack

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def random_factors(rng, I, J, K, R, nonneg_C=True):
    """Unconstrained random factors; ``J`` is an int or a list of K ints."""
    Js = [J] * K if np.isscalar(J) else list(J)
    C = rng.uniform(0.5, 2.0, size=(K, R)) if nonneg_C else rng.standard_normal((K, R))
    return Parafac2Factors(rng.standard_normal((I, R)), [rng.standard_normal((j, R)) for j in Js], C)


def random_stack(rng, I, J, K):
    Js = [J] * K if np.isscalar(J) else list(J)
    return SliceStack([rng.standard_normal((I, j)) for j in Js])


def orthonormal(rng, n, r):
    q, _ = np.linalg.qr(rng.standard_normal((n, r)))
    return q


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# One line per acceptance criterion, printed after the run.
ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
