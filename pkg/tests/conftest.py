import sys

import numpy as np
import pytest

from purikit import sampler


def random_density(rng, n=None, rank=4):
    """Hilbert-Schmidt-like random states from complex Ginibre matrices."""
    shape = (4, rank) if n is None else (n, 4, rank)
    g = rng.normal(size=shape) + 1j * rng.normal(size=shape)
    rho = g @ np.conj(np.swapaxes(g, -1, -2))
    return rho / np.trace(rho, axis1=-2, axis2=-1)[..., None, None]


def random_unitary(rng, d):
    z = (rng.normal(size=(d, d)) + 1j * rng.normal(size=(d, d))) / np.sqrt(2)
    q, r = np.linalg.qr(z)
    return q * (np.diag(r) / np.abs(np.diag(r)))


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def small_sample():
    """2000 hit-and-run states, shared across tests."""
    return sampler.bloch_to_density(sampler.sample_chains(2000, seed=11))


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
