import numpy as np
import pytest

from simce.model import ChannelStats, PilotConfig, UserChannel, WaveModel, hermitian_sqrt


def crandn(rng, *shape):
    return (rng.standard_normal(shape) + 1j * rng.standard_normal(shape)) / np.sqrt(2)


def random_cov(rng, n, rank=None):
    f = crandn(rng, n, rank or n)
    return f @ f.conj().T / (rank or n)


def random_model(rng, n, m, num_layers):
    """Wave model with i.i.d. complex Gaussian transmission matrices."""
    w1 = crandn(rng, n, m) / np.sqrt(n)
    inter = tuple(crandn(rng, n, n) / np.sqrt(n) for _ in range(num_layers - 1))
    return WaveModel(w1=w1, inter_layer=inter)


def make_stats(covs, rho_tau=10.0, length=None, path_losses=None):
    """ChannelStats with the given (unscaled) covariances and ``rho_tau``."""
    k = len(covs)
    length = k if length is None else length
    path_losses = [1.0] * k if path_losses is None else path_losses
    users = tuple(UserChannel(50.0 + 10 * i, float(b), c, hermitian_sqrt(c))
                  for i, (c, b) in enumerate(zip(covs, path_losses)))
    # power = rho_tau / length with unit noise gives the requested rho_tau
    return ChannelStats(users=users, pilot=PilotConfig(rho_tau / length, length, 1.0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


# Acceptance criteria append "PASS/FAIL" lines here; they are repeated in the
# terminal summary so they show up without -s.
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
