import numpy as np
import pytest

from devinr.inr import NetworkConfig, init_network


@pytest.fixture
def small_config():
    return NetworkConfig(d=2, latent_dim=4, hidden_dim=8, n_layers=3, omega0=2.0, s0=1.0)


@pytest.fixture
def small_net(small_config):
    return init_network(small_config, 7, dtype=np.float64)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
