import numpy as np
import pytest

from qudit_readout.spin import PhysicalParams, QuadrupoleTensor, SpinQuantum, build_extended_hamiltonian
from qudit_readout.transitions import model_matrices


@pytest.fixture(scope="session")
def sb_params():
    return PhysicalParams.sb123()


@pytest.fixture(scope="session")
def sb_tensor():
    return QuadrupoleTensor.sb123()


@pytest.fixture(scope="session")
def sq8():
    return SpinQuantum(8)


@pytest.fixture(scope="session")
def sb_system(sb_params, sb_tensor, sq8):
    return build_extended_hamiltonian(sb_params, sb_tensor, sq8)


@pytest.fixture(scope="session")
def sb_matrices(sb_params, sb_tensor, sq8):
    return model_matrices(sb_params, sb_tensor, sq8)


@pytest.fixture(scope="session")
def sb_t_qnd(sb_matrices):
    return sb_matrices["t_qnd"]


def random_stochastic(rng, d, diag_weight=5.0):
    """Diagonally heavy random column-stochastic matrix."""
    t = rng.random((d, d)) + diag_weight * d * np.eye(d)
    return t / t.sum(axis=0, keepdims=True)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import REPORT
    except ImportError:
        return
    if REPORT:
        terminalreporter.section("acceptance criteria")
        for line in REPORT:
            terminalreporter.write_line(line)
