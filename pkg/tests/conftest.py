import numpy as np
import pytest

from dglab.harness.presets import label_coupled_preset, label_shift_preset
from dglab.scm import build_scm, sample_domain


@pytest.fixture(scope="session")
def shift_scm():
    return build_scm(label_shift_preset(0))


@pytest.fixture(scope="session")
def coupled_scm():
    return build_scm(label_coupled_preset(0))


@pytest.fixture(scope="session")
def shift_domains(shift_scm):
    return [sample_domain(shift_scm, e, 400, 1) for e in shift_scm.config.domain_ids]


def linear_encoder(d_x: int, d_z: int, seed: int):
    W = np.random.default_rng([seed, 55]).standard_normal((d_x, d_z))
    return lambda x: np.tanh(x @ W)


def pytest_terminal_summary(terminalreporter):
    from .acceptance_log import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
