import numpy as np
import pytest
import torch

from gaitmae.skeleton import Activity, SkeletonSequence

torch.set_num_threads(1)


def make_seq(data, subject="S0", visit="v0", activity=Activity.TreadmillFixed, fps=30.0):
    data = np.asarray(data, dtype=np.float64)
    if data.shape[-1] == 3:
        data = np.concatenate([data, np.ones(data.shape[:-1] + (1,))], axis=-1)
    return SkeletonSequence(subject, visit, activity, data, fps)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def random_seq(rng):
    return make_seq(rng.normal(size=(40, 26, 3)))


ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
