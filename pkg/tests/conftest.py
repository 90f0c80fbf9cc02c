import functools

import numpy as np
import pytest

from graspforge.scenario import build_canonical


@functools.lru_cache(maxsize=None)
def canonical(template, seed=0):
    return build_canonical(template, seed)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def random_rotations(rng, n):
    from graspforge.geom import quat_to_matrix
    q = rng.normal(size=(n, 4))
    return quat_to_matrix(q / np.linalg.norm(q, axis=1, keepdims=True))


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE] = []


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(lines):
        terminalreporter.write_line(line)
