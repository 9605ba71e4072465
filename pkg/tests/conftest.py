from __future__ import annotations

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from causalcredit.core import dataset_from_arrays

# every randomized property runs at least 200 cases
settings.register_profile("thorough", max_examples=200, deadline=None, derandomize=True,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("thorough")


def random_dataset(rng: np.random.Generator, state_dims=(2, 3), action_counts=(3, 2),
                   episodes=2, length=3):
    """Small well-formed dataset with contiguous episodes and terminal last steps."""
    rows = episodes * length
    ep = np.repeat(np.arange(episodes), length)
    t = np.tile(np.arange(length), episodes)
    ds_total = sum(state_dims)
    s = rng.normal(size=(rows, ds_total))
    s_next = rng.normal(size=(rows, ds_total))
    a = np.stack([rng.integers(0, c, rows) for c in action_counts], axis=1)
    R = rng.normal(size=rows)
    done = t == length - 1
    return dataset_from_arrays(ep, t, s, a, R, s_next, done, state_dims, action_counts,
                               env="test", tier="random", seed=0)


@pytest.fixture
def small_dataset():
    return random_dataset(np.random.default_rng(0))


# -- acceptance summary -------------------------------------------------------

CRITERIA: dict[int, str] = {}


def record_criterion(number: int, name: str, passed: bool, detail: str) -> None:
    """Remember one acceptance verdict; printed again at the end of the session."""
    line = f"C{number:<2d} {'PASS' if passed else 'FAIL'}  {name}: {detail}"
    CRITERIA[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[k])
