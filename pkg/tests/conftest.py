import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

from mbrec.dataio import RawEvent  # noqa: E402
from mbrec.runner.synthetic import SyntheticSpec, generate_dataset  # noqa: E402


def random_edges(rng, num_users, num_items, n):
    cells = rng.choice(num_users * num_items, size=n, replace=False)
    return np.stack([cells // num_items, cells % num_items], axis=1)


def as_lists(params):
    return {n: v.tolist() for n, v in params.items()}


def random_events(rng, n, users=30, items=40, behaviors=("click", "cart", "purchase"),
                  horizon=1000):
    return [RawEvent(f"u{rng.integers(users)}", f"i{rng.integers(items)}",
                     behaviors[rng.integers(len(behaviors))], int(rng.integers(horizon)))
            for _ in range(n)]


@pytest.fixture(scope="session")
def small_dataset():
    spec = SyntheticSpec(num_users=60, num_items=80, target_per_user=6)
    return generate_dataset(spec, seed=3)


# acceptance lines collected by tests/test_acceptance.py, echoed after the run
ACCEPT_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPT_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPT_LINES):
            terminalreporter.write_line(line)
