import numpy as np
import pytest
import torch

from rlmia.core import SourceTag, Trajectory, TrajectoryBatch

torch.set_num_threads(1)


def random_trajectory(rng, T, state_dim=2, action_dim=2, seed=None, terminal=False) -> Trajectory:
    """Chain-consistent trajectory with random float32-representable values."""
    states = rng.normal(size=(T + 1, state_dim)).astype(np.float32)
    actions = rng.uniform(-1, 1, size=(T, action_dim)).astype(np.float32)
    rewards = rng.normal(size=T).astype(np.float32)
    terms = np.zeros(T, dtype=bool)
    terms[-1] = terminal
    return Trajectory.from_arrays(states[:-1], actions, rewards, states[1:], terms, seed=seed)


def random_batch(rng, lengths, tag=SourceTag.MEMBER, seed_base=0, **kw) -> TrajectoryBatch:
    trajs = tuple(random_trajectory(rng, T, seed=seed_base + i, **kw) for i, T in enumerate(lengths))
    return TrajectoryBatch(trajs, tag, tuple(seed_base + i for i in range(len(lengths))))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
