"""Transitions, trajectories, the replay buffer and return computations."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

STORAGE_DTYPE = np.float32


class SourceTag(str, enum.Enum):
    MEMBER = "member"
    NONMEMBER = "nonmember"
    MODEL_OUTPUT = "model_output"


class TrajectoryError(ValueError):
    """Raised when a trajectory or batch violates its structural invariants."""


def _as_vector(x) -> np.ndarray:
    arr = np.array(x, dtype=STORAGE_DTYPE, copy=True).reshape(-1)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool = False

    def __post_init__(self):
        object.__setattr__(self, "state", _as_vector(self.state))
        object.__setattr__(self, "action", _as_vector(self.action))
        object.__setattr__(self, "next_state", _as_vector(self.next_state))
        object.__setattr__(self, "reward", float(STORAGE_DTYPE(self.reward)))
        object.__setattr__(self, "terminal", bool(self.terminal))
        if self.state.shape != self.next_state.shape:
            raise TrajectoryError(
                f"state dim {self.state.shape[0]} != next_state dim {self.next_state.shape[0]}"
            )

    def key(self) -> tuple:
        """Hashable identity of the tuple, used for multiset comparisons."""
        return (
            self.state.tobytes(),
            self.action.tobytes(),
            self.reward,
            self.next_state.tobytes(),
            self.terminal,
        )


@dataclass(frozen=True)
class Trajectory:
    """An ordered chain of transitions from reset to termination or truncation."""

    transitions: tuple[Transition, ...]
    seed: int | None = None

    def __post_init__(self):
        object.__setattr__(self, "transitions", tuple(self.transitions))
        if not self.transitions:
            raise TrajectoryError("a trajectory needs at least one transition")

    def __len__(self) -> int:
        return len(self.transitions)

    @property
    def T(self) -> int:
        return len(self.transitions)

    @property
    def initial_state(self) -> np.ndarray:
        return self.transitions[0].state

    def actions(self) -> np.ndarray:
        """Actions as a ``(T, d_A)`` array."""
        return np.stack([t.action for t in self.transitions])

    def states(self) -> np.ndarray:
        return np.stack([t.state for t in self.transitions])

    def rewards(self) -> np.ndarray:
        return np.array([t.reward for t in self.transitions], dtype=np.float64)

    def validate(self, t_max: int | None = None, state_dim: int | None = None,
                 action_dim: int | None = None, chain: bool = True) -> None:
        """Check chain consistency, terminal placement and dimensions.

        ``chain=False`` checks dimensions only (for shuffled, synthetic sequences).
        """
        if t_max is not None and not 1 <= self.T <= t_max:
            raise TrajectoryError(f"length {self.T} outside [1, {t_max}]")
        for i, tr in enumerate(self.transitions):
            if state_dim is not None and tr.state.shape[0] != state_dim:
                raise TrajectoryError(f"transition {i}: state dim {tr.state.shape[0]} != {state_dim}")
            if action_dim is not None and tr.action.shape[0] != action_dim:
                raise TrajectoryError(f"transition {i}: action dim {tr.action.shape[0]} != {action_dim}")
            if not chain:
                continue
            if tr.terminal and i != self.T - 1:
                raise TrajectoryError(f"terminal flag set on transition {i} of {self.T}")
            if i + 1 < self.T and not np.array_equal(tr.next_state, self.transitions[i + 1].state):
                raise TrajectoryError(f"chain broken between transitions {i} and {i + 1}")

    @classmethod
    def from_arrays(cls, states, actions, rewards, next_states, terminals, seed=None) -> "Trajectory":
        return cls(
            tuple(
                Transition(s, a, r, ns, d)
                for s, a, r, ns, d in zip(states, actions, rewards, next_states, terminals)
            ),
            seed=seed,
        )


@dataclass(frozen=True)
class TrajectoryBatch:
    """Trajectories from one environment plus the reset seed of each.

    ``decorrelated`` marks batches whose sequences were re-assembled from
    shuffled tuples; they are not state chains and only dimensions are checked.
    """

    trajectories: tuple[Trajectory, ...]
    source_tag: SourceTag
    seed_record: tuple[int, ...] = ()
    decorrelated: bool = False

    def __post_init__(self):
        trajs = tuple(self.trajectories)
        object.__setattr__(self, "trajectories", trajs)
        object.__setattr__(self, "source_tag", SourceTag(self.source_tag))
        seeds = tuple(int(s) for s in self.seed_record) if self.seed_record else tuple(
            -1 if t.seed is None else int(t.seed) for t in trajs
        )
        if len(seeds) != len(trajs):
            raise TrajectoryError(f"{len(seeds)} seeds recorded for {len(trajs)} trajectories")
        object.__setattr__(self, "seed_record", seeds)
        if trajs:
            d_s = trajs[0].transitions[0].state.shape[0]
            d_a = trajs[0].transitions[0].action.shape[0]
            for t in trajs:
                t.validate(state_dim=d_s, action_dim=d_a, chain=not self.decorrelated)

    def __len__(self) -> int:
        return len(self.trajectories)

    def __iter__(self):
        return iter(self.trajectories)

    def by_seed(self) -> dict[int, Trajectory]:
        return dict(zip(self.seed_record, self.trajectories))

    def transitions(self) -> list[Transition]:
        return [tr for t in self.trajectories for tr in t.transitions]

    def retag(self, tag: SourceTag | str) -> "TrajectoryBatch":
        return TrajectoryBatch(self.trajectories, SourceTag(tag), self.seed_record, self.decorrelated)


@dataclass
class TransitionArrays:
    """Column-wise view of a minibatch of transitions."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)


class ReplayBuffer:
    """Flat store of transitions with FIFO eviction and uniform sampling with replacement.

    Trajectory boundaries are forgotten on insertion: the sampling interface only
    ever sees individual tuples. Tuples live in a ring of column arrays so
    minibatch sampling is a fancy-index, not a Python loop.
    """

    def __init__(self, capacity: int, seed: int | None = None):
        if capacity <= 0:
            raise ValueError("capacity must be positive")
        self.capacity = int(capacity)
        self._rng = np.random.default_rng(seed)
        self._cols: TransitionArrays | None = None
        self._alloc = 0
        self._size = 0
        self._head = 0  # slot of the oldest tuple once the ring is full

    def __len__(self) -> int:
        return self._size

    def _grow(self, transition: Transition) -> None:
        new = min(self.capacity, max(1024, 2 * self._alloc))
        d_s, d_a = transition.state.shape[0], transition.action.shape[0]
        cols = TransitionArrays(
            np.empty((new, d_s), STORAGE_DTYPE), np.empty((new, d_a), STORAGE_DTYPE),
            np.empty(new, STORAGE_DTYPE), np.empty((new, d_s), STORAGE_DTYPE),
            np.empty(new, STORAGE_DTYPE),
        )
        if self._cols is not None:
            for name in ("states", "actions", "rewards", "next_states", "terminals"):
                getattr(cols, name)[: self._size] = getattr(self._cols, name)[: self._size]
        self._cols = cols
        self._alloc = new

    def add(self, transition: Transition) -> None:
        if self._size == self._alloc and self._alloc < self.capacity:
            self._grow(transition)
        if self._size < self.capacity:
            i = self._size
            self._size += 1
        else:
            i = self._head
            self._head = (self._head + 1) % self.capacity
        c = self._cols
        c.states[i] = transition.state
        c.actions[i] = transition.action
        c.rewards[i] = transition.reward
        c.next_states[i] = transition.next_state
        c.terminals[i] = transition.terminal

    def insert(self, trajectory: Trajectory) -> "ReplayBuffer":
        for tr in trajectory.transitions:
            self.add(tr)
        return self

    def extend(self, trajectories: Iterable[Trajectory]) -> "ReplayBuffer":
        for t in trajectories:
            self.insert(t)
        return self

    def _order(self) -> np.ndarray:
        return (self._head + np.arange(self._size)) % max(self._size, 1)

    def _rows(self, idx) -> list[Transition]:
        c = self._cols
        return [Transition(c.states[i], c.actions[i], c.rewards[i], c.next_states[i], bool(c.terminals[i]))
                for i in idx]

    def contents(self) -> list[Transition]:
        """Stored tuples, oldest first."""
        return self._rows(self._order()) if self._size else []

    def copy(self) -> "ReplayBuffer":
        other = ReplayBuffer(self.capacity)
        if self._cols is not None:
            other._cols = TransitionArrays(*(getattr(self._cols, n).copy() for n in
                                             ("states", "actions", "rewards", "next_states", "terminals")))
        other._alloc, other._size, other._head = self._alloc, self._size, self._head
        other._rng.bit_generator.state = self._rng.bit_generator.state
        return other

    def _draw(self, n: int) -> np.ndarray:
        if self._size == 0:
            raise RuntimeError("cannot sample from an empty replay buffer")
        if n <= 0:
            raise ValueError("n must be positive")
        return self._rng.integers(0, self._size, size=n)

    def sample(self, n: int) -> list[Transition]:
        return self._rows(self._draw(n))

    def sample_arrays(self, n: int) -> TransitionArrays:
        """Same draw rule as :meth:`sample`, returned as stacked float32 arrays."""
        idx = self._draw(n)
        c = self._cols
        return TransitionArrays(c.states[idx], c.actions[idx], c.rewards[idx],
                                c.next_states[idx], c.terminals[idx])


def buffer_insert(buffer: ReplayBuffer, trajectory: Trajectory) -> ReplayBuffer:
    return buffer.insert(trajectory)


def buffer_sample(buffer: ReplayBuffer, n: int) -> list[Transition]:
    return buffer.sample(n)


def _check_gamma(gamma: float) -> None:
    if not 0.0 <= gamma <= 1.0 or np.isnan(gamma):
        raise ValueError(f"discount factor must lie in [0, 1], got {gamma}")


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """Finite-horizon return ``sum_k gamma**k * rewards[k]``, accumulated backward."""
    _check_gamma(gamma)
    g = 0.0
    for r in reversed(list(rewards)):
        g = float(r) + gamma * g
    return g


def state_value_estimate(trajectories: Sequence[Trajectory], gamma: float) -> float:
    """Monte-Carlo estimate of the start-state value: mean discounted return."""
    if len(trajectories) == 0:
        raise ValueError("need at least one trajectory")
    return float(np.mean([discounted_return(t.rewards(), gamma) for t in trajectories]))


@dataclass(frozen=True)
class DiscountSpec:
    gamma: float = 0.99

    def __post_init__(self):
        _check_gamma(self.gamma)


def tuple_multiset(transitions: Iterable[Transition]) -> dict[tuple, int]:
    counts: dict[tuple, int] = {}
    for tr in transitions:
        k = tr.key()
        counts[k] = counts.get(k, 0) + 1
    return counts


__all__ = [
    "DiscountSpec",
    "ReplayBuffer",
    "SourceTag",
    "Trajectory",
    "TrajectoryBatch",
    "TrajectoryError",
    "Transition",
    "TransitionArrays",
    "buffer_insert",
    "buffer_sample",
    "discounted_return",
    "state_value_estimate",
    "tuple_multiset",
]
