from __future__ import annotations

import abc
from dataclasses import dataclass, asdict
from typing import Protocol, runtime_checkable

import numpy as np

from rlmia.core import Trajectory, Transition


@dataclass(frozen=True)
class EnvSpec:
    """Public description of an environment: dimensions, action box and horizon."""

    name: str
    state_dim: int
    action_dim: int
    action_low: tuple[float, ...]
    action_high: tuple[float, ...]
    t_max: int

    def __post_init__(self):
        object.__setattr__(self, "action_low", tuple(float(x) for x in self.action_low))
        object.__setattr__(self, "action_high", tuple(float(x) for x in self.action_high))
        if self.state_dim < 1 or self.action_dim < 1:
            raise ValueError("state_dim and action_dim must be positive")
        if len(self.action_low) != self.action_dim or len(self.action_high) != self.action_dim:
            raise ValueError("action bounds must have action_dim components")
        if not all(lo < hi for lo, hi in zip(self.action_low, self.action_high)):
            raise ValueError("action_low must be strictly below action_high componentwise")
        if self.t_max < 1:
            raise ValueError("t_max must be at least 1")

    @property
    def low(self) -> np.ndarray:
        return np.asarray(self.action_low, dtype=np.float64)

    @property
    def high(self) -> np.ndarray:
        return np.asarray(self.action_high, dtype=np.float64)

    def clip_action(self, action) -> np.ndarray:
        a = np.asarray(action, dtype=np.float64).reshape(-1)
        if a.shape[0] != self.action_dim:
            raise ValueError(f"action has {a.shape[0]} components, expected {self.action_dim}")
        return np.clip(a, self.low, self.high)

    def with_t_max(self, t_max: int) -> "EnvSpec":
        return EnvSpec(self.name, self.state_dim, self.action_dim,
                       self.action_low, self.action_high, int(t_max))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["action_low"] = list(self.action_low)
        d["action_high"] = list(self.action_high)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "EnvSpec":
        return cls(
            name=str(d["name"]),
            state_dim=int(d["state_dim"]),
            action_dim=int(d["action_dim"]),
            action_low=tuple(d["action_low"]),
            action_high=tuple(d["action_high"]),
            t_max=int(d["t_max"]),
        )

    def compatible_with(self, other: "EnvSpec") -> bool:
        """Same task and shapes; the horizon is allowed to differ."""
        return (
            self.name == other.name
            and self.state_dim == other.state_dim
            and self.action_dim == other.action_dim
            and self.action_low == other.action_low
            and self.action_high == other.action_high
        )


# Dimensions of the MuJoCo tasks; only reachable through the external adapter.
HOPPER_V2 = EnvSpec("Hopper-v2", 11, 3, (-1.0,) * 3, (1.0,) * 3, 1000)
HALFCHEETAH_V2 = EnvSpec("HalfCheetah-v2", 17, 6, (-1.0,) * 6, (1.0,) * 6, 1000)


class EnvironmentStateError(RuntimeError):
    """Raised on step() before reset() or after the episode has terminated."""


class Environment(abc.ABC):
    """Seeded episodic environment.

    Subclasses implement ``_reset`` and ``_step``; the base class owns the
    step counter and the horizon truncation so every environment ends an
    episode at ``spec.t_max`` at the latest.
    """

    spec: EnvSpec

    def __init__(self):
        self._t = 0
        self._done = True

    @property
    def steps_taken(self) -> int:
        return self._t

    def reset(self, seed: int) -> np.ndarray:
        self._t = 0
        self._done = False
        return np.asarray(self._reset(int(seed)), dtype=np.float64)

    def step(self, action) -> tuple[np.ndarray, float, bool]:
        if self._done:
            raise EnvironmentStateError("step() called on a finished episode; call reset() first")
        a = self.spec.clip_action(action)
        next_state, reward, absorbing = self._step(a)
        self._t += 1
        terminal = bool(absorbing) or self._t >= self.spec.t_max
        self._done = terminal
        return np.asarray(next_state, dtype=np.float64), float(reward), terminal

    def close(self) -> None:
        pass

    @abc.abstractmethod
    def _reset(self, seed: int) -> np.ndarray:
        ...

    @abc.abstractmethod
    def _step(self, action: np.ndarray) -> tuple[np.ndarray, float, bool]:
        """Advance one step; return ``(next_state, reward, absorbing)``."""


@runtime_checkable
class Policy(Protocol):
    def act(self, state: np.ndarray) -> np.ndarray:
        ...


def rollout(env: Environment, policy: Policy, seed: int, explore_noise: float = 0.0,
            noise_rng: np.random.Generator | None = None,
            noise_correlation: float = 0.0) -> Trajectory:
    """Run one episode from ``env.reset(seed)``.

    Zero-mean Gaussian noise of scale ``explore_noise`` is added to each policy
    action before clamping. ``noise_correlation`` in [0, 1) makes the noise an
    AR(1) (discretised Ornstein-Uhlenbeck) process with the same marginal
    scale; 0 gives independent draws. Unless a generator is supplied, the
    noise stream is derived from ``seed`` so the trajectory is reproducible
    from it.
    """
    if explore_noise < 0:
        raise ValueError("explore_noise must be non-negative")
    if not 0.0 <= noise_correlation < 1.0:
        raise ValueError("noise_correlation must lie in [0, 1)")
    innov = np.sqrt(1.0 - noise_correlation**2)
    eps = None
    spec = env.spec
    if noise_rng is None and explore_noise > 0:
        noise_rng = np.random.default_rng([int(seed), 0x5EED])
    state = env.reset(seed)
    states, actions, rewards, next_states, terminals = [], [], [], [], []
    terminal = False
    while not terminal:
        a = np.asarray(policy.act(state), dtype=np.float64).reshape(-1)
        if a.shape[0] != spec.action_dim:
            raise ValueError(f"policy produced {a.shape[0]} action components, expected {spec.action_dim}")
        if explore_noise > 0:
            draw = noise_rng.normal(0.0, explore_noise, size=a.shape)
            eps = draw if eps is None else noise_correlation * eps + innov * draw
            a = a + eps
        a = spec.clip_action(a)
        next_state, reward, terminal = env.step(a)
        states.append(state)
        actions.append(a)
        rewards.append(reward)
        next_states.append(next_state)
        terminals.append(terminal)
        state = next_state
    return Trajectory.from_arrays(states, actions, rewards, next_states, terminals, seed=int(seed))


class RandomPolicy:
    """Uniform random actions inside the action box; seeded, stateful."""

    def __init__(self, spec: EnvSpec, seed: int = 0):
        self.spec = spec
        self._rng = np.random.default_rng(seed)

    def act(self, state):
        return self._rng.uniform(self.spec.low, self.spec.high)


class ConstantPolicy:
    def __init__(self, action):
        self.action = np.asarray(action, dtype=np.float64)

    def act(self, state):
        return self.action.copy()


__all__ = [
    "ConstantPolicy",
    "EnvSpec",
    "Environment",
    "EnvironmentStateError",
    "HALFCHEETAH_V2",
    "HOPPER_V2",
    "Policy",
    "RandomPolicy",
    "rollout",
]
