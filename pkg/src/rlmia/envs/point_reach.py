from __future__ import annotations

import numpy as np

from rlmia.envs.base import EnvSpec, Environment

GOAL = np.array([1.0, 1.0])
DT = 0.1
GOAL_RADIUS = 0.05
ARENA = 2.0
INIT_HALF_WIDTH = 0.5


def point_reach_spec(t_max: int = 50) -> EnvSpec:
    return EnvSpec("PointReach2D", 2, 2, (-1.0, -1.0), (1.0, 1.0), int(t_max))


class PointReach2D(Environment):
    """Planar point mass steered toward a fixed goal at (1, 1).

    ``s' = clip(s + dt * a, [-2, 2]^2)``. The dense reward is the negative
    distance to the goal after the move; with ``sparse=True`` it is 1 on
    entering the goal disk and 0 otherwise. Entering the goal disk is absorbing.
    """

    def __init__(self, t_max: int = 50, sparse: bool = False):
        super().__init__()
        self.spec = point_reach_spec(t_max)
        self.sparse = bool(sparse)
        self._s = np.zeros(2)

    def _reset(self, seed: int) -> np.ndarray:
        rng = np.random.default_rng(seed)
        self._s = rng.uniform(-INIT_HALF_WIDTH, INIT_HALF_WIDTH, size=2)
        return self._s.copy()

    def _step(self, action: np.ndarray):
        s_next = np.clip(self._s + DT * action, -ARENA, ARENA)
        dist = float(np.linalg.norm(s_next - GOAL))
        absorbing = dist < GOAL_RADIUS
        if self.sparse:
            reward = 1.0 if absorbing else 0.0
        else:
            reward = -dist
        self._s = s_next
        return s_next.copy(), reward, absorbing


class GoalSeekingPolicy:
    """Scripted controller: head for the goal at full speed (saturated per axis)."""

    def __init__(self, gain: float = 10.0):
        self.gain = gain

    def act(self, state):
        return np.clip(self.gain * (GOAL - np.asarray(state, dtype=np.float64)), -1.0, 1.0)
