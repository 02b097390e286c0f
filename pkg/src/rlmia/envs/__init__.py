from rlmia.envs.base import (
    HALFCHEETAH_V2,
    HOPPER_V2,
    ConstantPolicy,
    EnvSpec,
    Environment,
    EnvironmentStateError,
    Policy,
    RandomPolicy,
    rollout,
)
from rlmia.envs.point_reach import GoalSeekingPolicy, PointReach2D, point_reach_spec

_BUILTIN = {"PointReach2D": PointReach2D}


def make_env(name: str, t_max: int = 50, sparse: bool = False) -> Environment:
    """Instantiate a built-in environment by name."""
    try:
        cls = _BUILTIN[name]
    except KeyError:
        raise ValueError(
            f"unknown environment {name!r}; built-ins: {sorted(_BUILTIN)}. "
            "External tasks are reached through rlmia.envs.adapter.ExternalEnvironment."
        ) from None
    return cls(t_max=t_max, sparse=sparse)


__all__ = [
    "ConstantPolicy",
    "EnvSpec",
    "Environment",
    "EnvironmentStateError",
    "GoalSeekingPolicy",
    "HALFCHEETAH_V2",
    "HOPPER_V2",
    "PointReach2D",
    "Policy",
    "RandomPolicy",
    "make_env",
    "point_reach_spec",
    "rollout",
]
