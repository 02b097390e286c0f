"""Data oracle: a DDPG-trained behaviour policy and the batch collector built on it."""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, asdict
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from rlmia.checkpoints import load_archive, save_archive
from rlmia.core import ReplayBuffer, SourceTag, Transition, TrajectoryBatch
from rlmia.envs.base import EnvSpec, Environment, Policy, rollout
from rlmia.nets import ActionScaler, load_numpy_state, mlp, soft_update, state_dict_to_numpy, torch_seed

logger = logging.getLogger(__name__)


class TrainingDivergedError(RuntimeError):
    """Raised when a loss or an evaluation return stops being finite."""


@dataclass
class DDPGConfig:
    hidden: tuple[int, ...] = (64, 64)
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    gamma: float = 0.99
    tau: float = 0.005
    explore_noise: float = 0.1
    warmup_steps: int = 1000
    batch_size: int = 64
    buffer_capacity: int = 1_000_000
    eval_episodes: int = 20

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)


class Actor(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, hidden: tuple[int, ...]):
        super().__init__()
        self.net = mlp(state_dim, action_dim, hidden)

    def forward(self, s):
        return torch.tanh(self.net(s))


class Critic(nn.Module):
    def __init__(self, state_dim: int, action_dim: int, hidden: tuple[int, ...]):
        super().__init__()
        self.net = mlp(state_dim + action_dim, 1, hidden)

    def forward(self, s, a):
        return self.net(torch.cat([s, a], dim=-1)).squeeze(-1)


class ActorPolicy:
    """Deterministic policy backed by a tanh-squashed actor network."""

    kind = "ddpg-actor"

    def __init__(self, actor: Actor, spec: EnvSpec, hidden: tuple[int, ...]):
        self.actor = actor.eval()
        self.spec = spec
        self.hidden = tuple(hidden)
        self._scaler = ActionScaler(spec.low, spec.high)

    @torch.no_grad()
    def act(self, state) -> np.ndarray:
        s = torch.as_tensor(np.asarray(state, dtype=np.float32)).unsqueeze(0)
        u = self.actor(s)[0].double().numpy()
        return self._scaler.from_unit(u)

    def save(self, path):
        return save_archive(path, self.kind, state_dict_to_numpy(self.actor, "actor"),
                            {"config": {"hidden": list(self.hidden)}}, env_spec=self.spec)

    @classmethod
    def load(cls, path, expected_spec: EnvSpec | None = None) -> "ActorPolicy":
        meta, arrays = load_archive(path, cls.kind, expected_spec)
        spec = EnvSpec.from_dict(meta["env_spec"])
        hidden = tuple(meta["config"]["hidden"])
        actor = Actor(spec.state_dim, spec.action_dim, hidden)
        load_numpy_state(actor, arrays, "actor")
        return cls(actor, spec, hidden)


def train_behavior_policy(env: Environment, total_steps: int, config: DDPGConfig | None = None,
                          seed: int = 0) -> ActorPolicy:
    """Train a deterministic actor-critic (DDPG) behaviour policy by interacting with ``env``.

    The first ``warmup_steps`` environment steps use uniform random actions;
    after that each step acts with the actor plus Gaussian noise and performs
    one critic and one actor update from a uniformly sampled minibatch.
    ``total_steps=0`` returns the randomly initialised actor.
    """
    config = config or DDPGConfig()
    spec = env.spec
    if total_steps < 0:
        raise ValueError("total_steps must be non-negative")
    if 0 < total_steps < config.warmup_steps:
        raise ValueError(f"total_steps ({total_steps}) must cover the {config.warmup_steps} warmup steps")
    scaler = ActionScaler(spec.low, spec.high)
    rng = np.random.default_rng([seed, 1])

    with torch_seed(seed):
        actor = Actor(spec.state_dim, spec.action_dim, config.hidden)
        critic = Critic(spec.state_dim, spec.action_dim, config.hidden)
        actor_t = copy.deepcopy(actor)
        critic_t = copy.deepcopy(critic)
        actor_opt = torch.optim.Adam(actor.parameters(), lr=config.actor_lr)
        critic_opt = torch.optim.Adam(critic.parameters(), lr=config.critic_lr)
        buffer = ReplayBuffer(config.buffer_capacity, seed=seed)

        episode = 0
        state = env.reset(_episode_seed(seed, episode))
        for step in range(total_steps):
            if step < config.warmup_steps:
                u = rng.uniform(-1.0, 1.0, size=spec.action_dim)
            else:
                with torch.no_grad():
                    u = actor(torch.as_tensor(state, dtype=torch.float32).unsqueeze(0))[0].double().numpy()
                u = np.clip(u + rng.normal(0.0, config.explore_noise, size=u.shape), -1.0, 1.0)
            action = scaler.from_unit(u)
            next_state, reward, terminal = env.step(action)
            absorbing = terminal and env.steps_taken < spec.t_max
            # actions are buffered in unit space; the absorbing flag drives bootstrapping
            buffer.add(Transition(state, u, reward, next_state, absorbing))
            state = next_state
            if terminal:
                episode += 1
                state = env.reset(_episode_seed(seed, episode))

            if step >= config.warmup_steps:
                batch = buffer.sample_arrays(config.batch_size)
                s = torch.from_numpy(batch.states)
                a = torch.from_numpy(batch.actions)
                r = torch.from_numpy(batch.rewards)
                s2 = torch.from_numpy(batch.next_states)
                not_done = 1.0 - torch.from_numpy(batch.terminals)
                with torch.no_grad():
                    target = r + not_done * config.gamma * critic_t(s2, actor_t(s2))
                critic_loss = F.mse_loss(critic(s, a), target)
                critic_opt.zero_grad()
                critic_loss.backward()
                critic_opt.step()
                actor_loss = -critic(s, actor(s)).mean()
                actor_opt.zero_grad()
                actor_loss.backward()
                actor_opt.step()
                soft_update(critic_t, critic, config.tau)
                soft_update(actor_t, actor, config.tau)
                if not torch.isfinite(critic_loss):
                    raise TrainingDivergedError(f"critic loss became {critic_loss.item()} at step {step}")

    policy = ActorPolicy(actor, spec, config.hidden)
    if total_steps > 0:
        returns = [sum(t.rewards()) for t in
                   (rollout(env, policy, _eval_seed(seed, i)) for i in range(config.eval_episodes))]
        mean_ret = float(np.mean(returns))
        if not np.isfinite(mean_ret):
            raise TrainingDivergedError(f"evaluation return is {mean_ret} after {total_steps} steps")
        logger.info("behaviour policy trained: %d steps, eval return %.3f", total_steps, mean_ret)
    return policy


def _episode_seed(seed: int, episode: int) -> int:
    # training episodes live far away from the seed ranges used for data collection
    return 10**9 + seed * 100_003 + episode


def _eval_seed(seed: int, i: int) -> int:
    return 2 * 10**9 + seed * 1009 + i


def collect_batch(env: Environment, policy: Policy | Sequence[Policy], n_trajectories: int,
                  noise: float, seed_base: int, tag: SourceTag | str = SourceTag.MEMBER,
                  noise_correlation: float = 0.0) -> TrajectoryBatch:
    """Roll out ``n_trajectories`` noisy episodes with reset seeds ``seed_base + i``.

    Passing a sequence of policies mixes them round-robin across trajectories.
    """
    if n_trajectories < 1:
        raise ValueError("n_trajectories must be at least 1")
    policies = list(policy) if isinstance(policy, (list, tuple)) else [policy]
    seeds = [seed_base + i for i in range(n_trajectories)]
    trajs = [rollout(env, policies[i % len(policies)], s, explore_noise=noise,
                     noise_correlation=noise_correlation)
             for i, s in enumerate(seeds)]
    return TrajectoryBatch(tuple(trajs), SourceTag(tag), tuple(seeds))


def config_dict(config: DDPGConfig) -> dict:
    d = asdict(config)
    d["hidden"] = list(config.hidden)
    return d
