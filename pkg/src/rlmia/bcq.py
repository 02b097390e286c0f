"""Trainer oracle: batch-constrained deep Q-learning on a fixed trajectory batch.

The released target policy is only reachable through :func:`query_output_trajectories`;
attack code never touches the networks defined here.
"""

from __future__ import annotations

import copy
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn
from torch.nn import functional as F

from rlmia.checkpoints import load_archive, save_archive
from rlmia.core import ReplayBuffer, SourceTag, Transition, TrajectoryBatch, discounted_return
from rlmia.envs.base import EnvSpec, Environment, Policy, rollout
from rlmia.nets import (ActionScaler, load_numpy_state, mlp, soft_update, state_dict_to_numpy, state_encoder,
                        torch_seed)
from rlmia.oracle import TrainingDivergedError

logger = logging.getLogger(__name__)


@dataclass
class BcqConfig:
    steps: int = 20_000
    eval_interval: int = 500
    eval_episodes: int = 5
    batch_size: int = 100
    gamma: float = 0.99
    tau: float = 0.005
    lmbda: float = 0.75
    phi: float = 0.05
    n_cand: int = 10
    actor_hidden: tuple[int, ...] = (64, 64)
    critic_hidden: tuple[int, ...] = (64, 64)
    vae_hidden: tuple[int, ...] = (128, 128)
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    vae_lr: float = 1e-3
    kl_weight: float = 0.5
    eval_seed_base: int = 3 * 10**9
    # random Fourier state encoding for low-dimensional tasks; 0 disables it
    state_features: int = 0
    feature_scale: float = 30.0
    feature_seed: int = 0

    def __post_init__(self):
        for name in ("actor_hidden", "critic_hidden", "vae_hidden"):
            setattr(self, name, tuple(int(h) for h in getattr(self, name)))
        if not 0.0 <= self.phi <= 1.0:
            raise ValueError("phi must lie in [0, 1]")
        if self.n_cand < 1:
            raise ValueError("n_cand must be at least 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        for name in ("actor_hidden", "critic_hidden", "vae_hidden"):
            d[name] = list(d[name])
        return d


def _encoder(state_dim, config):
    if config is None:
        return state_encoder(state_dim, 0, 1.0)
    return state_encoder(state_dim, config.state_features, config.feature_scale, config.feature_seed)


class Perturbation(nn.Module):
    """xi(s, a): bounded correction added to a generated action."""

    def __init__(self, state_dim, action_dim, hidden, phi, config=None):
        super().__init__()
        self.enc, d = _encoder(state_dim, config)
        self.net = mlp(d + action_dim, action_dim, hidden)
        self.phi = phi

    def forward(self, s, a):
        return (a + self.phi * torch.tanh(self.net(torch.cat([self.enc(s), a], -1)))).clamp(-1.0, 1.0)


class TwinCritic(nn.Module):
    def __init__(self, state_dim, action_dim, hidden, config=None):
        super().__init__()
        self.enc, d = _encoder(state_dim, config)
        self.q1 = mlp(d + action_dim, 1, hidden)
        self.q2 = mlp(d + action_dim, 1, hidden)

    def forward(self, s, a):
        sa = torch.cat([self.enc(s), a], -1)
        return self.q1(sa).squeeze(-1), self.q2(sa).squeeze(-1)

    def first(self, s, a):
        return self.q1(torch.cat([self.enc(s), a], -1)).squeeze(-1)


class ConditionalVAE(nn.Module):
    """State-conditioned generative model of the batch's actions."""

    def __init__(self, state_dim, action_dim, latent_dim, hidden, config=None):
        super().__init__()
        self.latent_dim = latent_dim
        self.enc, d = _encoder(state_dim, config)
        self.encoder = mlp(d + action_dim, 2 * latent_dim, hidden)
        self.decoder = mlp(d + latent_dim, action_dim, hidden)

    def forward(self, s, a):
        s = self.enc(s)
        mean, log_std = self.encoder(torch.cat([s, a], -1)).chunk(2, dim=-1)
        log_std = log_std.clamp(-4.0, 15.0)
        std = log_std.exp()
        z = mean + std * torch.randn_like(std)
        return self._decode(s, z), mean, std

    def decode(self, s, z=None):
        if z is None:
            z = torch.randn(s.shape[0], self.latent_dim).clamp(-0.5, 0.5)
        return self._decode(self.enc(s), z)

    def _decode(self, s_enc, z):
        return torch.tanh(self.decoder(torch.cat([s_enc, z], -1)))


class BcqModel(nn.Module):
    """Generative model, perturbation network and twin critics, with target copies."""

    def __init__(self, spec: EnvSpec, config: BcqConfig):
        super().__init__()
        d_s, d_a = spec.state_dim, spec.action_dim
        self.vae = ConditionalVAE(d_s, d_a, 2 * d_a, config.vae_hidden, config)
        self.actor = Perturbation(d_s, d_a, config.actor_hidden, config.phi, config)
        self.critic = TwinCritic(d_s, d_a, config.critic_hidden, config)
        self.actor_target = copy.deepcopy(self.actor)
        self.critic_target = copy.deepcopy(self.critic)


class BcqTrainer:
    def __init__(self, spec: EnvSpec, config: BcqConfig):
        self.spec = spec
        self.config = config
        self.model = BcqModel(spec, config)
        m = self.model
        self.vae_opt = torch.optim.Adam(m.vae.parameters(), lr=config.vae_lr)
        self.actor_opt = torch.optim.Adam(m.actor.parameters(), lr=config.actor_lr)
        self.critic_opt = torch.optim.Adam(m.critic.parameters(), lr=config.critic_lr)

    def train_step(self, s, a, r, s2, not_done) -> dict[str, float]:
        cfg, m = self.config, self.model

        recon, mean, std = m.vae(s, a)
        kl = -0.5 * (1 + torch.log(std.pow(2)) - mean.pow(2) - std.pow(2)).mean()
        vae_loss = F.mse_loss(recon, a) + cfg.kl_weight * kl
        self.vae_opt.zero_grad()
        vae_loss.backward()
        self.vae_opt.step()

        with torch.no_grad():
            s2_rep = s2.repeat_interleave(cfg.n_cand, dim=0)
            tq1, tq2 = m.critic_target(s2_rep, m.actor_target(s2_rep, m.vae.decode(s2_rep)))
            tq = cfg.lmbda * torch.min(tq1, tq2) + (1.0 - cfg.lmbda) * torch.max(tq1, tq2)
            tq = tq.view(-1, cfg.n_cand).max(dim=1).values
            target = r + not_done * cfg.gamma * tq
        q1, q2 = m.critic(s, a)
        critic_loss = F.mse_loss(q1, target) + F.mse_loss(q2, target)
        self.critic_opt.zero_grad()
        critic_loss.backward()
        self.critic_opt.step()

        with torch.no_grad():
            sampled = m.vae.decode(s)
        actor_loss = -m.critic.first(s, m.actor(s, sampled)).mean()
        self.actor_opt.zero_grad()
        actor_loss.backward()
        self.actor_opt.step()

        soft_update(m.critic_target, m.critic, cfg.tau)
        soft_update(m.actor_target, m.actor, cfg.tau)
        return {"vae": vae_loss.item(), "critic": critic_loss.item(), "actor": actor_loss.item()}


class BcqPolicy:
    """Deterministic released policy.

    Candidates are decoded from a fixed set of ``n_cand`` latent vectors drawn
    once at construction, perturbed, and the one with the highest first-critic
    value is taken.
    """

    kind = "bcq"

    def __init__(self, model: BcqModel, spec: EnvSpec, config: BcqConfig, latent_seed: int = 0):
        self._model = model.eval()
        self.spec = spec
        self.config = config
        self._scaler = ActionScaler(spec.low, spec.high)
        g = torch.Generator().manual_seed(int(latent_seed))
        self._latents = torch.randn(config.n_cand, model.vae.latent_dim, generator=g).clamp(-0.5, 0.5)
        self.latent_seed = int(latent_seed)

    @torch.no_grad()
    def _select(self, states: torch.Tensor) -> torch.Tensor:
        n, k = states.shape[0], self.config.n_cand
        s_rep = states.repeat_interleave(k, dim=0)
        z = self._latents.repeat(n, 1)
        cand = self._model.actor(s_rep, self._model.vae.decode(s_rep, z))
        if k == 1:
            return cand
        q = self._model.critic.first(s_rep, cand).view(n, k)
        best = q.argmax(dim=1)
        return cand.view(n, k, -1)[torch.arange(n), best]

    def act(self, state) -> np.ndarray:
        s = torch.as_tensor(np.asarray(state, dtype=np.float32)).unsqueeze(0)
        return self._scaler.from_unit(self._select(s)[0].double().numpy())

    def act_batch(self, states) -> np.ndarray:
        s = torch.as_tensor(np.asarray(states, dtype=np.float32))
        return self._scaler.from_unit(self._select(s).double().numpy())

    @torch.no_grad()
    def decoded_action(self, state) -> np.ndarray:
        """Generative-model output for the first fixed latent, before perturbation."""
        s = torch.as_tensor(np.asarray(state, dtype=np.float32)).unsqueeze(0)
        return self._scaler.from_unit(self._model.vae.decode(s, self._latents[:1])[0].double().numpy())

    def save(self, path):
        arrays = state_dict_to_numpy(self._model, "model")
        return save_archive(path, self.kind, arrays,
                            {"config": self.config.to_dict(), "latent_seed": self.latent_seed},
                            env_spec=self.spec)

    @classmethod
    def load(cls, path, expected_spec: EnvSpec | None = None) -> "BcqPolicy":
        meta, arrays = load_archive(path, cls.kind, expected_spec)
        spec = EnvSpec.from_dict(meta["env_spec"])
        config = BcqConfig(**meta["config"])
        model = BcqModel(spec, config)
        load_numpy_state(model, arrays, "model")
        return cls(model, spec, config, meta["latent_seed"])


@dataclass
class LearningCurve:
    points: list[tuple[int, float, float]] = field(default_factory=list)

    def append(self, step: int, mean_return: float, stderr: float) -> None:
        if self.points and step <= self.points[-1][0]:
            raise ValueError("learning-curve steps must be strictly increasing")
        self.points.append((int(step), float(mean_return), float(stderr)))

    @property
    def steps(self) -> list[int]:
        return [p[0] for p in self.points]

    def to_csv(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["step", "mean_return", "stderr"])
            for step, mean, se in self.points:
                w.writerow([step, repr(mean), repr(se)])
        return path

    @classmethod
    def from_csv(cls, path) -> "LearningCurve":
        curve = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                curve.append(int(row["step"]), float(row["mean_return"]), float(row["stderr"]))
        return curve


def absorbing_flags(batch: TrajectoryBatch, t_max: int) -> list[bool]:
    """Per-tuple bootstrap cut: terminal tuples of episodes that ended before ``t_max``."""
    flags = []
    for traj in batch:
        for i, tr in enumerate(traj.transitions):
            flags.append(bool(tr.terminal) and traj.T < t_max)
    return flags


def fill_buffer(batch: TrajectoryBatch, spec: EnvSpec, seed: int) -> ReplayBuffer:
    """Break every trajectory into tuples (actions rescaled to [-1, 1]) inside a replay buffer."""
    scaler = ActionScaler(spec.low, spec.high)
    buffer = ReplayBuffer(max(1, sum(len(t) for t in batch)), seed=seed)
    flags = iter(absorbing_flags(batch, spec.t_max))
    for traj in batch:
        for tr in traj.transitions:
            buffer.add(Transition(tr.state, scaler.to_unit(tr.action.astype(np.float64)),
                                  tr.reward, tr.next_state, next(flags)))
    return buffer


def train_target_policy(batch: TrajectoryBatch, env_for_eval: Environment | None,
                        config: BcqConfig | None = None, seed: int = 0,
                        spec: EnvSpec | None = None) -> tuple[BcqPolicy, LearningCurve]:
    """Train the target policy fully offline on ``batch``.

    All tuples enter a replay buffer before the first gradient step and every
    step consumes one uniformly sampled minibatch from it. The learning curve
    is sampled every ``eval_interval`` steps on ``env_for_eval`` (skipped when
    it is ``None``).
    """
    config = config or BcqConfig()
    if len(batch) == 0:
        raise ValueError("cannot train on an empty batch")
    spec = spec or (env_for_eval.spec if env_for_eval is not None else None)
    if spec is None:
        raise ValueError("an environment spec is required")

    with torch_seed(seed):
        buffer = fill_buffer(batch, spec, seed)
        trainer = BcqTrainer(spec, config)
        policy = BcqPolicy(trainer.model, spec, config, latent_seed=seed)
        curve = LearningCurve()
        for step in range(1, config.steps + 1):
            trainer.model.train()
            mb = buffer.sample_arrays(config.batch_size)
            losses = trainer.train_step(
                torch.from_numpy(mb.states), torch.from_numpy(mb.actions),
                torch.from_numpy(mb.rewards), torch.from_numpy(mb.next_states),
                1.0 - torch.from_numpy(mb.terminals),
            )
            if not all(np.isfinite(v) for v in losses.values()):
                raise TrainingDivergedError(f"BCQ loss not finite at step {step}: {losses}")
            if env_for_eval is not None and config.eval_interval > 0 and step % config.eval_interval == 0:
                trainer.model.eval()
                mean, se = evaluate_policy(env_for_eval, policy, config.eval_episodes,
                                           seed_base=config.eval_seed_base)
                curve.append(step, mean, se)
                logger.debug("bcq step %d: return %.3f +- %.3f", step, mean, se)
    trainer.model.eval()
    return policy, curve


def evaluate_policy(env: Environment, policy: Policy, episodes: int, gamma: float = 1.0,
                    seed_base: int = 0, seeds: Sequence[int] | None = None) -> tuple[float, float]:
    """Mean and standard error of the episode return over noiseless rollouts."""
    if episodes < 1:
        raise ValueError("episodes must be at least 1")
    seeds = list(seeds) if seeds is not None else [seed_base + i for i in range(episodes)]
    returns = np.array([discounted_return(rollout(env, policy, s).rewards(), gamma) for s in seeds])
    se = float(returns.std(ddof=1) / np.sqrt(len(returns))) if len(returns) > 1 else 0.0
    return float(returns.mean()), se


def query_output_trajectories(env: Environment, policy: Policy, seeds: Sequence[int]) -> TrajectoryBatch:
    """One noiseless rollout per seed, tagged as model output."""
    seeds = [int(s) for s in seeds]
    if not seeds:
        raise ValueError("seeds must be nonempty")
    trajs = tuple(rollout(env, policy, s) for s in seeds)
    return TrajectoryBatch(trajs, SourceTag.MODEL_OUTPUT, tuple(seeds))
