import numpy as np
import pytest
import torch

from rlmia.bcq import (BcqConfig, BcqModel, BcqPolicy, LearningCurve, absorbing_flags, evaluate_policy, fill_buffer,
                       query_output_trajectories, train_target_policy)
from rlmia.core import ReplayBuffer, SourceTag, TrajectoryBatch, tuple_multiset
from rlmia.envs import make_env
from rlmia.envs.base import rollout
from rlmia.envs.point_reach import GoalSeekingPolicy
from rlmia.oracle import collect_batch

TINY = BcqConfig(steps=20, eval_interval=10, eval_episodes=2, batch_size=16, actor_hidden=(16,),
                 critic_hidden=(16,), vae_hidden=(16,))


@pytest.fixture(scope="module")
def env():
    return make_env("PointReach2D", t_max=20)


@pytest.fixture(scope="module")
def batch(env):
    return collect_batch(env, GoalSeekingPolicy(), 8, 0.3, seed_base=0)


def test_no_perturbation_single_candidate_returns_decoder_output(env):
    cfg = BcqConfig(phi=0.0, n_cand=1, actor_hidden=(8,), critic_hidden=(8,), vae_hidden=(8,))
    torch.manual_seed(0)
    pol = BcqPolicy(BcqModel(env.spec, cfg), env.spec, cfg, latent_seed=4)
    for s in np.random.default_rng(0).uniform(-2, 2, size=(10, 2)):
        np.testing.assert_array_equal(pol.act(s), pol.decoded_action(s))


def test_policy_is_deterministic_and_bounded(env):
    torch.manual_seed(0)
    pol = BcqPolicy(BcqModel(env.spec, TINY), env.spec, TINY, latent_seed=1)
    states = np.random.default_rng(1).uniform(-2, 2, size=(30, 2))
    a = pol.act_batch(states)
    np.testing.assert_array_equal(a, pol.act_batch(states))
    np.testing.assert_allclose(a[3], pol.act(states[3]), atol=1e-6)
    assert np.all(a >= -1.0) and np.all(a <= 1.0)


def test_perturbation_is_bounded_by_phi(env):
    cfg = BcqConfig(phi=0.05, actor_hidden=(8,), critic_hidden=(8,), vae_hidden=(8,))
    torch.manual_seed(0)
    m = BcqModel(env.spec, cfg)
    s = torch.randn(50, 2)
    a = torch.rand(50, 2) * 1.8 - 0.9
    assert torch.all((m.actor(s, a) - a).abs() <= 0.05 + 1e-7)


def test_training_is_deterministic(env, batch):
    a, ca = train_target_policy(batch, env, TINY, seed=3)
    b, cb = train_target_policy(batch, env, TINY, seed=3)
    assert ca.points == cb.points
    states = np.random.default_rng(0).uniform(-1, 1, size=(5, 2))
    np.testing.assert_array_equal(a.act_batch(states), b.act_batch(states))
    assert ca.steps == [10, 20]


def test_training_only_sees_tuples_through_the_buffer(env, batch, monkeypatch):
    seen = []
    original = ReplayBuffer.sample_arrays

    def spy(self, n):
        seen.append(tuple_multiset(self.contents()))
        return original(self, n)

    monkeypatch.setattr(ReplayBuffer, "sample_arrays", spy)
    train_target_policy(batch, None, TINY, seed=0, spec=env.spec)
    assert len(seen) == TINY.steps
    full = fill_buffer(batch, env.spec, seed=0)
    assert len(full) == sum(len(t) for t in batch)
    # every minibatch is drawn from the complete, unchanging tuple set
    assert all(s == tuple_multiset(full.contents()) for s in seen)


def test_empty_batch_and_missing_spec_are_rejected(env, batch):
    with pytest.raises(ValueError, match="empty"):
        train_target_policy(TrajectoryBatch((), SourceTag.MEMBER, ()), env, TINY)
    with pytest.raises(ValueError, match="spec"):
        train_target_policy(batch, None, TINY)


def test_absorbing_flags_distinguish_goal_from_time_limit():
    env = make_env("PointReach2D", t_max=30)
    reached = rollout(env, GoalSeekingPolicy(), 0)
    short = make_env("PointReach2D", t_max=3)
    cut = rollout(short, GoalSeekingPolicy(), 0)
    assert reached.T < 30 and cut.T == 3
    flags = absorbing_flags(TrajectoryBatch((reached,), SourceTag.MEMBER, (0,)), 30)
    assert flags[-1] and not any(flags[:-1])
    assert not any(absorbing_flags(TrajectoryBatch((cut,), SourceTag.MEMBER, (0,)), 3))


def test_query_outputs_replay_the_candidate_seeds(env, batch):
    torch.manual_seed(0)
    pol = BcqPolicy(BcqModel(env.spec, TINY), env.spec, TINY)
    out = query_output_trajectories(env, pol, batch.seed_record)
    assert out.source_tag is SourceTag.MODEL_OUTPUT
    assert out.seed_record == batch.seed_record
    for o, c in zip(out, batch):
        np.testing.assert_array_equal(o.states()[0], c.states()[0])
        np.testing.assert_array_equal(o.actions(), rollout(env, pol, c.seed).actions())
    with pytest.raises(ValueError):
        query_output_trajectories(env, pol, [])


def test_checkpoint_round_trip(env, batch, tmp_path):
    pol, _ = train_target_policy(batch, None, TINY, seed=1, spec=env.spec)
    path = pol.save(tmp_path / "bcq.npz")
    back = BcqPolicy.load(path, expected_spec=env.spec)
    states = np.random.default_rng(2).uniform(-1, 1, size=(6, 2))
    np.testing.assert_array_equal(back.act_batch(states), pol.act_batch(states))


def test_learning_curve_csv_round_trip(tmp_path):
    curve = LearningCurve()
    curve.append(10, -3.5, 0.25)
    curve.append(20, -2.0, 0.125)
    with pytest.raises(ValueError):
        curve.append(20, 0.0, 0.0)
    assert LearningCurve.from_csv(curve.to_csv(tmp_path / "c.csv")).points == curve.points


def test_config_validation():
    with pytest.raises(ValueError):
        BcqConfig(phi=1.5)
    with pytest.raises(ValueError):
        BcqConfig(n_cand=0)


@pytest.mark.slow
def test_offline_training_recovers_behaviour_level_returns():
    env = make_env("PointReach2D", t_max=20)
    data = collect_batch(env, GoalSeekingPolicy(), 50, 0.3, seed_base=0)
    cfg = BcqConfig(steps=1500, eval_interval=0)
    pol, _ = train_target_policy(data, None, cfg, seed=0, spec=env.spec)
    target, _ = evaluate_policy(env, pol, 20, seed_base=500)
    behaviour, _ = evaluate_policy(env, GoalSeekingPolicy(), 20, seed_base=500)
    # the noisy data's own return is the floor an imitating learner should reach
    noisy = np.mean([sum(t.rewards()) for t in data])
    assert target >= noisy - 0.5
    assert target >= behaviour - 2.0
