import numpy as np
import pytest
import torch

from rlmia.bcq import evaluate_policy
from rlmia.core import SourceTag
from rlmia.envs import make_env
from rlmia.envs.base import ConstantPolicy, RandomPolicy, rollout
from rlmia.oracle import ActorPolicy, DDPGConfig, collect_batch, train_behavior_policy

SMALL = DDPGConfig(hidden=(16, 16), warmup_steps=50, batch_size=16, eval_episodes=2)


@pytest.fixture(scope="module")
def env():
    return make_env("PointReach2D", t_max=20)


def test_zero_steps_returns_untrained_actor(env):
    a = train_behavior_policy(env, 0, SMALL, seed=3)
    b = train_behavior_policy(env, 0, SMALL, seed=3)
    s = np.array([0.1, -0.2])
    np.testing.assert_array_equal(a.act(s), b.act(s))
    assert np.all(np.abs(a.act(s)) <= 1.0)


def test_rejects_too_few_steps(env):
    with pytest.raises(ValueError):
        train_behavior_policy(env, 10, SMALL)
    with pytest.raises(ValueError):
        train_behavior_policy(env, -1, SMALL)


def test_training_is_deterministic(env):
    a = train_behavior_policy(env, 200, SMALL, seed=1)
    b = train_behavior_policy(env, 200, SMALL, seed=1)
    for pa, pb in zip(a.actor.parameters(), b.actor.parameters()):
        assert torch.equal(pa, pb)


def test_collection_is_reproducible_and_tagged(env):
    pol = train_behavior_policy(env, 0, SMALL, seed=0)
    a = collect_batch(env, pol, 5, 0.3, seed_base=100, tag=SourceTag.NONMEMBER)
    b = collect_batch(env, pol, 5, 0.3, seed_base=100, tag=SourceTag.NONMEMBER)
    assert a.seed_record == (100, 101, 102, 103, 104)
    assert a.source_tag is SourceTag.NONMEMBER
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.actions(), tb.actions())
        ta.validate(env.spec.t_max, 2, 2)
    with pytest.raises(ValueError):
        collect_batch(env, pol, 0, 0.3, seed_base=0)


def test_collected_actions_stay_in_bounds(env):
    pol = train_behavior_policy(env, 0, SMALL, seed=0)
    batch = collect_batch(env, pol, 10, 5.0, seed_base=0)
    for t in batch:
        assert np.all(t.actions() >= -1.0) and np.all(t.actions() <= 1.0)


@pytest.mark.parametrize("corr", [0.0, 0.8])
def test_exploration_noise_has_the_requested_scale(corr):
    # long episodes never reach the goal with a zero action; check the empirical std of the noise
    long_env = make_env("PointReach2D", t_max=400)
    sigma = 0.2
    batch = collect_batch(long_env, ConstantPolicy([0.0, 0.0]), 20, sigma, seed_base=0, noise_correlation=corr)
    acts = np.concatenate([t.actions() for t in batch])
    assert abs(acts.mean()) < 0.05
    assert acts.std() == pytest.approx(sigma, rel=0.1)
    lag1 = np.mean([np.corrcoef(t.actions()[:-1, 0], t.actions()[1:, 0])[0, 1] for t in batch])
    assert lag1 == pytest.approx(corr, abs=0.1)


def test_round_robin_policy_mixture(env):
    left, right = ConstantPolicy([-1.0, 0.0]), ConstantPolicy([1.0, 0.0])
    batch = collect_batch(env, [left, right], 4, 0.0, seed_base=0)
    firsts = [t.actions()[0, 0] for t in batch]
    assert firsts == [-1.0, 1.0, -1.0, 1.0]


def test_checkpoint_round_trip(env, tmp_path):
    pol = train_behavior_policy(env, 0, SMALL, seed=2)
    path = pol.save(tmp_path / "actor.npz")
    back = ActorPolicy.load(path, expected_spec=env.spec)
    s = np.array([0.3, 0.4])
    np.testing.assert_array_equal(back.act(s), pol.act(s))


@pytest.mark.slow
def test_trained_policy_beats_random():
    env = make_env("PointReach2D", t_max=50)
    pol = train_behavior_policy(env, 5000, DDPGConfig(), seed=0)
    trained, _ = evaluate_policy(env, pol, 20, seed_base=7)
    rand = np.mean([sum(rollout(env, RandomPolicy(env.spec, seed=i), 7 + i).rewards()) for i in range(20)])
    assert trained > rand + 5.0
