import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from conftest import random_controller, sample_trajectories, tiny_env
from supernet_sampler.environment import generate_suite
from supernet_sampler.exceptions import DimensionMismatch, ZeroProbabilityAction
from supernet_sampler.policy import (
    MASK_VALUE,
    ActionDistribution,
    PolicyHead,
    Step,
    TemperatureSchedule,
    Trajectory,
    action_distribution,
    masked_log_softmax,
    sample_index,
    temperature,
    trajectory_logprob,
)
from supernet_sampler.supernet import EARLY_EXIT, ENTRY, legal_actions


def test_schedule_endpoints_and_validation():
    s = TemperatureSchedule(2.0, 0.8, 100)
    assert temperature(0, s) == 2.0
    assert temperature(50, s) == pytest.approx(1.4)
    assert temperature(100, s) == temperature(10**6, s) == 0.8
    with pytest.raises(ValueError):
        TemperatureSchedule(0.5, 0.8)
    with pytest.raises(ValueError):
        temperature(-1, s)


@given(st.integers(0, 500), st.integers(0, 500))
def test_schedule_monotone(a, b):
    s = TemperatureSchedule(2.0, 0.8, 300)
    lo, hi = sorted((a, b))
    assert temperature(hi, s) <= temperature(lo, s)


def test_masked_softmax_excludes_illegal():
    logits = np.array([5.0, 1.0, 1.0])
    mask = np.array([False, True, True])
    _, p = masked_log_softmax(logits, mask, 1.0)
    assert p[0] == 0.0
    np.testing.assert_allclose(p[1:], [0.5, 0.5])


def test_temperature_sharpens():
    logits, mask = np.array([1.0, 0.0]), np.ones(2, bool)
    _, hot = masked_log_softmax(logits, mask, 2.0)
    _, cold = masked_log_softmax(logits, mask, 0.5)
    assert cold[0] > hot[0] > 0.5


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-50, 50)),
       arrays(bool, 6).filter(lambda m: m.any()),
       st.floats(0.1, 4.0))
def test_masked_softmax_is_distribution(logits, mask, alpha):
    logp, p = masked_log_softmax(logits, mask, alpha)
    assert abs(p.sum() - 1.0) < 1e-12
    assert np.all(p[~mask] == 0.0)
    np.testing.assert_allclose(np.exp(logp[mask]), p[mask], rtol=1e-12, atol=0)


def test_action_distribution_and_sampling():
    env = tiny_env()
    ctrl = random_controller(env)
    legal = env.legal(ENTRY, 0)
    h = np.random.default_rng(0).standard_normal(512)
    dist = action_distribution(h, legal, ctrl.head, 0.8)
    assert dist.names == legal.names
    assert abs(dist.probs.sum() - 1) < 1e-12
    rng = np.random.default_rng(1)
    counts = np.bincount([sample_index(dist, rng) for _ in range(4000)], minlength=len(dist.probs))
    np.testing.assert_allclose(counts / 4000, dist.probs, atol=0.03)
    with pytest.raises(ValueError):
        action_distribution(h, legal, ctrl.head, 0.0)
    bad = PolicyHead(ctrl.params["w1"], ctrl.params["w2"][:-1])
    with pytest.raises(DimensionMismatch):
        action_distribution(h, legal, bad, 0.8)


def test_sampling_never_returns_zero_probability():
    probs = np.array([0.0, 1.0, 0.0])
    dist = ActionDistribution((None, None, None), probs, probs, np.ones(3, bool), np.arange(3), 1.0)
    rng = np.random.default_rng(0)
    assert {sample_index(dist, rng) for _ in range(200)} == {1}


def test_exit_masked_from_entry():
    env = tiny_env(min_steps_before_exit=1)
    legal = env.legal(ENTRY, 0)
    assert EARLY_EXIT not in legal.actions
    assert EARLY_EXIT in legal_actions(env.graph, "vqa", step=1, min_steps_before_exit=1).actions


def test_controller_distribution_matches_head():
    env = tiny_env()
    ctrl = random_controller(env, seed=4)
    inst = generate_suite(0)[0]
    state = env.state(inst, env.new_memory(), ENTRY)
    h = ctrl.encode(state)
    legal = env.legal(ENTRY, 0)
    a = ctrl.distribution(ctrl.features(state), legal, 0.8)
    b = action_distribution(h, legal, ctrl.head, 0.8)
    np.testing.assert_allclose(a.probs, b.probs, rtol=1e-12)
    assert abs(h.mean()) < 1e-9


def test_trajectory_logprob(small_suite):
    env = tiny_env()
    ctrl = random_controller(env)
    (traj,) = sample_trajectories(ctrl, env, small_suite, np.random.default_rng(0), k=1)
    expected = sum(math.log(s.prob) for s in traj.steps)
    assert trajectory_logprob(traj) == pytest.approx(expected)
    assert trajectory_logprob(Trajectory()) == 0.0
    step = traj.steps[0]
    probs = step.distribution.probs.copy()
    probs[step.choice] = 0.0
    broken = Step(step.position, ActionDistribution(step.distribution.actions, probs,
                  step.distribution.logits, step.distribution.mask, step.distribution.index, 0.8),
                  step.choice, step.features)
    with pytest.raises(ZeroProbabilityAction):
        trajectory_logprob(Trajectory([broken]))


def test_step_digest_stable(small_suite):
    env = tiny_env()
    ctrl = random_controller(env)
    a = sample_trajectories(ctrl, env, small_suite, np.random.default_rng(0), k=1)[0]
    b = sample_trajectories(ctrl, env, small_suite, np.random.default_rng(0), k=1)[0]
    assert [s.digest for s in a.steps] == [s.digest for s in b.steps]
    assert a.key() == b.key()


def test_mask_value_is_finite():
    assert np.isfinite(MASK_VALUE) and MASK_VALUE < -1e8
