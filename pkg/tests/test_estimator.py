import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from supernet_sampler.environment import Environment
from supernet_sampler.estimator import SupernetController, check_instances
from supernet_sampler.exceptions import EmptySuite

FAST = dict(bc_steps=10, cpr_steps=2, rl_episodes=3, hidden=8, gamma=0.0, random_state=0)


def test_params_and_clone():
    est = SupernetController(**FAST)
    assert clone(est).get_params() == est.get_params()
    assert est.set_params(lam=0.3).lam == 0.3


def test_not_fitted():
    with pytest.raises(NotFittedError):
        SupernetController().predict([])


def test_check_instances(small_suite):
    rec = small_suite[0].to_record()
    assert check_instances(rec) == [small_suite[0]]
    assert check_instances(small_suite[:2]) == small_suite[:2]
    with pytest.raises(EmptySuite):
        check_instances([])


def test_fit_predict_score(small_suite, std_env):
    est = SupernetController(env=std_env, **FAST).fit(small_suite[:8])
    assert est.n_actions_ == std_env.graph.n_actions
    assert len(est.history_) == 15
    answers = est.predict(small_suite[8:12], rng=0)
    assert len(answers) == 4 and all(isinstance(a, dict) for a in answers)
    assert 0.0 <= est.score(small_suite[8:12], rng=0) <= 1.0
    res = est.sample_workflow(small_suite[8], rng=np.random.default_rng(1))
    assert res.trajectory.terminated_by in ("EarlyExit", "MaxSteps")
    g = est.sample_workflow(small_suite[8], greedy=True)
    assert g.trajectory.key() == est.sample_workflow(small_suite[8], greedy=True).trajectory.key()


def test_fit_deterministic(small_suite, std_env):
    a = SupernetController(env=std_env, **FAST).fit(small_suite[:6])
    b = SupernetController(env=std_env, **FAST).fit(small_suite[:6])
    assert all(a.params_[k].tobytes() == b.params_[k].tobytes() for k in a.params_)


def test_default_environment():
    est = SupernetController(T_max=5, allow_early_exit=False)
    env = est._environment()
    assert isinstance(env, Environment) and env.T_max == 5 and not env.allow_early_exit
