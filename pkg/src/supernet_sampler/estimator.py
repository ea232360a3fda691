"""scikit-learn style wrapper around the curriculum and the inference loop."""
from __future__ import annotations

from dataclasses import fields

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils import check_random_state
from sklearn.utils.validation import check_is_fitted

from .environment import Environment, QueryInstance, utility
from .exceptions import EmptySuite
from .policy import Controller
from .runtime import InferenceResult, run_inference
from .training import TrainingConfig, run_curriculum


def check_instances(X) -> list[QueryInstance]:
    """Accept a QueryInstance, a record dict, or a sequence of either."""
    if isinstance(X, (QueryInstance, dict)):
        X = [X]
    out = [x if isinstance(x, QueryInstance) else QueryInstance.from_record(x) for x in X]
    if not out:
        raise EmptySuite("no instances given")
    return out


class SupernetController(BaseEstimator):
    """Learns a workflow sampler over the standard (or a given) supernet.

    ``fit`` runs the three-phase curriculum on a list of instances; ``predict``
    returns synthesized answers; ``score`` is mean utility.
    """

    def __init__(self, bc_steps=400, cpr_steps=100, rl_episodes=1500, hidden=256, lam=0.03,
                 gamma=0.05, entropy_bonus=0.01, T_max=8, allow_early_exit=True,
                 alpha=0.8, greedy=False, env=None, random_state=None):
        self.bc_steps = bc_steps
        self.cpr_steps = cpr_steps
        self.rl_episodes = rl_episodes
        self.hidden = hidden
        self.lam = lam
        self.gamma = gamma
        self.entropy_bonus = entropy_bonus
        self.T_max = T_max
        self.allow_early_exit = allow_early_exit
        self.alpha = alpha
        self.greedy = greedy
        self.env = env
        self.random_state = random_state

    def _training_config(self) -> TrainingConfig:
        names = {f.name for f in fields(TrainingConfig)}
        return TrainingConfig(**{k: v for k, v in self.get_params().items() if k in names})

    def _environment(self) -> Environment:
        if self.env is not None:
            return self.env
        return Environment.standard(T_max=self.T_max, allow_early_exit=self.allow_early_exit)

    def fit(self, X, y=None):
        instances = check_instances(X)
        seed = check_random_state(self.random_state).randint(2**31 - 1)
        self.env_ = self._environment()
        result = run_curriculum(self.env_, instances, self._training_config(),
                                np.random.default_rng(seed))
        self.params_ = result.params
        self.history_ = result.rows
        self.controller_ = Controller(self.params_, self.env_.graph)
        self.n_actions_ = self.env_.graph.n_actions
        return self

    def sample_workflow(self, instance, rng=None, *, greedy=None) -> InferenceResult:
        check_is_fitted(self, "params_")
        (inst,) = check_instances(instance)
        greedy = self.greedy if greedy is None else greedy
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        return run_inference(self.controller_, inst, self.env_, rng=rng, alpha=self.alpha,
                             greedy=greedy)

    def predict(self, X, rng=None) -> list[dict]:
        check_is_fitted(self, "params_")
        instances = check_instances(X)
        rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
        return [self.sample_workflow(inst, rng).answer for inst in instances]

    def score(self, X, y=None, rng=None) -> float:
        instances = check_instances(X)
        answers = self.predict(instances, rng)
        return float(np.mean([utility(a, inst.truth) for a, inst in zip(answers, instances)]))
