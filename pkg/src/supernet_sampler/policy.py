"""Masked categorical controller over supernet actions."""
from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

from .encoder import HashingExtractors, State, layer_norm, layer_norm_backward
from .exceptions import DimensionMismatch, ZeroProbabilityAction
from .optcore import GradSet, ParamSet
from .supernet import EARLY_EXIT, ActionSet, Invoke, SupernetGraph, ToolOutput

MASK_VALUE = -1e9
INFERENCE_TEMPERATURE = 0.8


@dataclass
class PolicyHead:
    w1: np.ndarray
    w2: np.ndarray

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_actions(self) -> int:
        return self.w2.shape[0]

    def logits(self, h: np.ndarray) -> np.ndarray:
        return self.w2 @ np.maximum(self.w1 @ h, 0.0)


@dataclass(frozen=True)
class TemperatureSchedule:
    start: float = 2.0
    end: float = 0.8
    total_steps: int = 1000

    def __post_init__(self):
        if not self.start >= self.end > 0:
            raise ValueError("temperature schedule needs start >= end > 0")


def temperature(step: int, sched: TemperatureSchedule) -> float:
    """Linear anneal from ``start`` to ``end``, then held at ``end``."""
    if step < 0:
        raise ValueError("step must be nonnegative")
    if sched.total_steps <= 0 or step >= sched.total_steps:
        return sched.end
    return sched.start + (sched.end - sched.start) * step / sched.total_steps


def masked_log_softmax(logits: np.ndarray, mask: np.ndarray, alpha: float):
    """Return ``(log_probs, probs)`` of ``softmax(mask(logits) / alpha)`` along the last axis."""
    y = np.where(mask, logits, MASK_VALUE) / alpha
    y = y - y.max(axis=-1, keepdims=True)
    logp = y - np.log(np.exp(y).sum(axis=-1, keepdims=True))
    p = np.where(mask, np.exp(logp), 0.0)
    return logp, p


@dataclass(frozen=True)
class ActionDistribution:
    actions: tuple
    probs: np.ndarray
    logits: np.ndarray
    mask: np.ndarray
    index: np.ndarray
    alpha: float

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.actions]

    def argmax(self) -> int:
        return int(np.argmax(self.probs))

    def entropy(self) -> float:
        p = self.probs[self.probs > 0]
        return float(-np.sum(p * np.log(p)))


def action_distribution(h: np.ndarray, legal: ActionSet, head: PolicyHead,
                        alpha: float) -> ActionDistribution:
    if alpha <= 0:
        raise ValueError("temperature must be positive")
    if head.n_actions != legal.n_total:
        raise DimensionMismatch(f"head has {head.n_actions} outputs, graph has {legal.n_total} actions")
    logits = head.logits(h)
    return _distribution(logits, legal, alpha)


def _distribution(logits, legal: ActionSet, alpha: float) -> ActionDistribution:
    mask = legal.mask()
    _, p = masked_log_softmax(logits, mask, alpha)
    probs = p[legal.index]
    total = probs.sum()
    if total <= 0 or np.any(p[~mask] != 0.0):
        raise ZeroProbabilityAction("mask produced an invalid distribution")
    return ActionDistribution(legal.actions, probs, logits, mask, legal.index, alpha)


def sample_index(dist: ActionDistribution, rng: np.random.Generator) -> int:
    """Inverse-CDF draw over the ordered legal set; returns the position in ``dist.actions``."""
    cdf = np.cumsum(dist.probs)
    i = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    i = min(i, len(cdf) - 1)
    while dist.probs[i] == 0.0:
        i -= 1
    return i


def sample_action(dist: ActionDistribution, rng: np.random.Generator):
    return dist.actions[sample_index(dist, rng)]


@dataclass
class Step:
    position: str
    distribution: ActionDistribution
    choice: int
    features: tuple
    output: ToolOutput | None = None
    summary: str = ""
    error: str | None = None

    @property
    def action(self):
        return self.distribution.actions[self.choice]

    @property
    def prob(self) -> float:
        return float(self.distribution.probs[self.choice])

    @property
    def global_index(self) -> int:
        return int(self.distribution.index[self.choice])

    @property
    def digest(self) -> str:
        h = hashlib.sha256()
        for f in self.features:
            h.update(np.ascontiguousarray(f, dtype=np.float64).tobytes())
        return h.hexdigest()[:16]


@dataclass
class Trajectory:
    steps: list = field(default_factory=list)
    terminated_by: str | None = None

    def __len__(self):
        return len(self.steps)

    @property
    def actions(self) -> list:
        return [s.action for s in self.steps]

    @property
    def invocations(self) -> list[Invoke]:
        return [a for a in self.actions if isinstance(a, Invoke)]

    @property
    def n_invocations(self) -> int:
        return len(self.invocations)

    def key(self) -> tuple[str, ...]:
        return tuple(a.name for a in self.actions)


def trajectory_logprob(traj: Trajectory) -> float:
    total = 0.0
    for i, s in enumerate(traj.steps):
        if s.prob <= 0.0:
            raise ZeroProbabilityAction(f"step {i} chose {s.action.name} with probability 0")
        total += math.log(s.prob)
    return total


# Batched forward/backward through encoder projections, layer norm and the head.

def forward(params: ParamSet, x_img, x_txt, x_mem):
    z = np.concatenate([x_img @ params["w_image"].T, x_txt @ params["w_query"].T,
                        x_mem @ params["w_memory"].T], axis=-1)
    h = layer_norm(z)
    u = h @ params["w1"].T
    r = np.maximum(u, 0.0)
    logits = r @ params["w2"].T
    return logits, (x_img, x_txt, x_mem, z, h, u, r)


def backward(params: ParamSet, cache, dlogits) -> GradSet:
    x_img, x_txt, x_mem, z, h, u, r = cache
    dr = dlogits @ params["w2"]
    du = dr * (u > 0)
    dh = du @ params["w1"]
    dz = layer_norm_backward(dh, h, z)
    a, b = params["w_image"].shape[0], params["w_query"].shape[0]
    return {
        "w_image": dz[:, :a].T @ x_img,
        "w_query": dz[:, a:a + b].T @ x_txt,
        "w_memory": dz[:, a + b:].T @ x_mem,
        "w1": du.T @ h,
        "w2": dlogits.T @ r,
    }


class Controller:
    """Policy parameters bound to a graph and frozen feature extractors."""

    def __init__(self, params: ParamSet, graph: SupernetGraph,
                 extractors: HashingExtractors | None = None):
        if params["w2"].shape[0] != graph.n_actions:
            raise DimensionMismatch(
                f"policy has {params['w2'].shape[0]} outputs, graph has {graph.n_actions} actions")
        self.params = params
        self.graph = graph
        self.extractors = extractors or HashingExtractors()

    @property
    def head(self) -> PolicyHead:
        return PolicyHead(self.params["w1"], self.params["w2"])

    def features(self, state: State):
        return self.extractors(state)

    def distribution(self, features, legal: ActionSet, alpha: float) -> ActionDistribution:
        if alpha <= 0:
            raise ValueError("temperature must be positive")
        x_img, x_txt, x_mem = (np.asarray(f)[None, :] for f in features)
        logits, _ = forward(self.params, x_img, x_txt, x_mem)
        return _distribution(logits[0], legal, alpha)

    def encode(self, state: State) -> np.ndarray:
        x_img, x_txt, x_mem = (np.asarray(f)[None, :] for f in self.features(state))
        _, cache = forward(self.params, x_img, x_txt, x_mem)
        return cache[4][0]

