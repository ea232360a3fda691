"""Parameter store and optimisation: AdamW, global-norm clipping, cosine schedule."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Dict

import numpy as np

from .encoder import FEATURE_DIM, init_encoder_params
from .exceptions import NonFiniteLoss

ParamSet = Dict[str, np.ndarray]
GradSet = Dict[str, np.ndarray]

PARAM_NAMES = ("w_image", "w_query", "w_memory", "w1", "w2")


def init_params(rng: np.random.Generator, n_actions: int, hidden: int = 256,
                feature_dims=(FEATURE_DIM,) * 3) -> ParamSet:
    """Seeded uniform(+-1/sqrt(fan_in)) init of every trainable matrix."""
    enc = init_encoder_params(rng, feature_dims)
    state_dim = enc.w_image.shape[0] + enc.w_query.shape[0] + enc.w_memory.shape[0]
    b1, b2 = 1.0 / math.sqrt(state_dim), 1.0 / math.sqrt(hidden)
    return {
        "w_image": enc.w_image,
        "w_query": enc.w_query,
        "w_memory": enc.w_memory,
        "w1": rng.uniform(-b1, b1, size=(hidden, state_dim)),
        "w2": rng.uniform(-b2, b2, size=(n_actions, hidden)),
    }


def copy_params(params: ParamSet) -> ParamSet:
    return {k: v.copy() for k, v in params.items()}


def zeros_like(params: ParamSet) -> GradSet:
    return {k: np.zeros_like(v) for k, v in params.items()}


def add_grads(*grads: GradSet) -> GradSet:
    out = {k: v.copy() for k, v in grads[0].items()}
    for g in grads[1:]:
        for k, v in g.items():
            out[k] += v
    return out


def scale_grads(grads: GradSet, factor: float) -> GradSet:
    return {k: v * factor for k, v in grads.items()}


def grad(loss_eval: Callable[[ParamSet], tuple[float, GradSet]], params: ParamSet) -> GradSet:
    """Gradient of ``loss_eval`` at ``params``.

    ``loss_eval`` returns ``(value, grads)``; the loss modules compute grads in
    closed form by backpropagating through log-softmax, the head, layer norm and
    the projections. Missing names get zero gradients.
    """
    value, grads = loss_eval(params)
    if not np.isfinite(value):
        raise NonFiniteLoss(f"loss is {value}")
    out = zeros_like(params)
    for k, v in grads.items():
        out[k] = out[k] + v
    return out


def global_norm(grads: GradSet) -> float:
    return math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))


def clip_global_norm(grads: GradSet, max_norm: float = 1.0) -> GradSet:
    norm = global_norm(grads)
    if not math.isfinite(norm):
        raise NonFiniteLoss(f"gradient norm is {norm}")
    if norm <= max_norm:
        return grads
    return scale_grads(grads, max_norm / norm)


def cosine_lr(step: int, total_steps: int, base_lr: float) -> float:
    if total_steps <= 0:
        return base_lr
    step = min(max(step, 0), total_steps)
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * step / total_steps))


@dataclass
class OptimizerState:
    base_lr: float
    total_steps: int = 0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.01
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: ParamSet, base_lr: float, total_steps: int = 0, **kw):
        return cls(base_lr=base_lr, total_steps=total_steps, m=zeros_like(params),
                   v=zeros_like(params), **kw)

    @property
    def lr(self) -> float:
        """Learning rate the next update will use."""
        return cosine_lr(self.step, self.total_steps, self.base_lr)


def adamw_step(params: ParamSet, grads: GradSet, state: OptimizerState,
               lr: float | None = None) -> tuple[ParamSet, OptimizerState]:
    """One AdamW update with decoupled weight decay and bias correction.

    Returns new parameter and state objects; inputs are not modified.
    """
    if lr is None:
        lr = state.lr
    b1, b2 = state.betas
    t = state.step + 1
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    new_params, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} != parameter shape {p.shape} for {k}")
        m = b1 * state.m[k] + (1.0 - b1) * g
        v = b2 * state.v[k] + (1.0 - b2) * (g * g)
        decayed = p - lr * state.weight_decay * p
        new_params[k] = decayed - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[k], new_v[k] = m, v
    new_state = OptimizerState(state.base_lr, state.total_steps, state.betas, state.eps,
                               state.weight_decay, t, new_m, new_v)
    return new_params, new_state
