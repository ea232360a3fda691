"""Three-phase curriculum: behaviour cloning, contrastive path ranking, cost-aware REINFORCE."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Sequence

import numpy as np

from .encoder import State
from .environment import (
    Environment,
    QueryInstance,
    expert_rollout,
    heuristic_reward,
    synthesize_answer,
    utility,
)
from .exceptions import IllegalExpertAction, NonFiniteLoss
from .optcore import (
    GradSet,
    OptimizerState,
    ParamSet,
    add_grads,
    adamw_step,
    clip_global_norm,
    scale_grads,
    init_params,
    zeros_like,
)
from .policy import Controller, TemperatureSchedule, Trajectory, backward, forward, masked_log_softmax, temperature
from .runtime import entropy, estimate_marginal, run_inference
from .supernet import Action

log = logging.getLogger(__name__)

PHASES = ("bc", "cpr", "rl")


# ---------------------------------------------------------------- batches

@dataclass
class StateBatch:
    """Frozen extractor features and legal-action masks for a stack of states."""

    x_img: np.ndarray
    x_txt: np.ndarray
    x_mem: np.ndarray
    mask: np.ndarray

    def __len__(self):
        return self.mask.shape[0]

    @classmethod
    def stack(cls, features, masks) -> "StateBatch":
        if not features:
            raise ValueError("empty batch")
        cols = list(zip(*features))
        return cls(*(np.stack(c) for c in cols), np.stack(masks))

    def take(self, idx) -> "StateBatch":
        return StateBatch(self.x_img[idx], self.x_txt[idx], self.x_mem[idx], self.mask[idx])


@dataclass(frozen=True)
class ExpertPair:
    state: State
    action: Action


def collect_expert_pairs(env: Environment, instances: Sequence[QueryInstance]) -> list[ExpertPair]:
    return [ExpertPair(s, a) for inst in instances for s, a in expert_rollout(inst, env)]


def expert_batch(pairs: Sequence[ExpertPair], controller: Controller,
                 env: Environment) -> tuple[StateBatch, np.ndarray]:
    """Features, masks and global target indices for a list of expert pairs."""
    feats, masks, targets = [], [], []
    for pair in pairs:
        step = len(pair.state.memory)
        legal = env.legal(pair.state.position, step)
        if pair.action not in legal.actions:
            raise IllegalExpertAction(f"{pair.action.name} is not legal at {pair.state.position}")
        feats.append(controller.features(pair.state))
        masks.append(legal.mask())
        targets.append(env.graph.action_index[pair.action])
    return StateBatch.stack(feats, masks), np.asarray(targets, dtype=np.int64)


def trajectory_batch(trajs: Sequence[Trajectory]):
    """Stack every step of ``trajs``; returns (batch, chosen global index, trajectory id)."""
    feats, masks, chosen, seg = [], [], [], []
    for k, traj in enumerate(trajs):
        for s in traj.steps:
            feats.append(s.features)
            masks.append(s.distribution.mask)
            chosen.append(s.global_index)
            seg.append(k)
    if not feats:
        return None, np.zeros(0, np.int64), np.zeros(0, np.int64)
    return StateBatch.stack(feats, masks), np.asarray(chosen), np.asarray(seg)


def _forward(params, batch: StateBatch, alpha):
    logits, cache = forward(params, batch.x_img, batch.x_txt, batch.x_mem)
    logp, p = masked_log_softmax(logits, batch.mask, alpha)
    return logp, p, cache


def _logprob_dlogits(p, chosen, coef, alpha):
    """d/dlogits of sum_i coef_i * log pi(chosen_i | s_i)."""
    d = -p * coef[:, None]
    d[np.arange(len(chosen)), chosen] += coef
    return d / alpha


# ---------------------------------------------------------------- losses

def bc_loss(params: ParamSet, batch: StateBatch, targets: np.ndarray, alpha: float):
    """Mean negative log-likelihood of the expert actions. Returns ``(value, grads)``."""
    rows = np.arange(len(targets))
    if not np.all(batch.mask[rows, targets]):
        bad = int(np.flatnonzero(~batch.mask[rows, targets])[0])
        raise IllegalExpertAction(f"expert action at row {bad} is masked")
    logp, p, cache = _forward(params, batch, alpha)
    value = -float(np.mean(logp[rows, targets]))
    coef = np.full(len(targets), 1.0 / len(targets))
    d = -_logprob_dlogits(p, targets, coef, alpha)
    return value, backward(params, cache, d)


def cpr_weights(rewards, alpha_cpr: float) -> np.ndarray:
    """Softmax of heuristic rewards at temperature ``alpha_cpr``."""
    if alpha_cpr <= 0:
        raise ValueError("alpha_cpr must be positive")
    r = np.asarray(rewards, dtype=np.float64) / alpha_cpr
    e = np.exp(r - r.max())
    return e / e.sum()


@dataclass
class CPRBatch:
    instance: QueryInstance
    trajectories: list
    rewards: np.ndarray
    alpha_cpr: float = 0.5

    def __post_init__(self):
        if len(self.trajectories) < 2 or len(self.trajectories) != len(self.rewards):
            raise ValueError("CPR batch needs K >= 2 trajectories with one reward each")
        if not np.all(np.isfinite(self.rewards)):
            raise NonFiniteLoss("non-finite heuristic reward")


def trajectory_logprobs(params: ParamSet, trajs: Sequence[Trajectory], alpha: float) -> np.ndarray:
    """log pi(tau) of each trajectory recomputed under ``params``."""
    batch, chosen, seg = trajectory_batch(trajs)
    if batch is None:
        return np.zeros(len(trajs))
    logp, _, _ = _forward(params, batch, alpha)
    return np.bincount(seg, logp[np.arange(len(chosen)), chosen], minlength=len(trajs))


def cpr_loss(params: ParamSet, batch: CPRBatch, alpha: float):
    """InfoNCE path ranking: ``-sum_k p(tau_k) log pi(tau_k)`` with the samples held fixed."""
    w = cpr_weights(batch.rewards, batch.alpha_cpr)
    sb, chosen, seg = trajectory_batch(batch.trajectories)
    if sb is None:
        return 0.0, zeros_like(params)
    logp, p, cache = _forward(params, sb, alpha)
    traj_logp = np.bincount(seg, logp[np.arange(len(chosen)), chosen], minlength=len(w))
    value = -float(np.dot(w, traj_logp))
    d = -_logprob_dlogits(p, chosen, w[seg], alpha)
    return value, backward(params, cache, d)


def reinforce_loss(params: ParamSet, traj: Trajectory, advantage: float, alpha: float):
    """Surrogate ``-(R - b) log pi(tau)``; its gradient is the score-function estimate."""
    sb, chosen, _ = trajectory_batch([traj])
    if sb is None:
        return 0.0, zeros_like(params)
    logp, p, cache = _forward(params, sb, alpha)
    value = -advantage * float(np.sum(logp[np.arange(len(chosen)), chosen]))
    d = -_logprob_dlogits(p, chosen, np.full(len(chosen), float(advantage)), alpha)
    return value, backward(params, cache, d)


def entropy_bonus_loss(params: ParamSet, trajs: Sequence[Trajectory], coef: float, alpha: float):
    """``-coef * sum_t H(pi(.|s_t))`` over the visited states."""
    sb, _, _ = trajectory_batch(trajs)
    if sb is None or coef == 0.0:
        return 0.0, zeros_like(params)
    logp, p, cache = _forward(params, sb, alpha)
    plogp = np.where(sb.mask, p * logp, 0.0)
    H = -plogp.sum(axis=1)
    dH = -(plogp + p * H[:, None]) / alpha
    return -coef * float(H.sum()), backward(params, cache, -coef * dH)


# ---------------------------------------------------------------- rewards

@dataclass(frozen=True)
class RewardSpec:
    lam: float = 0.03
    gamma: float = 0.05
    entropy_rollouts: int = 4
    cost_weights: tuple[float, float] = (1.0, 0.01)

    def __post_init__(self):
        if self.lam < 0 or self.gamma < 0 or min(self.cost_weights) < 0:
            raise ValueError("reward weights must be nonnegative")
        if self.entropy_rollouts < 1:
            raise ValueError("entropy_rollouts must be at least 1")


def trajectory_cost(traj: Trajectory, spec: RewardSpec, normalizer: float) -> float:
    wl, wt = spec.cost_weights
    total = sum(wl * s.output.latency + wt * s.output.tokens
                for s in traj.steps if s.output is not None)
    return total / normalizer


def episode_reward(answer, truth, traj: Trajectory, spec: RewardSpec, entropy_est: float,
                   normalizer: float) -> float:
    """``U(answer, truth) - lam * normalized cost - gamma * answer entropy``."""
    return (utility(answer, truth) - spec.lam * trajectory_cost(traj, spec, normalizer)
            - spec.gamma * entropy_est)


def answer_entropy(controller: Controller, instance: QueryInstance, env: Environment, M: int,
                   rng: np.random.Generator, alpha: float = 0.8) -> float:
    """Shannon entropy (nats) of the answers from ``M`` independent rollouts."""
    return entropy(estimate_marginal(controller, instance, env, M, rng, alpha=alpha))


@dataclass
class Baseline:
    value: float = 0.0
    decay: float = 0.99

    def update(self, reward: float) -> None:
        self.value = self.decay * self.value + (1.0 - self.decay) * reward


def reinforce_update(controller: Controller, instance: QueryInstance, env: Environment,
                     spec: RewardSpec, baseline: Baseline, rng: np.random.Generator, *,
                     alpha: float = 0.8, entropy_bonus: float = 0.0):
    """Roll out once and return ``(grads, info)`` for a descent step.

    ``grads`` is the gradient of ``-(R - b) log pi(tau)`` (plus the optional
    per-step entropy bonus); the baseline is updated with ``R`` afterwards.
    """
    res = run_inference(controller, instance, env, rng=rng, alpha=alpha)
    H = 0.0
    if spec.gamma > 0:
        H = answer_entropy(controller, instance, env, spec.entropy_rollouts, rng, alpha)
    R = episode_reward(res.answer, instance.truth, res.trajectory, spec, H, env.cost_normalizer)
    advantage = R - baseline.value
    _, g = reinforce_loss(controller.params, res.trajectory, advantage, alpha)
    if entropy_bonus:
        _, g_ent = entropy_bonus_loss(controller.params, [res.trajectory], entropy_bonus, alpha)
        g = add_grads(g, g_ent)
    baseline.update(R)
    info = {"reward": R, "advantage": advantage, "entropy": H,
            "utility": utility(res.answer, instance.truth), "cost": res.normalized_cost,
            "result": res}
    return g, info


# ---------------------------------------------------------------- curriculum

@dataclass(frozen=True)
class TrainingConfig:
    hidden: int = 256
    bc_steps: int = 400
    cpr_steps: int = 100
    rl_episodes: int = 1500
    bc_batch: int = 64
    cpr_k: int = 8
    expert_instances: int = 0
    cpr_reuse: int = 1
    cpr_instances: int = 1
    rl_batch: int = 1
    lr_bc: float = 3e-3
    lr_cpr: float = 1e-3
    lr_rl: float = 3e-4
    weight_decay: float = 0.01
    clip_norm: float = 1.0
    alpha_start: float = 2.0
    alpha_end: float = 0.8
    alpha_cpr: float = 0.5
    lam: float = 0.03
    gamma: float = 0.05
    entropy_rollouts: int = 4
    entropy_bonus: float = 0.01
    baseline_decay: float = 0.99
    cost_weights: tuple[float, float] = (1.0, 0.01)
    skip: tuple[str, ...] = ()

    def __post_init__(self):
        for name in ("bc_steps", "cpr_steps", "rl_episodes"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.expert_instances < 0:
            raise ValueError("expert_instances must be nonnegative")
        if self.cpr_k < 2 or min(self.bc_batch, self.cpr_reuse, self.rl_batch, self.cpr_instances) < 1:
            raise ValueError("cpr_k >= 2 and bc_batch, cpr_reuse, rl_batch, cpr_instances >= 1 are required")
        unknown = set(self.skip) - set(PHASES)
        if unknown:
            raise ValueError(f"unknown phases in skip: {sorted(unknown)}")

    @property
    def reward_spec(self) -> RewardSpec:
        return RewardSpec(self.lam, self.gamma, self.entropy_rollouts, tuple(self.cost_weights))

    @property
    def schedule(self) -> TemperatureSchedule:
        return TemperatureSchedule(self.alpha_start, self.alpha_end,
                                   self.bc_steps + self.cpr_steps + self.rl_episodes)

    def budget(self, phase: str) -> int:
        if phase in self.skip:
            return 0
        return {"bc": self.bc_steps, "cpr": self.cpr_steps, "rl": self.rl_episodes}[phase]

    def offset(self, phase: str) -> int:
        """Global step at which ``phase`` starts (for the temperature schedule)."""
        return {"bc": 0, "cpr": self.bc_steps, "rl": self.bc_steps + self.cpr_steps}[phase]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["cost_weights"] = list(self.cost_weights)
        d["skip"] = list(self.skip)
        return d


@dataclass
class PhaseState:
    """Resumable position inside one phase."""

    phase: str
    step: int
    opt: OptimizerState
    baseline: Baseline | None = None


@dataclass
class CurriculumResult:
    params: ParamSet
    rows: list = field(default_factory=list)
    states: dict = field(default_factory=dict)


REPORT_COLUMNS = ("phase", "step", "loss_or_reward", "lr", "temperature", "mean_cost", "mean_utility")


def _row(phase, step, value, lr, alpha, cost=None, util=None):
    return {"phase": phase, "step": step, "loss_or_reward": value, "lr": lr,
            "temperature": alpha, "mean_cost": cost, "mean_utility": util}


def _update(params, grads, opt, cfg):
    grads = clip_global_norm(grads, cfg.clip_norm)
    lr = opt.lr
    params, opt = adamw_step(params, grads, opt, lr)
    return params, opt, lr


def _check(value, phase, step):
    if not math.isfinite(value):
        raise NonFiniteLoss(f"non-finite loss in phase {phase} at step {step}")


def _new_opt(params, cfg, phase):
    base = {"bc": cfg.lr_bc, "cpr": cfg.lr_cpr, "rl": cfg.lr_rl}[phase]
    return OptimizerState.for_params(params, base, cfg.budget(phase), weight_decay=cfg.weight_decay)


def phase_bc(params, controller, env, pairs, cfg, rng, *, state=None, callback=None):
    n_steps = cfg.budget("bc")
    state = state or PhaseState("bc", 0, _new_opt(params, cfg, "bc"))
    rows = []
    if n_steps == 0 or not pairs:
        return params, state, rows
    batch, targets = expert_batch(pairs, controller, env)
    sched = cfg.schedule
    while state.step < n_steps:
        idx = rng.choice(len(targets), size=min(cfg.bc_batch, len(targets)), replace=False)
        alpha = temperature(cfg.offset("bc") + state.step, sched)
        value, g = bc_loss(params, batch.take(idx), targets[idx], alpha)
        _check(value, "bc", state.step)
        params, state.opt, lr = _update(params, g, state.opt, cfg)
        controller.params = params
        rows.append(_row("bc", state.step, value, lr, alpha))
        state.step += 1
        if callback:
            callback(state, params)
    return params, state, rows


def phase_cpr(params, controller, env, instances, cfg, rng, *, state=None, callback=None):
    """Path ranking; each update averages ``cfg.cpr_instances`` K-sample batches."""
    n_steps = cfg.budget("cpr")
    state = state or PhaseState("cpr", 0, _new_opt(params, cfg, "cpr"))
    rows = []
    sched = cfg.schedule
    batches = []
    while state.step < n_steps:
        alpha = temperature(cfg.offset("cpr") + state.step, sched)
        if not batches or state.step % cfg.cpr_reuse == 0:
            batches, costs, utils = [], [], []
            for _ in range(cfg.cpr_instances):
                inst = instances[int(rng.integers(len(instances)))]
                results = [run_inference(controller, inst, env, rng=rng, alpha=alpha)
                           for _ in range(cfg.cpr_k)]
                trajs = [r.trajectory for r in results]
                rewards = np.array([heuristic_reward(t, inst, env.heuristic, env.graph, env.T_max)
                                    for t in trajs])
                batches.append(CPRBatch(inst, trajs, rewards, cfg.alpha_cpr))
                costs += [r.normalized_cost for r in results]
                utils += [utility(r.answer, inst.truth) for r in results]
        losses = [cpr_loss(params, b, alpha) for b in batches]
        value = float(np.mean([v for v, _ in losses]))
        _check(value, "cpr", state.step)
        g = scale_grads(add_grads(*(g for _, g in losses)), 1.0 / len(losses))
        params, state.opt, lr = _update(params, g, state.opt, cfg)
        controller.params = params
        rows.append(_row("cpr", state.step, value, lr, alpha, float(np.mean(costs)),
                         float(np.mean(utils))))
        state.step += 1
        if callback:
            callback(state, params)
    return params, state, rows


def phase_rl(params, controller, env, instances, cfg, rng, *, state=None, callback=None):
    """REINFORCE; ``cfg.rl_batch`` episodes are averaged into each optimizer step."""
    n_steps = cfg.budget("rl")
    n_updates = -(-n_steps // cfg.rl_batch)
    state = state or PhaseState("rl", 0, OptimizerState.for_params(
        params, cfg.lr_rl, n_updates, weight_decay=cfg.weight_decay),
        Baseline(0.0, cfg.baseline_decay))
    rows = []
    spec = cfg.reward_spec
    sched = cfg.schedule
    while state.step < n_steps:
        alpha = temperature(cfg.offset("rl") + state.step, sched)
        n = min(cfg.rl_batch, n_steps - state.step)
        grads, infos = [], []
        for _ in range(n):
            inst = instances[int(rng.integers(len(instances)))]
            g, info = reinforce_update(controller, inst, env, spec, state.baseline, rng,
                                       alpha=alpha, entropy_bonus=cfg.entropy_bonus)
            _check(info["reward"], "rl", state.step)
            grads.append(g)
            infos.append(info)
        g = add_grads(*grads) if n == 1 else scale_grads(add_grads(*grads), 1.0 / n)
        params, state.opt, lr = _update(params, g, state.opt, cfg)
        controller.params = params
        for info in infos:
            rows.append(_row("rl", state.step, info["reward"], lr, alpha, info["cost"],
                             info["utility"]))
            state.step += 1
        if callback:
            callback(state, params)
    return params, state, rows


def run_curriculum(env: Environment, instances: Sequence[QueryInstance], cfg: TrainingConfig,
                   rng: np.random.Generator, *, params: ParamSet | None = None,
                   extractors=None, expert_pairs=None,
                   on_phase_end: Callable | None = None, resume: PhaseState | None = None,
                   on_step: Callable | None = None) -> CurriculumResult:
    """Phases I -> II -> III in order, skipping any listed in ``cfg.skip``.

    Behaviour cloning sees expert demonstrations for the first
    ``cfg.expert_instances`` instances only (all when 0); the later phases use
    every instance.

    ``on_phase_end(phase, params, phase_state)`` fires after each phase (used for
    checkpoints). ``resume`` restarts inside the phase it names.
    """
    if not instances:
        raise ValueError("no training instances")
    if params is None:
        params = init_params(rng, env.graph.n_actions, cfg.hidden)
    controller = Controller(params, env.graph, extractors)
    result = CurriculumResult(params)
    start = PHASES.index(resume.phase) if resume else 0
    for phase in PHASES[start:]:
        state = resume if resume and resume.phase == phase else None
        cb = (lambda s, p, _ph=phase: on_step(_ph, p, s)) if on_step else None
        if phase == "bc":
            if expert_pairs is None and cfg.budget("bc"):
                demo = instances[:cfg.expert_instances] if cfg.expert_instances else instances
                expert_pairs = collect_expert_pairs(env, demo)
            pairs = expert_pairs
            params, state, rows = phase_bc(params, controller, env, pairs, cfg, rng,
                                           state=state, callback=cb)
        elif phase == "cpr":
            params, state, rows = phase_cpr(params, controller, env, instances, cfg, rng,
                                            state=state, callback=cb)
        else:
            params, state, rows = phase_rl(params, controller, env, instances, cfg, rng,
                                           state=state, callback=cb)
        result.rows.extend(rows)
        result.states[phase] = state
        log.info("phase %s finished after %d steps", phase, state.step)
        if on_phase_end:
            on_phase_end(phase, params, state)
    result.params = params
    return result


def argmax_agreement(controller: Controller, pairs: Sequence[ExpertPair], env: Environment) -> float:
    """Fraction of expert states where the policy's most likely action is the expert's."""
    batch, targets = expert_batch(pairs, controller, env)
    logits, _ = forward(controller.params, batch.x_img, batch.x_txt, batch.x_mem)
    masked = np.where(batch.mask, logits, -np.inf)
    return float(np.mean(np.argmax(masked, axis=1) == targets))
