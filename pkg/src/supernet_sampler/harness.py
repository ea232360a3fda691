"""Run configuration, evaluation, lambda sweeps, ablations and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import math
import warnings
import zipfile
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .environment import (
    Environment,
    QueryInstance,
    SuiteConfig,
    expert_rollout,
    generate_suite,
    load_suite,
    standard_registry,
    synthesize_answer,
    utility,
)
from .exceptions import ConfigError, EmptySuite, GraphFingerprintMismatch, VersionMismatch
from .optcore import OptimizerState, ParamSet
from .policy import ActionDistribution, Controller, Step, Trajectory
from .runtime import run_inference
from .supernet import EARLY_EXIT, ENTRY, SupernetGraph, build_graph, load_spec
from .training import REPORT_COLUMNS, Baseline, PhaseState, TrainingConfig, run_curriculum

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
_ZIP_DATE = (1980, 1, 1, 0, 0, 0)


# ---------------------------------------------------------------- configuration

@dataclass(frozen=True)
class RunConfig:
    graph_spec: str | None = None
    suite: SuiteConfig = field(default_factory=SuiteConfig)
    n_eval: int = 100
    suite_seed: int = 0
    training: TrainingConfig = field(default_factory=TrainingConfig)
    train_seed: int = 0
    eval_seed: int = 1000
    env_seed: int = 0
    T_max: int = 8
    memory_capacity: int = 16
    allow_early_exit: bool = True
    min_steps_before_exit: int = 0
    eval_alpha: float = 0.8
    eval_greedy: bool = False
    sweep_mode: str = "refit"
    lambda_grid: tuple[float, ...] = (0.0, 0.003, 0.03, 0.3)
    seeds: tuple[int, ...] = (0, 1, 2)
    checkpoint_every: int = 0
    output_dir: str = "runs/default"

    def __post_init__(self):
        if self.graph_spec is not None and not Path(self.graph_spec).exists():
            raise ConfigError(f"graph spec {self.graph_spec} does not exist")
        if self.sweep_mode not in ("refit", "full"):
            raise ConfigError(f"sweep_mode must be 'refit' or 'full', got {self.sweep_mode!r}")
        if self.n_eval < 0 or self.T_max < 0 or self.checkpoint_every < 0:
            raise ConfigError("n_eval, T_max and checkpoint_every must be nonnegative")
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")

    def to_dict(self) -> dict:
        return json.loads(json.dumps(dataclasses.asdict(self)))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            if "suite" in data:
                s = dict(data["suite"])
                if "plan_length" in s:
                    s["plan_length"] = tuple(s["plan_length"])
                data["suite"] = SuiteConfig(**s)
            if "training" in data:
                t = dict(data["training"])
                for k in ("cost_weights", "skip"):
                    if k in t:
                        t[k] = tuple(t[k])
                data["training"] = TrainingConfig(**t)
            for k in ("lambda_grid", "seeds"):
                if k in data:
                    data[k] = tuple(data[k])
            return cls(**data)
        except ConfigError:
            raise
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def header(self) -> str:
        """Single-line echo of every resolved config value, for report headers."""
        return "# config: " + json.dumps(self.to_dict(), sort_keys=True)


def build_environment(config: RunConfig, *, allow_early_exit: bool | None = None) -> Environment:
    reg = standard_registry(config.env_seed)
    if config.graph_spec is None:
        from .environment import standard_graph_spec
        spec = standard_graph_spec()
    else:
        spec = load_spec(config.graph_spec)
    graph = build_graph(spec, reg)
    exit_ok = config.allow_early_exit if allow_early_exit is None else allow_early_exit
    return Environment(graph, reg, T_max=config.T_max,
                       cost_weights=tuple(config.training.cost_weights),
                       memory_capacity=config.memory_capacity, allow_early_exit=exit_ok,
                       min_steps_before_exit=config.min_steps_before_exit)


def build_suites(config: RunConfig) -> tuple[list[QueryInstance], list[QueryInstance]]:
    """Disjoint train and evaluation suites drawn from the same generator."""
    train = generate_suite(config.suite_seed, config.suite)
    held = generate_suite(config.suite_seed, replace(config.suite, n_instances=config.n_eval),
                          start=config.suite.n_instances)
    return train, held


# ---------------------------------------------------------------- checkpoints

@dataclass
class Checkpoint:
    params: ParamSet
    opt: OptimizerState | None
    rng_state: dict | None
    meta: dict
    fingerprint: str

    def rng(self) -> np.random.Generator:
        g = np.random.default_rng()
        if self.rng_state is not None:
            g.bit_generator.state = self.rng_state
        return g


def _npy(arr) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(arr), allow_pickle=False)
    return buf.getvalue()


def _write(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_ZIP_DATE)
    info.compress_type = zipfile.ZIP_DEFLATED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path, params: ParamSet, graph: SupernetGraph, *,
                    opt: OptimizerState | None = None, rng: np.random.Generator | None = None,
                    meta: dict | None = None) -> None:
    """Deterministic zip of .npy arrays plus a JSON header; identical inputs give identical bytes."""
    header = {
        "checkpoint_version": CHECKPOINT_VERSION,
        "graph_fingerprint": graph.fingerprint(),
        "params": sorted(params),
        "rng_state": rng.bit_generator.state if rng is not None else None,
        "optimizer": None,
        "meta": meta or {},
    }
    if opt is not None:
        header["optimizer"] = {"base_lr": opt.base_lr, "total_steps": opt.total_steps,
                               "betas": list(opt.betas), "eps": opt.eps,
                               "weight_decay": opt.weight_decay, "step": opt.step}
    with zipfile.ZipFile(path, "w") as zf:
        _write(zf, "header.json", json.dumps(header, sort_keys=True).encode())
        for k in sorted(params):
            _write(zf, f"params/{k}.npy", _npy(params[k]))
        if opt is not None:
            for k in sorted(opt.m):
                _write(zf, f"adam_m/{k}.npy", _npy(opt.m[k]))
                _write(zf, f"adam_v/{k}.npy", _npy(opt.v[k]))


def load_checkpoint(path, graph: SupernetGraph | None = None) -> Checkpoint:
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("checkpoint_version") != CHECKPOINT_VERSION:
            raise VersionMismatch(
                f"checkpoint version {header.get('checkpoint_version')} != {CHECKPOINT_VERSION}")
        if graph is not None and header["graph_fingerprint"] != graph.fingerprint():
            raise GraphFingerprintMismatch("checkpoint was trained on a different graph")

        def arr(name):
            return np.load(io.BytesIO(zf.read(name)), allow_pickle=False)

        params = {k: arr(f"params/{k}.npy") for k in header["params"]}
        opt = None
        if header["optimizer"] is not None:
            o = header["optimizer"]
            opt = OptimizerState(o["base_lr"], o["total_steps"], tuple(o["betas"]), o["eps"],
                                 o["weight_decay"], o["step"],
                                 {k: arr(f"adam_m/{k}.npy") for k in header["params"]},
                                 {k: arr(f"adam_v/{k}.npy") for k in header["params"]})
    return Checkpoint(params, opt, header["rng_state"], header["meta"], header["graph_fingerprint"])


def phase_state_from(ckpt: Checkpoint) -> PhaseState | None:
    m = ckpt.meta
    if "phase" not in m or ckpt.opt is None:
        return None
    baseline = Baseline(m["baseline"], m["baseline_decay"]) if m.get("baseline") is not None else None
    return PhaseState(m["phase"], m["phase_step"], ckpt.opt, baseline)


# ---------------------------------------------------------------- training entry point

@dataclass
class TrainOutput:
    params: ParamSet
    rows: list
    checkpoints: list = field(default_factory=list)


def write_report(path, rows: Sequence[dict], header: str, columns=REPORT_COLUMNS) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(header + "\n")
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in columns})


def train(config: RunConfig, *, env: Environment | None = None, instances=None,
          out_dir=None, params: ParamSet | None = None, resume=None, seed: int | None = None,
          training: TrainingConfig | None = None) -> TrainOutput:
    """Run the curriculum; checkpoint after each phase and write the phase report."""
    env = env or build_environment(config)
    if instances is None:
        instances = build_suites(config)[0]
    cfg = training or config.training
    seed = config.train_seed if seed is None else seed
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    state = None
    if resume is not None:
        ckpt = load_checkpoint(resume, env.graph)
        params = ckpt.params
        state = phase_state_from(ckpt)
        rng = ckpt.rng()
    output = TrainOutput(params, [])
    meta_base = {"train_seed": seed, "training": cfg.to_dict()}

    def _meta(phase, st):
        m = dict(meta_base, phase=phase, phase_step=st.step)
        if st.baseline is not None:
            m.update(baseline=st.baseline.value, baseline_decay=st.baseline.decay)
        return m

    def on_phase_end(phase, p, st):
        if out is not None:
            path = out / f"phase_{phase}.ckpt"
            save_checkpoint(path, p, env.graph, opt=st.opt, rng=rng, meta=_meta(phase, st))
            output.checkpoints.append(path)

    def on_step(phase, p, st):
        every = config.checkpoint_every
        if out is not None and every and st.step % every == 0 and st.step < cfg.budget(phase):
            path = out / f"step_{phase}_{st.step}.ckpt"
            save_checkpoint(path, p, env.graph, opt=st.opt, rng=rng, meta=_meta(phase, st))
            output.checkpoints.append(path)

    result = run_curriculum(env, instances, cfg, rng, params=params, resume=state,
                            on_phase_end=on_phase_end,
                            on_step=on_step if config.checkpoint_every else None)
    output.params, output.rows = result.params, result.rows
    if out is not None:
        save_checkpoint(out / "final.ckpt", result.params, env.graph, meta=meta_base)
        write_report(out / "report.csv", result.rows, config.header())
    return output


# ---------------------------------------------------------------- evaluation

class ExpertPolicy:
    """The scripted expert wrapped to look like a policy for evaluation."""

    def run(self, instance: QueryInstance, env: Environment) -> Trajectory:
        traj = Trajectory()
        memory, position = env.new_memory(), ENTRY
        for t, (state, action) in enumerate(expert_rollout(instance, env)):
            legal = env.legal(position, t)
            choice = legal.actions.index(action)
            probs = np.zeros(len(legal))
            probs[choice] = 1.0
            dist = ActionDistribution(legal.actions, probs, np.zeros(legal.n_total), legal.mask(),
                                      legal.index, 1.0)
            step = Step(position, dist, choice, ())
            traj.steps.append(step)
            if action is EARLY_EXIT:
                traj.terminated_by = "EarlyExit"
                break
            step.output, step.summary, step.error, memory = env.step(
                instance, memory, position, action, t + 1)
            position = action.container
        else:
            traj.terminated_by = "MaxSteps"
        return traj


@dataclass
class EvalReport:
    metrics: dict
    rows: list

    def __getitem__(self, key):
        return self.metrics[key]


EVAL_COLUMNS = ("uid", "utility", "correct", "normalized_cost", "latency", "tokens",
                "n_invocations", "terminated_by", "answer")


def evaluate(policy, suite: Sequence[QueryInstance], env: Environment, *, alpha: float = 0.8,
             greedy: bool = False, seed: int = 1000, lam: float = 0.0,
             out_dir=None, header: str = "") -> EvalReport:
    """Accuracy, mean utility, mean cost, mean length and early-exit rate over ``suite``.

    Sampling uses one generator per instance seeded by ``(seed, index)`` so that
    different policies see common random numbers.
    """
    if not suite:
        raise EmptySuite("evaluation suite is empty")
    rows = []
    for i, inst in enumerate(suite):
        if isinstance(policy, ExpertPolicy):
            traj = policy.run(inst, env)
            answer = synthesize_answer(traj, inst)
        else:
            rng = np.random.default_rng([seed, i])
            res = run_inference(policy, inst, env, rng=rng, alpha=alpha, greedy=greedy)
            traj, answer = res.trajectory, res.answer
        lat, tok, cost = env.trajectory_costs(traj)
        u = utility(answer, inst.truth)
        rows.append({"uid": inst.uid, "utility": u, "correct": int(u == 1.0),
                     "normalized_cost": cost, "latency": lat, "tokens": tok,
                     "n_invocations": traj.n_invocations, "terminated_by": traj.terminated_by,
                     "answer": json.dumps(answer, sort_keys=True)})
    n = len(rows)
    mean = lambda k: float(sum(r[k] for r in rows) / n)  # noqa: E731
    metrics = {
        "n": n,
        "accuracy": mean("correct"),
        "mean_utility": mean("utility"),
        "mean_cost": mean("normalized_cost"),
        "mean_length": mean("n_invocations"),
        "early_exit_rate": sum(r["terminated_by"] == "EarlyExit" for r in rows) / n,
        "lambda": lam,
    }
    metrics["mean_objective"] = metrics["mean_utility"] - lam * metrics["mean_cost"]
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report(out / "eval_instances.csv", rows, header, EVAL_COLUMNS)
        (out / "eval_metrics.json").write_text(json.dumps(metrics, indent=2, sort_keys=True) + "\n")
    return EvalReport(metrics, rows)


# ---------------------------------------------------------------- sweep

@dataclass(frozen=True)
class FrontierPoint:
    lam: float
    mean_utility: float
    mean_normalized_cost: float
    accuracy: float
    n_seeds: int
    errors: tuple = ()


FRONTIER_COLUMNS = ("lambda", "mean_utility", "mean_normalized_cost", "accuracy", "n_seeds", "errors")


def dedupe_grid(grid: Sequence[float]) -> list[float]:
    if not grid:
        raise ConfigError("lambda grid is empty")
    if any(g < 0 for g in grid):
        raise ConfigError("lambda values must be nonnegative")
    out = list(dict.fromkeys(float(g) for g in grid))
    if len(out) != len(grid):
        warnings.warn(f"duplicate lambda values removed: {list(grid)} -> {out}", stacklevel=2)
    return out


def pareto_sweep(config: RunConfig, lambda_grid: Sequence[float] | None = None, *,
                 mode: str | None = None, out_dir=None) -> list[FrontierPoint]:
    """Train and evaluate one policy per (lambda, seed); average over seeds.

    ``mode="refit"`` shares a Phase I/II policy per seed and refits Phase III per
    lambda; ``mode="full"`` reruns the whole curriculum for each lambda.
    """
    grid = dedupe_grid(config.lambda_grid if lambda_grid is None else lambda_grid)
    mode = mode or config.sweep_mode
    env = build_environment(config)
    train_set, eval_set = build_suites(config)
    results = {lam: [] for lam in grid}
    errors = {lam: [] for lam in grid}
    for seed in config.seeds:
        shared = None
        if mode == "refit":
            pre = replace(config.training, skip=tuple(set(config.training.skip) | {"rl"}))
            shared = train(config, env=env, instances=train_set, seed=seed, training=pre).params
        for lam in grid:
            try:
                if mode == "refit":
                    cfg = replace(config.training, lam=lam,
                                  skip=tuple(sorted(set(config.training.skip) | {"bc", "cpr"})))
                    params = train(config, env=env, instances=train_set, seed=seed + 7919,
                                   params={k: v.copy() for k, v in shared.items()},
                                   training=cfg).params
                else:
                    cfg = replace(config.training, lam=lam)
                    params = train(config, env=env, instances=train_set, seed=seed, training=cfg).params
                rep = evaluate(Controller(params, env.graph), eval_set, env, alpha=config.eval_alpha,
                               greedy=config.eval_greedy, seed=config.eval_seed + seed, lam=lam)
                results[lam].append(rep.metrics)
            except Exception as exc:  # one failed point must not abort the sweep
                log.warning("sweep point lambda=%s seed=%s failed: %s", lam, seed, exc)
                errors[lam].append(f"seed {seed}: {type(exc).__name__}: {exc}")
    points = []
    for lam in grid:
        ms = results[lam]
        avg = (lambda k: float(np.mean([m[k] for m in ms]))) if ms else (lambda k: math.nan)
        points.append(FrontierPoint(lam, avg("mean_utility"), avg("mean_cost"), avg("accuracy"),
                                    len(ms), tuple(errors[lam])))
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_report(Path(out_dir) / "frontier.csv",
                     [{"lambda": p.lam, "mean_utility": p.mean_utility,
                       "mean_normalized_cost": p.mean_normalized_cost, "accuracy": p.accuracy,
                       "n_seeds": p.n_seeds, "errors": "; ".join(p.errors)} for p in points],
                     config.header(), FRONTIER_COLUMNS)
    return points


def frontier_violations(points: Sequence[FrontierPoint]) -> list[tuple[float, float, float]]:
    """Adjacent pairs (by increasing lambda) where mean cost goes up: ``(lam_a, lam_b, rise)``."""
    ordered = sorted(points, key=lambda p: p.lam)
    return [(a.lam, b.lam, b.mean_normalized_cost - a.mean_normalized_cost)
            for a, b in zip(ordered, ordered[1:])
            if b.mean_normalized_cost > a.mean_normalized_cost]


def frontier_is_monotone(points, tol: float = 0.02, max_violations: int = 1) -> bool:
    v = frontier_violations(points)
    return len(v) <= max_violations and all(rise <= tol for _, _, rise in v)


# ---------------------------------------------------------------- ablation

ABLATIONS = ("full", "no_early_exit", "no_path_rank", "no_warmup")


@dataclass
class AblationReport:
    rows: list

    def row(self, name: str) -> dict:
        return next(r for r in self.rows if r["config"] == name)


def ablate(config: RunConfig, *, variants: Sequence[str] = ABLATIONS, seeds=None,
           out_dir=None) -> AblationReport:
    """Rerun training with one component removed and compare against the full run.

    ``delta_cost`` is the relative change in mean normalized cost (percent).
    """
    variants = list(dict.fromkeys(["full", *variants]))
    unknown = set(variants) - set(ABLATIONS)
    if unknown:
        raise ConfigError(f"unknown ablation variants: {sorted(unknown)}")
    seeds = config.seeds if seeds is None else seeds
    train_set, eval_set = build_suites(config)
    per = {v: [] for v in variants}
    for seed in seeds:
        for v in variants:
            env = build_environment(config, allow_early_exit=False if v == "no_early_exit" else None)
            skip = set(config.training.skip)
            if v == "no_path_rank":
                skip.add("cpr")
            if v == "no_warmup":
                skip.add("bc")
            cfg = replace(config.training, skip=tuple(sorted(skip)))
            params = train(config, env=env, instances=train_set, seed=seed, training=cfg).params
            rep = evaluate(Controller(params, env.graph), eval_set, env, alpha=config.eval_alpha,
                           greedy=config.eval_greedy, seed=config.eval_seed + seed,
                           lam=config.training.lam)
            per[v].append(rep.metrics)
    full_cost = float(np.mean([m["mean_cost"] for m in per["full"]]))
    rows = []
    for v in variants:
        acc = float(np.mean([m["accuracy"] for m in per[v]]))
        cost = float(np.mean([m["mean_cost"] for m in per[v]]))
        rows.append({"config": v, "accuracy": acc, "mean_cost": cost,
                     "delta_cost": 100.0 * (cost - full_cost) / full_cost if full_cost else 0.0,
                     "per_seed_cost": [m["mean_cost"] for m in per[v]]})
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        write_report(Path(out_dir) / "ablation.csv", rows, config.header(),
                     ("config", "accuracy", "mean_cost", "delta_cost"))
    return AblationReport(rows)


def load_eval_suite(config: RunConfig, path=None) -> list[QueryInstance]:
    return load_suite(path) if path else build_suites(config)[1]
