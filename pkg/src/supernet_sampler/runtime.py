"""Inference rollouts, exact enumeration, answer marginals and audit traces."""
from __future__ import annotations

import io
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from .encoder import State
from .environment import Environment, QueryInstance, canonicalize, synthesize_answer
from .exceptions import SinkUnavailable
from .memory import Memory, MemoryEntry
from .policy import Controller, Step, Trajectory, sample_index
from .supernet import EARLY_EXIT, ENTRY, legal_actions, parse_action

TRACE_VERSION = 1


@dataclass
class TraceRecord:
    meta: dict
    steps: list = field(default_factory=list)

    def lines(self) -> list[str]:
        return [json.dumps(self.meta)] + [json.dumps(s) for s in self.steps]


@dataclass
class InferenceResult:
    answer: dict
    trajectory: Trajectory
    trace: TraceRecord
    latency: float
    tokens: int
    normalized_cost: float

    @property
    def costs(self) -> tuple[float, int, float]:
        return (self.latency, self.tokens, self.normalized_cost)


def answer_key(answer) -> str:
    """Canonical, hashable form of an answer used for marginals and entropy."""
    items = sorted((canonicalize(k), canonicalize(v)) for k, v in answer.items())
    return json.dumps(items)


def _step_record(t: int, step: Step) -> dict:
    out = step.output
    return {
        "kind": "step",
        "step": t,
        "position": step.position,
        "legal": step.distribution.names,
        "probs": [float(p) for p in step.distribution.probs],
        "chosen": step.action.name,
        "chosen_prob": step.prob,
        "latency": out.latency if out else 0.0,
        "tokens": out.tokens if out else 0,
        "summary": step.summary,
        "error": step.error,
        "state_digest": step.digest,
    }


def run_inference(controller: Controller, instance: QueryInstance, env: Environment, *,
                  T_max: int | None = None, rng: np.random.Generator | None = None,
                  alpha: float = 0.8, greedy: bool = False, meta: dict | None = None,
                  ) -> InferenceResult:
    """Sample (or greedily decode) one workflow, executing tools as it goes."""
    T_max = env.T_max if T_max is None else T_max
    if rng is None and not greedy:
        raise ValueError("sampling needs an rng")
    memory, position = env.new_memory(), ENTRY
    traj = Trajectory()
    for t in range(T_max):
        legal = env.legal(position, t)
        feats = controller.features(env.state(instance, memory, position))
        dist = controller.distribution(feats, legal, alpha)
        choice = dist.argmax() if greedy else sample_index(dist, rng)
        step = Step(position, dist, choice, feats)
        traj.steps.append(step)
        action = step.action
        if action is EARLY_EXIT:
            traj.terminated_by = "EarlyExit"
            break
        step.output, step.summary, step.error, memory = env.step(
            instance, memory, position, action, t + 1)
        position = action.container
    else:
        traj.terminated_by = "MaxSteps"

    answer = synthesize_answer(traj, instance)
    latency, tokens, cost = env.trajectory_costs(traj)
    header = {
        "kind": "meta",
        "trace_version": TRACE_VERSION,
        "instance": instance.to_record(),
        "graph_fingerprint": controller.graph.fingerprint(),
        "temperature": alpha,
        "greedy": greedy,
        "T_max": T_max,
        "allow_early_exit": env.allow_early_exit,
        "min_steps_before_exit": env.min_steps_before_exit,
        "memory_capacity": env.memory_capacity,
        "seed": None,
        "lambda": None,
        "checkpoint": None,
    }
    header.update(meta or {})
    header.update({
        "answer": answer,
        "terminated_by": traj.terminated_by,
        "n_steps": len(traj),
        "latency": latency,
        "tokens": tokens,
        "normalized_cost": cost,
    })
    trace = TraceRecord(header, [_step_record(i + 1, s) for i, s in enumerate(traj.steps)])
    return InferenceResult(answer, traj, trace, latency, tokens, cost)


def emit_trace(result: InferenceResult, sink) -> None:
    """Write the trace as JSON lines: one metadata record, then one per step.

    ``sink`` is a path (appended to) or any object with ``write``.
    """
    text = "\n".join(result.trace.lines()) + "\n"
    if hasattr(sink, "write"):
        try:
            sink.write(text)
        except (OSError, ValueError) as exc:
            raise SinkUnavailable(str(exc)) from exc
        return
    try:
        with open(sink, "a") as fh:
            fh.write(text)
    except OSError as exc:
        raise SinkUnavailable(f"cannot write trace to {sink}: {exc}") from exc


def read_traces(source) -> list[TraceRecord]:
    """Split a JSON-lines trace stream into records (a meta line starts each)."""
    if isinstance(source, (str, Path)):
        lines = Path(source).read_text().splitlines()
    elif isinstance(source, io.IOBase) or hasattr(source, "read"):
        lines = source.read().splitlines()
    else:
        lines = list(source)
    records: list[TraceRecord] = []
    for line in lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        if rec.get("kind") == "meta":
            records.append(TraceRecord(rec))
        elif records:
            records[-1].steps.append(rec)
        else:
            raise ValueError("trace step before any metadata record")
    return records


@dataclass
class ReplayReport:
    n_traces: int = 0
    n_steps: int = 0
    max_abs_error: float = 0.0
    failures: list = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.failures


def verify_traces(records: Iterable[TraceRecord], controller: Controller, *,
                  tol: float = 1e-9) -> ReplayReport:
    """Recompute every logged step distribution from the parameters and compare."""
    report = ReplayReport()
    graph = controller.graph
    for n, rec in enumerate(records):
        report.n_traces += 1
        meta = rec.meta
        if meta.get("trace_version") != TRACE_VERSION:
            report.failures.append((n, None, f"trace_version {meta.get('trace_version')}"))
            continue
        if meta.get("graph_fingerprint") != graph.fingerprint():
            report.failures.append((n, None, "graph fingerprint differs"))
            continue
        inst = QueryInstance.from_record(meta["instance"])
        memory = Memory(capacity=meta["memory_capacity"])
        position = ENTRY
        for i, st in enumerate(rec.steps):
            report.n_steps += 1
            t = st["step"] - 1
            if st["position"] != position or t != i:
                report.failures.append((n, st["step"], "step/position sequence broken"))
                break
            legal = legal_actions(graph, position, step=t,
                                  min_steps_before_exit=meta["min_steps_before_exit"],
                                  allow_early_exit=meta["allow_early_exit"])
            if legal.names != st["legal"]:
                report.failures.append((n, st["step"], "legal action set differs"))
                break
            feats = controller.features(State(inst.query, inst.image, inst.context, memory, position))
            dist = controller.distribution(feats, legal, meta["temperature"])
            err = float(np.max(np.abs(dist.probs - np.asarray(st["probs"])))) if len(legal) else 0.0
            report.max_abs_error = max(report.max_abs_error, err)
            if err > tol:
                report.failures.append((n, st["step"], f"probability error {err:.3e}"))
            action = parse_action(st["chosen"])
            if action is EARLY_EXIT:
                break
            memory = memory.append(MemoryEntry(action.container, st["summary"], st["step"]))
            position = action.container
    return report


def enumerate_trajectories(controller: Controller, instance: QueryInstance, env: Environment, *,
                           alpha: float = 0.8, T_max: int | None = None,
                           limit: int = 10_000) -> list[tuple[Trajectory, float]]:
    """Every legal trajectory with its probability under the policy (depth-first)."""
    T_max = env.T_max if T_max is None else T_max
    out: list[tuple[Trajectory, float]] = []

    def visit(memory, position, t, steps, prob):
        if len(out) > limit:
            raise RuntimeError(f"more than {limit} trajectories")
        if t == T_max:
            out.append((Trajectory(steps, "MaxSteps"), prob))
            return
        legal = env.legal(position, t)
        feats = controller.features(env.state(instance, memory, position))
        dist = controller.distribution(feats, legal, alpha)
        for i, action in enumerate(dist.actions):
            p = float(dist.probs[i])
            if p == 0.0:
                continue
            step = Step(position, dist, i, feats)
            if action is EARLY_EXIT:
                out.append((Trajectory(steps + [step], "EarlyExit"), prob * p))
                continue
            step.output, step.summary, step.error, mem = env.step(
                instance, memory, position, action, t + 1)
            visit(mem, action.container, t + 1, steps + [step], prob * p)

    visit(env.new_memory(), ENTRY, 0, [], 1.0)
    return out


def exact_marginal(controller, instance, env, *, alpha: float = 0.8, T_max=None,
                   limit: int = 10_000) -> dict[str, float]:
    """Answer distribution obtained by summing trajectory probabilities per answer."""
    dist: dict[str, float] = {}
    for traj, p in enumerate_trajectories(controller, instance, env, alpha=alpha,
                                          T_max=T_max, limit=limit):
        key = answer_key(synthesize_answer(traj, instance))
        dist[key] = dist.get(key, 0.0) + p
    return dist


def estimate_marginal(controller, instance, env, M: int, rng: np.random.Generator, *,
                      alpha: float = 0.8, T_max=None) -> dict[str, float]:
    """Monte Carlo answer distribution from ``M`` independent rollouts."""
    if M < 1:
        raise ValueError("M must be at least 1")
    counts = Counter()
    for _ in range(M):
        res = run_inference(controller, instance, env, T_max=T_max, rng=rng, alpha=alpha)
        counts[answer_key(res.answer)] += 1
    return {k: c / M for k, c in sorted(counts.items())}


def total_variation(p: dict, q: dict) -> float:
    keys = set(p) | set(q)
    return 0.5 * sum(abs(p.get(k, 0.0) - q.get(k, 0.0)) for k in keys)


def entropy(dist: dict) -> float:
    return float(-sum(p * math.log(p) for p in dist.values() if p > 0))
