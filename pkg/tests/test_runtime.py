import io
import json
import math

import numpy as np
import pytest

from conftest import identity_registry, linear_spec, random_controller, tiny_env
from supernet_sampler.environment import CT, Environment
from supernet_sampler.exceptions import SinkUnavailable
from supernet_sampler.supernet import build_graph
from supernet_sampler.runtime import (
    answer_key,
    emit_trace,
    entropy,
    enumerate_trajectories,
    estimate_marginal,
    exact_marginal,
    read_traces,
    run_inference,
    total_variation,
    verify_traces,
)


@pytest.fixture
def env():
    return tiny_env(n_containers=2, tools=2, T_max=3)


def test_enumeration_is_a_distribution(env, small_suite):
    for seed, scale in ((0, 1.0), (1, 5.0)):
        ctrl = random_controller(env, seed=seed, scale=scale)
        trajs = enumerate_trajectories(ctrl, small_suite[0], env)
        assert abs(sum(p for _, p in trajs) - 1.0) <= 1e-12
        assert len({t.key() for t, _ in trajs}) == len(trajs)


def test_exact_marginal_matches_monte_carlo(env, small_suite):
    ctrl = random_controller(env, seed=3)
    exact = exact_marginal(ctrl, small_suite[0], env)
    mc = estimate_marginal(ctrl, small_suite[0], env, 3000, np.random.default_rng(0))
    assert total_variation(exact, mc) < 0.04
    with pytest.raises(ValueError):
        estimate_marginal(ctrl, small_suite[0], env, 0, np.random.default_rng(0))


def test_enumeration_limit(std_env, small_suite):
    with pytest.raises(RuntimeError):
        enumerate_trajectories(random_controller(std_env), small_suite[0], std_env, limit=50)


def test_inference_terminates(env, small_suite):
    ctrl = random_controller(env)
    rng = np.random.default_rng(0)
    for inst in small_suite[:10]:
        res = run_inference(ctrl, inst, env, rng=rng)
        assert len(res.trajectory) <= env.T_max
        assert res.trajectory.terminated_by in ("EarlyExit", "MaxSteps")
        if res.trajectory.terminated_by == "MaxSteps":
            assert len(res.trajectory) == env.T_max
        assert res.normalized_cost == pytest.approx(env.normalized_cost(res.trajectory))
    with pytest.raises(ValueError):
        run_inference(ctrl, small_suite[0], env)
    g1 = run_inference(ctrl, small_suite[0], env, greedy=True)
    g2 = run_inference(ctrl, small_suite[0], env, greedy=True)
    assert g1.trajectory.key() == g2.trajectory.key()


def test_zero_budget_gives_empty_answer(env, small_suite):
    res = run_inference(random_controller(env), small_suite[0], env, T_max=0,
                        rng=np.random.default_rng(0))
    assert res.answer == {} and len(res.trajectory) == 0 and res.costs == (0.0, 0, 0.0)


def _traces(env, suite, ctrl, n=5):
    buf = io.StringIO()
    results = []
    for i in range(n):
        res = run_inference(ctrl, suite[i], env, rng=np.random.default_rng(i), meta={"seed": i})
        emit_trace(res, buf)
        results.append(res)
    buf.seek(0)
    return buf, results


def test_trace_roundtrip_and_verify(env, small_suite):
    ctrl = random_controller(env)
    buf, results = _traces(env, small_suite, ctrl)
    records = read_traces(buf)
    assert len(records) == 5
    for rec, res in zip(records, results):
        assert rec.meta["seed"] in range(5) and rec.meta["n_steps"] == len(rec.steps)
        assert [s["step"] for s in rec.steps] == list(range(1, len(rec.steps) + 1))
        assert rec.meta["answer"] == res.answer
    report = verify_traces(records, ctrl, tol=1e-9)
    assert report.ok and report.max_abs_error <= 1e-12 and report.n_steps > 0


def test_verify_detects_tampering_and_other_params(env, small_suite):
    ctrl = random_controller(env)
    buf, _ = _traces(env, small_suite, ctrl, n=3)
    records = read_traces(buf)
    records[0].steps[0]["probs"][0] += 1e-6
    report = verify_traces(records, ctrl)
    assert not report.ok and report.failures[0][0] == 0
    other = random_controller(env, seed=9)
    assert not verify_traces(read_traces(_traces(env, small_suite, ctrl, 1)[0]), other).ok
    rec = read_traces(_traces(env, small_suite, ctrl, 1)[0])
    rec[0].meta["graph_fingerprint"] = "x"
    assert "fingerprint" in verify_traces(rec, ctrl).failures[0][2]


def test_trace_file_sink(env, small_suite, tmp_path):
    ctrl = random_controller(env)
    res = run_inference(ctrl, small_suite[0], env, rng=np.random.default_rng(0))
    path = tmp_path / "t.jsonl"
    emit_trace(res, path)
    emit_trace(res, path)
    assert len(read_traces(path)) == 2
    first = json.loads(path.read_text().splitlines()[0])
    assert first["kind"] == "meta" and first["trace_version"] == 1
    with pytest.raises(SinkUnavailable):
        emit_trace(res, tmp_path / "missing" / "t.jsonl")
    with pytest.raises(ValueError):
        read_traces(['{"kind": "step"}'])


def test_three_step_trace(small_suite):
    reg = identity_registry()
    graph = build_graph(linear_spec(CT.VQANALYZE, CT.SEGMENTATION, CT.GROUNDING), reg)
    env = Environment(graph, reg, T_max=3, allow_early_exit=False)
    res = run_inference(random_controller(env), small_suite[0], env, rng=np.random.default_rng(0))
    assert len(res.trace.steps) == 3 and res.trajectory.terminated_by == "MaxSteps"


def test_divergence_helpers():
    assert total_variation({"a": 1.0}, {"b": 1.0}) == 1.0
    assert total_variation({"a": 0.5, "b": 0.5}, {"a": 0.5, "b": 0.5}) == 0.0
    assert entropy({"a": 0.5, "b": 0.5}) == pytest.approx(math.log(2))
    assert answer_key({"B": "x", "a": "Y "}) == answer_key({"a": "y", "b": "x"})
