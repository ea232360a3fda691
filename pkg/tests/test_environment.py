from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from supernet_sampler.environment import (
    CT,
    DERIVED,
    FIELD_CELL,
    IMAGE_FIELDS,
    VOCAB,
    Environment,
    HeuristicSpec,
    QueryInstance,
    SimulatedTool,
    SuiteConfig,
    ToolRegistry,
    decode_field,
    expert_rollout,
    generate_suite,
    heuristic_components,
    heuristic_reward,
    identity_behavior,
    load_suite,
    save_suite,
    synthesize_answer,
    utility,
)
from supernet_sampler.exceptions import PlanNotRealizable, ToolFailure
from supernet_sampler.policy import Trajectory
from supernet_sampler.supernet import EARLY_EXIT, ENTRY, Invoke, ToolInput
from conftest import tiny_env


def _input(sub_query="q", image=None, context=""):
    return ToolInput(sub_query, context, image)


def test_utility_f1():
    truth = {"view": "pa", "finding": "nodule"}
    assert utility(truth, truth) == 1.0
    assert utility({}, truth) == 0.0
    assert utility({"view": "PA "}, truth) == pytest.approx(2 / 3)
    assert utility({"view": "pa", "finding": "x", "extra": "y"}, truth) == pytest.approx(0.4)


@given(st.dictionaries(st.sampled_from("abcd"), st.sampled_from("xyz")),
       st.dictionaries(st.sampled_from("abcd"), st.sampled_from("xyz"), min_size=1))
def test_utility_bounded(ans, truth):
    assert 0.0 <= utility(ans, truth) <= 1.0
    assert utility(truth, truth) == 1.0


def test_suite_deterministic_and_valid():
    a, b = generate_suite(4, SuiteConfig(50)), generate_suite(4, SuiteConfig(50))
    assert a == b
    assert generate_suite(4, SuiteConfig(10), start=40) == a[40:]
    for inst in a:
        assert inst.requested[0] == "view"
        assert set(inst.truth) == set(inst.requested)
        if any(f in DERIVED for f in inst.requested):
            assert "finding" in inst.requested
        if inst.safety:
            assert "recommendation" in inst.requested
    assert any(len(i.requested) == 1 for i in a)


def test_suite_config_validation():
    for bad in (dict(plan_length=(0, 2)), dict(plan_length=(3, 2)), dict(simple_fraction=2.0),
                dict(n_instances=-1)):
        with pytest.raises(ValueError):
            SuiteConfig(**bad)


def test_planted_fields_decode():
    inst = generate_suite(0, SuiteConfig(5))[2]
    for f in IMAGE_FIELDS:
        assert decode_field(inst.image, f) == inst.planted[f]
    assert decode_field(None, "view") is None
    assert decode_field(np.zeros((2, 2)), "finding") is None
    assert not inst.image.flags.writeable


def test_suite_roundtrip(tmp_path):
    suite = generate_suite(1, SuiteConfig(7))
    path = tmp_path / "s.jsonl"
    save_suite(path, suite)
    assert load_suite(path) == suite
    assert QueryInstance.from_record(suite[0].to_record()) == suite[0]


def test_simulated_tool_fidelity_and_failures():
    lite = SimulatedTool("t", CT.VQANALYZE, identity_behavior, fidelity=0.5, seed=3)
    outs = [lite(_input(f"q{i}")).payload.informative for i in range(400)]
    assert 0.4 < np.mean(outs) < 0.6
    assert outs == [lite(_input(f"q{i}")).payload.informative for i in range(400)]
    failing = SimulatedTool("f", CT.VQANALYZE, identity_behavior, fail_on=("boom",))
    with pytest.raises(ToolFailure):
        failing(_input("go boom"))
    needs = SimulatedTool("n", CT.REPORT, identity_behavior, requires=("Classify",))
    assert needs(_input()).degraded and not needs(_input(context="Classify: x")).degraded
    with pytest.raises(ValueError):
        SimulatedTool("z", CT.REPORT, identity_behavior, fidelity=0.0)


def test_registry_rejects_duplicates():
    reg = ToolRegistry([SimulatedTool("a", CT.REPORT, identity_behavior)])
    with pytest.raises(ValueError):
        reg.register(SimulatedTool("a", CT.REPORT, identity_behavior))


def test_standard_environment(std_env):
    g = std_env.graph
    assert len(g.containers) == 7 and g.n_actions == 22
    assert std_env.best_tool("vqa") == "vqa-large"
    assert std_env.cost_normalizer == pytest.approx(8 * (3.0 + 1.2))


def test_expert_solves_every_instance(std_env):
    for inst in generate_suite(2, SuiteConfig(40)):
        pairs = expert_rollout(inst, std_env)
        assert pairs[-1][1] is EARLY_EXIT
        mem, pos, traj = std_env.new_memory(), ENTRY, Trajectory()
        answer = {}
        for t, (_, action) in enumerate(pairs[:-1]):
            out, _, err, mem = std_env.step(inst, mem, pos, action, t + 1)
            assert err is None
            answer.update({k: v for k, v in out.payload.fields.items() if k != "prob"})
            pos = action.container
        assert utility(answer, inst.truth) == 1.0
        assert len(pairs) - 1 == len(inst.requested)


def test_expert_plan_not_realizable():
    env = tiny_env(n_containers=2)
    inst = next(i for i in generate_suite(0, SuiteConfig(50)) if "finding" in i.requested)
    with pytest.raises(PlanNotRealizable):
        expert_rollout(inst, env)


def test_degraded_step_records_error(std_env):
    inst = next(i for i in generate_suite(0, SuiteConfig(50)) if "etiology" in i.requested)
    out, summary, err, mem = std_env.step(inst, std_env.new_memory(), "vqa",
                                          Invoke("mkg", "mkg-small"), 1)
    assert err is not None and not out.payload.informative and len(mem) == 1


def test_synthesize_last_report_wins():
    def step(fields):
        return SimpleNamespace(output=SimpleNamespace(payload=SimpleNamespace(fields=fields)))
    traj = SimpleNamespace(steps=[step({"view": "ap", "prob": 1.0}), step({"view": "pa"}), step({}),
                                  SimpleNamespace(output=None)])
    assert synthesize_answer(traj) == {"view": "pa"}


def test_heuristic_components(std_env):
    inst = next(i for i in generate_suite(0, SuiteConfig(50)) if len(i.requested) == 1)
    assert heuristic_components(Trajectory(), inst, std_env.graph, 8) == {
        "compliance": 0.0, "coherence": 1.0, "brevity": 1.0}
    with pytest.raises(ValueError):
        HeuristicSpec(0.5, 0.5, 0.5)
    assert heuristic_reward(Trajectory(), inst, HeuristicSpec(), std_env.graph, 8) == pytest.approx(0.4)


def test_cell_layout_distinct():
    assert len(set(FIELD_CELL.values())) == len(FIELD_CELL)
    assert all(len(VOCAB[f]) >= 2 for f in IMAGE_FIELDS)
