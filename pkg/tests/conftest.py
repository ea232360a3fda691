import numpy as np
import pytest

from supernet_sampler.environment import (
    CT,
    Environment,
    SimulatedTool,
    ToolRegistry,
    generate_suite,
    identity_behavior,
    image_field_behavior,
    SuiteConfig,
    standard_registry,
)
from supernet_sampler.optcore import init_params
from supernet_sampler.policy import Controller
from supernet_sampler.supernet import build_graph


ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {k}: {detail}")


def identity_registry():
    reg = ToolRegistry()
    for ctype in CT:
        for k in range(3):
            reg.register(SimulatedTool(f"{ctype.value.lower()}-{k}", ctype, identity_behavior,
                                       latency=1.0 + k, tokens=10 * (k + 1)))
    return reg


def linear_spec(*ctypes, tools=1, routing="all"):
    """Chain of containers c0 -> c1 -> ... with ``tools`` identity tools each."""
    containers = [{"id": f"c{i}", "ctype": ct.value,
                   "tools": [f"{ct.value.lower()}-{k}" for k in range(tools)]}
                  for i, ct in enumerate(ctypes)]
    edges = [{"from": f"c{i}", "to": f"c{i + 1}", "routing": routing} for i in range(len(ctypes) - 1)]
    return {"containers": containers, "edges": edges, "entry": "c0"}


@pytest.fixture
def id_registry():
    return identity_registry()


@pytest.fixture(scope="session")
def std_env():
    return Environment.standard()


@pytest.fixture(scope="session")
def small_suite():
    return generate_suite(3, SuiteConfig(n_instances=30))


def tiny_env(n_containers=2, tools=2, T_max=4, seed=0, **kw):
    """Image-field tools on a short chain; small enough to enumerate."""
    reg = standard_registry(seed)
    order = [CT.VQANALYZE, CT.SEGMENTATION, CT.GROUNDING, CT.CLASSIFY][:n_containers]
    slugs = {CT.VQANALYZE: "vqa", CT.SEGMENTATION: "segment", CT.GROUNDING: "ground",
             CT.CLASSIFY: "classify"}
    tiers = ["large", "small", "lite"][:tools]
    spec = {
        "containers": [{"id": slugs[c], "ctype": c.value, "tools": [f"{slugs[c]}-{t}" for t in tiers]}
                       for c in order],
        "edges": [{"from": slugs[a], "to": slugs[b], "routing": "none"}
                  for i, a in enumerate(order) for b in order[i + 1:]],
        "entry": slugs[order[0]],
    }
    return Environment(build_graph(spec, reg), reg, T_max=T_max, **kw)


def random_controller(env, hidden=16, seed=0, scale=1.0):
    params = init_params(np.random.default_rng(seed), env.graph.n_actions, hidden)
    params = {k: v * scale for k, v in params.items()}
    return Controller(params, env.graph)


def sample_trajectories(controller, env, instances, rng, k=4, alpha=0.8):
    from supernet_sampler.runtime import run_inference
    return [run_inference(controller, instances[i % len(instances)], env, rng=rng, alpha=alpha).trajectory
            for i in range(k)]


def gradient_error(loss, params, rng, n_coords=12, h=1e-5):
    """Largest per-matrix relative error ||a - n|| / max(||a||, ||n||) between the
    analytic gradient and central differences on ``n_coords`` random entries of
    each matrix (every entry of matrices smaller than that)."""
    _, analytic = loss(params)
    worst = 0.0
    for name, w in params.items():
        flat = w.size
        idx = np.arange(flat) if flat <= n_coords else rng.choice(flat, n_coords, replace=False)
        a, n = [], []
        for j in idx:
            pos = np.unravel_index(j, w.shape)
            plus = {k: v.copy() for k, v in params.items()}
            minus = {k: v.copy() for k, v in params.items()}
            plus[name][pos] += h
            minus[name][pos] -= h
            n.append((loss(plus)[0] - loss(minus)[0]) / (2 * h))
            a.append(analytic[name][pos])
        a, n = np.array(a), np.array(n)
        scale = max(np.linalg.norm(a), np.linalg.norm(n))
        if scale > 1e-12:
            worst = max(worst, float(np.linalg.norm(a - n) / scale))
    return worst
