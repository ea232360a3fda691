"""Synthetic task suites, simulated tools, rewards, scripted experts and the answer synthesizer."""
from __future__ import annotations

import functools
import hashlib
import itertools
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping

import numpy as np

from .encoder import State
from .exceptions import PlanNotRealizable, RoutingFieldMissing, ToolFailure
from .memory import Memory, MemoryEntry, TemplateSummarizer
from .supernet import (
    EARLY_EXIT,
    ENTRY,
    ContainerType,
    Invoke,
    Payload,
    SupernetGraph,
    ToolInput,
    ToolOutput,
    build_graph,
    execute_tool,
    legal_actions,
    route_payload,
)

CT = ContainerType

# Answer field produced by each container type, in the canonical workflow order.
FIELD_OF = {
    CT.VQANALYZE: "view",
    CT.SEGMENTATION: "region",
    CT.GROUNDING: "location",
    CT.CLASSIFY: "finding",
    CT.MKG: "etiology",
    CT.GUIDELINE_LOOKUP: "recommendation",
    CT.REPORT: "impression",
}
PRODUCER = {f: c for c, f in FIELD_OF.items()}
FIELD_ORDER = tuple(FIELD_OF.values())
IMAGE_FIELDS = ("view", "region", "location", "finding")
DERIVED_FIELDS = ("etiology", "recommendation", "impression")

VOCAB = {
    "view": ("pa", "ap", "lateral"),
    "region": ("left_lung", "right_lung", "mediastinum", "cardiac_silhouette"),
    "location": ("upper_zone", "mid_zone", "lower_zone", "hilum"),
    "finding": ("effusion", "pneumothorax", "consolidation", "cardiomegaly", "nodule"),
}
DERIVED = {
    "etiology": {
        "effusion": "heart_failure", "pneumothorax": "bleb_rupture",
        "consolidation": "bacterial_pneumonia", "cardiomegaly": "cardiomyopathy",
        "nodule": "granuloma",
    },
    "recommendation": {
        "effusion": "thoracentesis_if_symptomatic", "pneumothorax": "urgent_chest_drain",
        "consolidation": "antibiotics_and_followup", "cardiomegaly": "echocardiogram",
        "nodule": "ct_followup_3_months",
    },
    "impression": {
        "effusion": "pleural_fluid_present", "pneumothorax": "collapsed_lung_segment",
        "consolidation": "airspace_opacity", "cardiomegaly": "enlarged_heart",
        "nodule": "solitary_pulmonary_nodule",
    },
}
QUERY_PHRASES = {
    "view": "state the projection view",
    "region": "segment the affected region",
    "location": "localize the abnormality",
    "finding": "identify the primary finding",
    "etiology": "explain the likely etiology",
    "recommendation": "recommend guideline follow-up",
    "impression": "draft the report impression",
}
IMAGE_SIZE = 8
FIELD_CELL = {"view": (1, 1), "region": (2, 5), "location": (5, 2), "finding": (6, 6)}
_FINDING_RE = re.compile(r"Classify: (\S+)")


def _unit_hash(*parts) -> float:
    h = hashlib.blake2b("\x1f".join(map(str, parts)).encode(), digest_size=8).digest()
    return int.from_bytes(h, "little") / 2.0 ** 64


# ---------------------------------------------------------------- tools

def decode_field(image, name: str):
    """Read a planted field value back out of an image grid, or ``None``."""
    if image is None or np.size(image) == 0:
        return None
    r, c = FIELD_CELL[name]
    vocab = VOCAB[name]
    try:
        code = int(np.floor(float(image[r, c]) * len(vocab)))
    except IndexError:
        return None
    return vocab[code] if 0 <= code < len(vocab) else None


def image_field_behavior(name: str, kind: str = "record"):
    def behave(inp: ToolInput) -> Payload:
        value = decode_field(inp.roi_image, name)
        if value is None:
            return Payload(kind)
        mask = None
        if kind == "image":
            mask = (np.asarray(inp.roi_image) > 0.5).astype(np.float64)
        return Payload(kind, {name: value, "prob": 1.0}, mask)
    return behave


def derived_field_behavior(name: str):
    table = DERIVED[name]

    def behave(inp: ToolInput) -> Payload:
        m = _FINDING_RE.search(inp.context_slice)
        if not m or m.group(1) not in table:
            return Payload("record")
        return Payload("record", {name: table[m.group(1)], "prob": 1.0})
    return behave


def identity_behavior(inp: ToolInput) -> Payload:
    return Payload("record", {"echo": inp.sub_query})


@dataclass(frozen=True)
class SimulatedTool:
    """Deterministic stand-in for a model-backed tool.

    With ``fidelity < 1`` the tool returns an empty payload on a seeded subset of
    inputs. ``requires`` lists source labels that must appear in the routed
    context; without them the output is flagged ``degraded``. ``fail_on``
    substrings of the sub-query raise :class:`ToolFailure`.
    """

    tool_id: str
    ctype: ContainerType
    behavior: Callable[[ToolInput], Payload]
    latency: float = 1.0
    tokens: int = 10
    fidelity: float = 1.0
    seed: int = 0
    output_kind: str = "record"
    requires: tuple[str, ...] = ()
    fail_on: tuple[str, ...] = ()

    def __post_init__(self):
        if not 0.0 < self.fidelity <= 1.0:
            raise ValueError(f"fidelity of {self.tool_id!r} must be in (0, 1]")
        if self.latency < 0 or self.tokens < 0:
            raise ValueError(f"costs of {self.tool_id!r} must be nonnegative")

    @property
    def cost_model(self) -> tuple[float, int]:
        return (self.latency, self.tokens)

    def _input_key(self, inp: ToolInput) -> str:
        img = b"" if inp.roi_image is None else np.ascontiguousarray(inp.roi_image).tobytes()
        return inp.sub_query + hashlib.sha1(img).hexdigest()

    def __call__(self, inp: ToolInput) -> ToolOutput:
        for pattern in self.fail_on:
            if pattern in inp.sub_query:
                raise ToolFailure(self.tool_id, f"input matches {pattern!r}")
        missing = [r for r in self.requires if f"{r}:" not in inp.context_slice]
        if missing:
            payload, degraded = Payload(self.output_kind), True
        elif self.fidelity < 1.0 and _unit_hash(self.tool_id, self.seed, self._input_key(inp)) >= self.fidelity:
            payload, degraded = Payload(self.output_kind), False
        else:
            payload, degraded = self.behavior(inp), False
        if payload.kind != self.output_kind:
            raise ToolFailure(self.tool_id, f"payload kind {payload.kind} != {self.output_kind}")
        return ToolOutput(payload, float(self.latency), int(self.tokens), self.ctype.value,
                          self.tool_id, degraded)


class ToolRegistry(Mapping):
    """Tool id -> :class:`SimulatedTool`. Immutable once handed to a graph."""

    def __init__(self, tools: Iterable[SimulatedTool] = ()):
        self._tools: dict[str, SimulatedTool] = {}
        for t in tools:
            self.register(t)

    def register(self, tool: SimulatedTool) -> None:
        if tool.tool_id in self._tools:
            raise ValueError(f"tool {tool.tool_id!r} already registered")
        self._tools[tool.tool_id] = tool

    def __getitem__(self, key):
        return self._tools[key]

    def __iter__(self):
        return iter(self._tools)

    def __len__(self):
        return len(self._tools)


_SLUG = {
    CT.VQANALYZE: "vqa", CT.SEGMENTATION: "segment", CT.GROUNDING: "ground",
    CT.CLASSIFY: "classify", CT.MKG: "mkg", CT.GUIDELINE_LOOKUP: "guideline", CT.REPORT: "report",
}
# (suffix, fidelity, latency, tokens): flagship, distilled twin, lite model.
TOOL_TIERS = (("large", 1.0, 3.0, 120), ("small", 1.0, 1.0, 40), ("lite", 0.6, 0.5, 15))


def standard_registry(seed: int = 0, tiers=TOOL_TIERS) -> ToolRegistry:
    reg = ToolRegistry()
    for ctype, slug in _SLUG.items():
        name = FIELD_OF[ctype]
        kind = "image" if ctype is CT.SEGMENTATION else "record"
        if name in IMAGE_FIELDS:
            behavior, requires = image_field_behavior(name, kind), ()
        else:
            behavior, requires = derived_field_behavior(name), (CT.CLASSIFY.value,)
        for suffix, fid, lat, tok in tiers:
            reg.register(SimulatedTool(f"{slug}-{suffix}", ctype, behavior, lat, tok, fid,
                                       seed, kind, requires))
    return reg


def standard_graph_spec(tiers=TOOL_TIERS) -> dict:
    """Seven containers in canonical order, an edge from each to every later one."""
    order = list(FIELD_OF)
    containers = [{"id": _SLUG[c], "ctype": c.value,
                   "tools": [f"{_SLUG[c]}-{t[0]}" for t in tiers]} for c in order]
    edges = []
    for i, a in enumerate(order):
        for b in order[i + 1:]:
            if FIELD_OF[b] in DERIVED_FIELDS:
                routing = {"from_containers": [_SLUG[CT.CLASSIFY]]}
            elif FIELD_OF[b] in IMAGE_FIELDS:
                routing = "none"
            else:
                routing = "all"
            edges.append({"from": _SLUG[a], "to": _SLUG[b], "routing": routing})
    return {"containers": containers, "edges": edges, "entry": _SLUG[order[0]]}


# ---------------------------------------------------------------- instances

@functools.lru_cache(maxsize=8192)
def _render_image(seed: int, planted: tuple, size: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 7919])
    img = rng.random((size, size))
    for name, value in planted:
        r, c = FIELD_CELL[name]
        vocab = VOCAB[name]
        img[r, c] = (vocab.index(value) + 0.5) / len(vocab)
    img.setflags(write=False)
    return img


@dataclass(frozen=True)
class QueryInstance:
    uid: str
    seed: int
    query: str
    context: str
    planted: Mapping[str, str]
    requested: tuple[str, ...]
    safety: bool = False
    image_size: int = IMAGE_SIZE

    @property
    def image(self) -> np.ndarray:
        return _render_image(self.seed, tuple(sorted(self.planted.items())), self.image_size)

    @property
    def truth(self) -> dict[str, str]:
        finding = self.planted.get("finding")
        out = {}
        for f in self.requested:
            out[f] = self.planted[f] if f in IMAGE_FIELDS else DERIVED[f][finding]
        return out

    @property
    def required_plan(self) -> tuple[tuple[ContainerType, str], ...]:
        return tuple((PRODUCER[f], f) for f in FIELD_ORDER if f in self.requested)

    def to_record(self) -> dict:
        return {"uid": self.uid, "seed": self.seed, "query": self.query, "context": self.context,
                "planted": dict(self.planted), "requested": list(self.requested),
                "safety": self.safety, "image_size": self.image_size,
                "required_plan": [[c.value, f] for c, f in self.required_plan]}

    @classmethod
    def from_record(cls, rec: Mapping) -> "QueryInstance":
        return cls(rec["uid"], int(rec["seed"]), rec["query"], rec["context"],
                   dict(rec["planted"]), tuple(rec["requested"]), bool(rec.get("safety", False)),
                   int(rec.get("image_size", IMAGE_SIZE)))


@dataclass(frozen=True)
class SuiteConfig:
    n_instances: int = 200
    plan_length: tuple[int, int] = (1, 4)
    simple_fraction: float = 0.25
    safety_fraction: float = 0.2

    def __post_init__(self):
        lo, hi = self.plan_length
        if not 1 <= lo <= hi <= len(FIELD_ORDER):
            raise ValueError(f"plan_length range {self.plan_length} outside [1, {len(FIELD_ORDER)}]")
        for name in ("simple_fraction", "safety_fraction"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be in [0, 1]")
        if self.n_instances < 0:
            raise ValueError("n_instances must be nonnegative")


def _closed(fields) -> bool:
    return "finding" in fields or not any(f in DERIVED_FIELDS for f in fields)


_OPTIONAL = tuple(f for f in FIELD_ORDER if f != "view")
_SUBSETS = {k: [s for s in itertools.combinations(_OPTIONAL, k) if _closed(s)]
            for k in range(len(_OPTIONAL) + 1)}


def generate_suite(seed: int, config: SuiteConfig = SuiteConfig(), *, start: int = 0) -> list[QueryInstance]:
    """Deterministic suite of ``config.n_instances`` instances.

    Every plan starts with the entry container's field (``view``); simple
    instances need nothing else. Safety-critical instances must include a
    guideline recommendation.
    """
    suite = []
    for i in range(start, start + config.n_instances):
        rng = np.random.default_rng([seed, i])
        planted = {f: VOCAB[f][int(rng.integers(len(VOCAB[f])))] for f in IMAGE_FIELDS}
        if rng.random() < config.simple_fraction:
            length = 1
        else:
            length = int(rng.integers(config.plan_length[0], config.plan_length[1] + 1))
        safety = length >= 3 and rng.random() < config.safety_fraction
        options = _SUBSETS[length - 1]
        if safety:
            options = [s for s in options if "recommendation" in s]
        extra = options[int(rng.integers(len(options)))]
        requested = tuple(f for f in FIELD_ORDER if f == "view" or f in extra)
        phrases = [QUERY_PHRASES[f] for f in requested]
        phrases = [phrases[j] for j in rng.permutation(len(phrases))]
        query = " ; ".join(phrases) + (" ; urgent safety review" if safety else "")
        context = (f"age {int(rng.integers(20, 90))} sex {'FM'[int(rng.integers(2))]} "
                   f"history {('none', 'smoker', 'copd', 'chf', 'trauma')[int(rng.integers(5))]}")
        suite.append(QueryInstance(f"{seed}-{i}", int(seed) * 1_000_003 + i, query, context,
                                   planted, requested, safety))
    return suite


def save_suite(path, suite: Iterable[QueryInstance]) -> None:
    with open(path, "w") as fh:
        for inst in suite:
            fh.write(json.dumps(inst.to_record()) + "\n")


def load_suite(path) -> list[QueryInstance]:
    lines = Path(path).read_text().splitlines()
    return [QueryInstance.from_record(json.loads(line)) for line in lines if line.strip()]


# ---------------------------------------------------------------- scoring

def canonicalize(value) -> str:
    return " ".join(str(value).lower().split())


def utility(answer: Mapping, truth: Mapping) -> float:
    """Field-level F1 between canonicalized answer and truth."""
    if not answer or not truth:
        return 0.0
    ans = {canonicalize(k): canonicalize(v) for k, v in answer.items()}
    ref = {canonicalize(k): canonicalize(v) for k, v in truth.items()}
    correct = sum(1 for k, v in ans.items() if ref.get(k) == v)
    if correct == 0:
        return 0.0
    precision, recall = correct / len(ans), correct / len(ref)
    return 2 * precision * recall / (precision + recall)


def synthesize_answer(traj, instance=None) -> dict:
    """Frozen synthesizer: last informative report of each field wins."""
    answer = {}
    for step in traj.steps:
        out = step.output
        if out is None:
            continue
        for k, v in out.payload.fields.items():
            if k != "prob":
                answer[k] = v
    return answer


def _lcs(a, b) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class HeuristicSpec:
    compliance: float = 0.6
    coherence: float = 0.2
    brevity: float = 0.2

    def __post_init__(self):
        w = (self.compliance, self.coherence, self.brevity)
        if min(w) < 0 or abs(sum(w) - 1.0) > 1e-9:
            raise ValueError("heuristic weights must be nonnegative and sum to 1")


INCOHERENT_ERRORS = ("RoutingFieldMissing", "missing_context")


def heuristic_components(traj, instance: QueryInstance, graph: SupernetGraph, T_max: int) -> dict:
    visited = [graph.containers[a.container].ctype for a in traj.invocations]
    plan = [c for c, _ in instance.required_plan]
    compliance = _lcs(visited, plan) / len(plan) if plan else 1.0
    calls = [s for s in traj.steps if isinstance(s.action, Invoke)]
    bad = sum(1 for s in calls if s.error in INCOHERENT_ERRORS)
    coherence = 1.0 - bad / len(calls) if calls else 1.0
    brevity = 1.0 - len(traj) / max(T_max, 1)
    return {"compliance": compliance, "coherence": coherence, "brevity": brevity}


def heuristic_reward(traj, instance: QueryInstance, spec: HeuristicSpec,
                     graph: SupernetGraph, T_max: int) -> float:
    c = heuristic_components(traj, instance, graph, T_max)
    return spec.compliance * c["compliance"] + spec.coherence * c["coherence"] + spec.brevity * c["brevity"]


# ---------------------------------------------------------------- environment

@dataclass
class Environment:
    """Graph, tools and cost model for one suite; pure apart from feature caches."""

    graph: SupernetGraph
    registry: ToolRegistry
    T_max: int = 8
    cost_weights: tuple[float, float] = (1.0, 0.01)
    heuristic: HeuristicSpec = field(default_factory=HeuristicSpec)
    memory_capacity: int = 16
    allow_early_exit: bool = True
    min_steps_before_exit: int = 0
    summarizer: Callable = field(default_factory=TemplateSummarizer)

    def __post_init__(self):
        if self.T_max < 0:
            raise ValueError("T_max must be nonnegative")
        worst = max(self.tool_cost(self.registry[t]) for c in self.graph.containers.values()
                    for t in c.tools)
        self.cost_normalizer = max(self.T_max, 1) * worst
        self._by_type: dict[ContainerType, list[str]] = {}
        for cid in self.graph.topological_order():
            self._by_type.setdefault(self.graph.containers[cid].ctype, []).append(cid)

    @classmethod
    def standard(cls, seed: int = 0, **kw) -> "Environment":
        reg = standard_registry(seed)
        return cls(build_graph(standard_graph_spec(), reg), reg, **kw)

    def tool_cost(self, tool_or_output) -> float:
        wl, wt = self.cost_weights
        return wl * tool_or_output.latency + wt * tool_or_output.tokens

    def trajectory_costs(self, traj) -> tuple[float, int, float]:
        """``(latency, tokens, normalized_cost)`` summed over executed steps."""
        lat = tok = 0.0
        for s in traj.steps:
            if s.output is not None:
                lat += s.output.latency
                tok += s.output.tokens
        wl, wt = self.cost_weights
        return lat, int(tok), (wl * lat + wt * tok) / self.cost_normalizer

    def normalized_cost(self, traj) -> float:
        return self.trajectory_costs(traj)[2]

    def legal(self, position: str, step: int):
        return legal_actions(self.graph, position, step=step,
                             min_steps_before_exit=self.min_steps_before_exit,
                             allow_early_exit=self.allow_early_exit)

    def new_memory(self) -> Memory:
        return Memory(capacity=self.memory_capacity)

    def state(self, instance: QueryInstance, memory: Memory, position: str) -> State:
        return State(instance.query, instance.image, instance.context, memory, position)

    def containers_of(self, ctype: ContainerType) -> list[str]:
        return self._by_type.get(ctype, [])

    def best_tool(self, container_id: str) -> str:
        """Highest-fidelity tool; ties go to the earliest declared."""
        tools = self.graph.containers[container_id].tools
        return max(tools, key=lambda t: (self.registry[t].fidelity, -tools.index(t)))

    def step(self, instance: QueryInstance, memory: Memory, position: str, action: Invoke,
             t: int):
        """Execute ``action`` from ``position``; returns ``(output, summary, error, memory)``.

        Routing and tool failures do not abort: the step is recorded as degraded
        with an empty payload and the tool's nominal cost.
        """
        tool = self.registry[action.tool]
        edge = self.graph.edge(position, action.container)
        error = None
        try:
            tool_input = route_payload(edge, self.state(instance, memory, position))
            output = execute_tool(action, tool_input, self.registry)
            if output.degraded:
                error = "missing_context"
        except (RoutingFieldMissing, ToolFailure) as exc:
            error = type(exc).__name__
            output = ToolOutput(Payload(tool.output_kind), float(tool.latency), int(tool.tokens),
                                tool.ctype.value, tool.tool_id, True)
        summary = self.summarizer(output)
        entry = MemoryEntry(action.container, summary, t, output.payload.image)
        return output, summary, error, memory.append(entry)


def expert_action(state: State, instance: QueryInstance, env: Environment):
    """Scripted expert: next unexecuted plan item via its best tool, else EarlyExit."""
    plan = instance.required_plan
    for ctype, _ in plan:
        if not env.containers_of(ctype):
            raise PlanNotRealizable(ctype)
    done = {env.graph.containers[e.container_id].ctype
            for e in state.memory.entries if e.container_id in env.graph.containers}
    reachable = set(env.graph.successors(state.position))
    for ctype, _ in plan:
        if ctype in done:
            continue
        for cid in env.containers_of(ctype):
            if cid in reachable:
                return Invoke(cid, env.best_tool(cid))
    return EARLY_EXIT


def expert_rollout(instance: QueryInstance, env: Environment):
    """States visited and actions taken by the expert, as ``[(state, action), ...]``."""
    memory, position, pairs = env.new_memory(), ENTRY, []
    for t in range(env.T_max):
        state = env.state(instance, memory, position)
        action = expert_action(state, instance, env)
        legal = env.legal(position, t)
        if action not in legal.actions:
            break
        pairs.append((state, action))
        if action is EARLY_EXIT:
            break
        _, _, _, memory = env.step(instance, memory, position, action, t + 1)
        position = action.container
    return pairs
