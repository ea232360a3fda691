"""Typed DAG of tool containers: graph building, legal actions, routing and tool calls."""
from __future__ import annotations

import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import TYPE_CHECKING, Any, Mapping, Union

import numpy as np

from .exceptions import (
    CycleDetected,
    EmptyContainer,
    RoutingFieldMissing,
    SpecError,
    UnknownPosition,
    UnknownTool,
    UnreachableContainer,
)

if TYPE_CHECKING:
    from .encoder import State

#: Pre-first-step position. Legal actions here invoke the entry container.
ENTRY = "<entry>"


class ContainerType(str, Enum):
    SEGMENTATION = "Segmentation"
    CLASSIFY = "Classify"
    GROUNDING = "Grounding"
    REPORT = "Report"
    VQANALYZE = "VQAnalyze"
    GUIDELINE_LOOKUP = "GuidelineLookup"
    MKG = "MKG"

    @classmethod
    def parse(cls, label: str) -> "ContainerType":
        try:
            return cls(label)
        except ValueError:
            raise SpecError(f"unknown container type {label!r}") from None

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class Invoke:
    container: str
    tool: str

    @property
    def name(self) -> str:
        return f"{self.container}/{self.tool}"


@dataclass(frozen=True)
class EarlyExit:
    @property
    def name(self) -> str:
        return "EarlyExit"


EARLY_EXIT = EarlyExit()
Action = Union[Invoke, EarlyExit]


def parse_action(name: str) -> Action:
    if name == "EarlyExit":
        return EARLY_EXIT
    container, _, tool = name.partition("/")
    if not tool:
        raise ValueError(f"malformed action name {name!r}")
    return Invoke(container, tool)


@dataclass(frozen=True)
class RoutingPolicy:
    """Which memory entries an edge forwards: ``all``, ``none`` or ``from_containers``."""

    kind: str = "all"
    containers: tuple[str, ...] = ()

    @classmethod
    def parse(cls, value: Any) -> "RoutingPolicy":
        if value in ("all", "none"):
            return cls(value)
        if isinstance(value, Mapping) and set(value) == {"from_containers"}:
            ids = value["from_containers"]
            if isinstance(ids, str) or not all(isinstance(i, str) for i in ids):
                raise SpecError(f"from_containers must be a list of ids, got {ids!r}")
            return cls("from_containers", tuple(ids))
        raise SpecError(f"invalid routing {value!r}")

    def to_json(self):
        if self.kind == "from_containers":
            return {"from_containers": list(self.containers)}
        return self.kind


@dataclass(frozen=True)
class Container:
    id: str
    ctype: ContainerType
    tools: tuple[str, ...]


@dataclass(frozen=True)
class Edge:
    src: str
    dst: str
    routing: RoutingPolicy = RoutingPolicy()


_ENTRY_EDGE_ROUTING = RoutingPolicy("none")


@dataclass(frozen=True)
class ActionSet:
    """Ordered legal actions plus their global indices into the policy output layer."""

    actions: tuple[Action, ...]
    index: np.ndarray
    n_total: int

    def __len__(self):
        return len(self.actions)

    def __iter__(self):
        return iter(self.actions)

    def __getitem__(self, i):
        return self.actions[i]

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.actions]

    def mask(self) -> np.ndarray:
        m = np.zeros(self.n_total, dtype=bool)
        m[self.index] = True
        return m


@dataclass(frozen=True)
class ToolInput:
    sub_query: str
    context_slice: str
    roi_image: np.ndarray | None = None
    hyperparams: Mapping[str, float] = field(default_factory=dict)


@dataclass(frozen=True)
class Payload:
    """Tool result: a structured record, or an image block with optional record fields."""

    kind: str = "record"
    fields: Mapping[str, Any] = field(default_factory=dict)
    image: np.ndarray | None = None

    @property
    def informative(self) -> bool:
        return any(k != "prob" for k in self.fields)


@dataclass(frozen=True)
class ToolOutput:
    payload: Payload
    latency: float
    tokens: int
    source: str = ""
    tool_id: str = ""
    degraded: bool = False

    def __post_init__(self):
        if self.latency < 0 or self.tokens < 0:
            raise ValueError("tool costs must be nonnegative")


class SupernetGraph:
    """Validated, immutable agentic supernet. Build with :func:`build_graph`."""

    def __init__(self, containers, edges, entry, spec):
        self.containers: "OrderedDict[str, Container]" = OrderedDict((c.id, c) for c in containers)
        self.edges: tuple[Edge, ...] = tuple(edges)
        self.entry: str = entry
        self._spec = spec
        self._out: dict[str, list[Edge]] = {cid: [] for cid in self.containers}
        self._edge = {}
        for e in self.edges:
            self._out[e.src].append(e)
            self._edge[(e.src, e.dst)] = e
        self.actions: tuple[Action, ...] = tuple(
            Invoke(c.id, t) for c in self.containers.values() for t in c.tools
        ) + (EARLY_EXIT,)
        self.action_index = {a: i for i, a in enumerate(self.actions)}
        self._legal_cache: dict = {}

    @property
    def n_actions(self) -> int:
        return len(self.actions)

    @property
    def exit_index(self) -> int:
        return self.action_index[EARLY_EXIT]

    def successors(self, position: str) -> list[str]:
        if position == ENTRY:
            return [self.entry]
        if position not in self.containers:
            raise UnknownPosition(position)
        return [e.dst for e in self._out[position]]

    def edge(self, src: str, dst: str) -> Edge:
        if src == ENTRY and dst == self.entry:
            return Edge(ENTRY, dst, _ENTRY_EDGE_ROUTING)
        try:
            return self._edge[(src, dst)]
        except KeyError:
            raise UnknownPosition(f"{src}->{dst}") from None

    def topological_order(self) -> list[str]:
        return _toposort(list(self.containers), self.edges)

    def to_spec(self) -> dict:
        return json.loads(json.dumps(self._spec))

    def fingerprint(self) -> str:
        blob = json.dumps(self._spec, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def __repr__(self):
        return (f"SupernetGraph({len(self.containers)} containers, "
                f"{len(self.edges)} edges, entry={self.entry!r})")


def _toposort(nodes, edges):
    indeg = {n: 0 for n in nodes}
    out = {n: [] for n in nodes}
    for e in edges:
        out[e.src].append(e.dst)
        indeg[e.dst] += 1
    ready = [n for n in nodes if indeg[n] == 0]
    order = []
    while ready:
        n = ready.pop(0)
        order.append(n)
        for m in out[n]:
            indeg[m] -= 1
            if indeg[m] == 0:
                ready.append(m)
    if len(order) != len(nodes):
        raise CycleDetected(_find_cycle(nodes, out))
    return order


def _find_cycle(nodes, out):
    color = {n: 0 for n in nodes}
    stack = []

    def visit(n):
        color[n] = 1
        stack.append(n)
        for m in out[n]:
            if color[m] == 1:
                return stack[stack.index(m):] + [m]
            if color[m] == 0:
                found = visit(m)
                if found:
                    return found
        stack.pop()
        color[n] = 2
        return None

    for n in nodes:
        if color[n] == 0:
            found = visit(n)
            if found:
                return found
    return []


def load_spec(source) -> dict:
    if isinstance(source, Mapping):
        return json.loads(json.dumps(source))
    path = Path(source)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise SpecError(f"supernet spec not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise SpecError(f"supernet spec {path} is not valid JSON: {exc}") from None


def build_graph(spec, registry) -> SupernetGraph:
    """Parse and validate a supernet spec (mapping or JSON path) against ``registry``."""
    spec = load_spec(spec)
    for key in ("containers", "edges", "entry"):
        if key not in spec:
            raise SpecError(f"supernet spec missing key {key!r}")

    containers = []
    seen = set()
    for raw in spec["containers"]:
        cid = raw.get("id")
        if not isinstance(cid, str) or not cid or cid == ENTRY:
            raise SpecError(f"invalid container id {cid!r}")
        if cid in seen:
            raise SpecError(f"duplicate container id {cid!r}")
        seen.add(cid)
        ctype = ContainerType.parse(raw.get("ctype"))
        tools = tuple(raw.get("tools") or ())
        if not tools:
            raise EmptyContainer(cid)
        if len(set(tools)) != len(tools):
            raise SpecError(f"container {cid!r} lists a tool twice")
        signatures = set()
        for t in tools:
            if t not in registry:
                raise UnknownTool(t, cid)
            tool = registry[t]
            if tool.ctype != ctype:
                raise SpecError(f"tool {t!r} has type {tool.ctype}, container {cid!r} is {ctype}")
            signatures.add(tool.output_kind)
        if len(signatures) > 1:
            raise SpecError(f"tools in container {cid!r} do not share an I/O signature")
        containers.append(Container(cid, ctype, tools))

    edges = []
    pairs = set()
    for raw in spec["edges"]:
        src, dst = raw.get("from"), raw.get("to")
        for end in (src, dst):
            if end not in seen:
                raise SpecError(f"edge endpoint {end!r} is not a container")
        if (src, dst) in pairs:
            raise SpecError(f"duplicate edge {src}->{dst}")
        pairs.add((src, dst))
        edges.append(Edge(src, dst, RoutingPolicy.parse(raw.get("routing", "all"))))

    entry = spec["entry"]
    if entry not in seen:
        raise SpecError(f"entry {entry!r} is not a container")

    ids = [c.id for c in containers]
    _toposort(ids, edges)

    reach = {entry}
    frontier = [entry]
    out = {}
    for e in edges:
        out.setdefault(e.src, []).append(e.dst)
    while frontier:
        n = frontier.pop()
        for m in out.get(n, ()):
            if m not in reach:
                reach.add(m)
                frontier.append(m)
    for cid in ids:
        if cid not in reach:
            raise UnreachableContainer(cid)

    return SupernetGraph(containers, edges, entry, spec)


def legal_actions(graph: SupernetGraph, position: str, *, step: int = 0,
                  min_steps_before_exit: int = 0, allow_early_exit: bool = True) -> ActionSet:
    """Invocations of every tool in every successor of ``position``, then EarlyExit.

    Order is edge declaration order, then tool order. EarlyExit is masked when
    ``allow_early_exit`` is false or ``step < min_steps_before_exit``, except when
    it is the only action left, so the support is never empty.
    """
    key = (position, step < min_steps_before_exit or not allow_early_exit)
    cached = graph._legal_cache.get(key)
    if cached is not None:
        return cached
    actions: list[Action] = []
    for dst in graph.successors(position):
        for tool in graph.containers[dst].tools:
            actions.append(Invoke(dst, tool))
    if not actions or not key[1]:
        actions.append(EARLY_EXIT)
    idx = np.array([graph.action_index[a] for a in actions], dtype=np.int64)
    result = ActionSet(tuple(actions), idx, graph.n_actions)
    graph._legal_cache[key] = result
    return result


def route_payload(edge: Edge, state: "State", *, sub_query=None) -> ToolInput:
    """Build the tool input for traversing ``edge`` from ``state``.

    ``sub_query`` is an optional callable transforming the task query.
    """
    entries = state.memory.entries
    routing = edge.routing
    if routing.kind == "none":
        selected = []
    elif routing.kind == "all":
        selected = [e.summary for e in entries]
    else:
        present = {e.container_id for e in entries}
        for cid in routing.containers:
            if cid not in present:
                raise RoutingFieldMissing(cid)
        wanted = set(routing.containers)
        selected = [e.summary for e in entries if e.container_id in wanted]
    context = " ".join(s for s in selected if s)
    query = sub_query(state.query) if sub_query else state.query
    return ToolInput(sub_query=query, context_slice=context, roi_image=state.image)


def execute_tool(action: Action, tool_input: ToolInput, registry) -> ToolOutput:
    """Run the registered tool named by an ``Invoke`` action."""
    if not isinstance(action, Invoke):
        raise TypeError("execute_tool needs an Invoke action")
    if action.tool not in registry:
        raise UnknownTool(action.tool, action.container)
    return registry[action.tool](tool_input)
