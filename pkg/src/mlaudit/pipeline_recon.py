"""Call-graph construction from trace stacks, static edges and jump records,
and extraction of the input -> model -> sink program slice.

Nodes are addressed by a reference string ``[library!]name``. Stack frames
use the same grammar with an optional entry offset suffix, for example
``libfoo.so!x7q@0x4f0``. Edges point from caller to callee.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple

from .ml_detector import CandidateFunction, KeywordHit, ProbabilityVector, Evidence
from .trace_core import RecordKind, TraceLog


class Role(str, enum.Enum):
    INPUT_SOURCE = "InputSource"
    PREPROCESS = "Preprocess"
    MODEL_ENTRY = "ModelEntry"
    OUTPUT_REGISTER = "OutputRegister"
    CALLBACK = "Callback"
    SINK = "Sink"


ML_ROLES = frozenset({Role.MODEL_ENTRY, Role.OUTPUT_REGISTER})


class EdgeKind(str, enum.Enum):
    STATIC = "Static"
    STACK = "StackObserved"
    JUMP = "DynamicJump"
    JNI = "Jni"
    CALLBACK = "NativeCallback"


class AnchorNotFound(KeyError):
    pass


class NodeId(NamedTuple):
    name: str
    library: str | None = None

    @classmethod
    def parse(cls, ref: str) -> "NodeId":
        lib, sep, name = ref.partition("!")
        return cls(name, lib) if sep else cls(ref, None)

    def __str__(self) -> str:
        return f"{self.library}!{self.name}" if self.library else self.name


def parse_frame(frame: str) -> tuple[NodeId, int | None]:
    ref, sep, off = frame.rpartition("@")
    if sep and off.startswith("0x"):
        try:
            return NodeId.parse(ref), int(off, 16)
        except ValueError:
            pass
    return NodeId.parse(frame), None


def format_frame(node: NodeId, offset: int | None = None) -> str:
    return f"{node}@{offset:#x}" if offset is not None else str(node)


@dataclass
class FunctionNode:
    id: NodeId
    layer: str = "Java"
    exported: bool = False
    roles: set = field(default_factory=set)
    offset: int | None = None
    first_seen: float = math.inf


@dataclass
class CallEdge:
    src: NodeId
    dst: NodeId
    kind: EdgeKind
    support: int = 0

    def to_dict(self) -> dict:
        return {"from": str(self.src), "to": str(self.dst), "kind": self.kind.value,
                "support": self.support}

    @classmethod
    def from_dict(cls, d: dict) -> "CallEdge":
        return cls(NodeId.parse(d["from"]), NodeId.parse(d["to"]),
                   EdgeKind(d.get("kind", "Static")), int(d.get("support", 0)))


@dataclass(frozen=True)
class JumpRecord:
    library: str
    branch_offset: int
    dest_offset: int
    observations: int = 1

    def to_dict(self) -> dict:
        return {"library": self.library, "branch_offset": hex(self.branch_offset),
                "dest_offset": hex(self.dest_offset), "observations": self.observations}

    @classmethod
    def from_dict(cls, d: dict) -> "JumpRecord":
        def off(v):
            return int(v, 16) if isinstance(v, str) else int(v)
        return cls(d["library"], off(d["branch_offset"]), off(d["dest_offset"]),
                   int(d.get("observations", 1)))


@dataclass(frozen=True)
class UnresolvedJump:
    jump: JumpRecord
    reason: str


class CallGraph:
    def __init__(self):
        self.nodes: dict[NodeId, FunctionNode] = {}
        self.edges: dict[tuple[NodeId, NodeId, EdgeKind], CallEdge] = {}
        self.unresolved: list[UnresolvedJump] = []
        self._succ: dict[NodeId, set[NodeId]] = {}
        self._pred: dict[NodeId, set[NodeId]] = {}

    def add_node(self, nid: NodeId, *, ts: float = math.inf, offset: int | None = None) -> FunctionNode:
        node = self.nodes.get(nid)
        if node is None:
            layer = "Native" if nid.library and nid.library.endswith(".so") else "Java"
            node = self.nodes[nid] = FunctionNode(nid, layer)
            self._succ[nid] = set()
            self._pred[nid] = set()
        if ts < node.first_seen:
            node.first_seen = ts
        if offset is not None and node.offset is None:
            node.offset = offset
        return node

    def add_edge(self, src: NodeId, dst: NodeId, kind: EdgeKind, support: int = 1) -> CallEdge:
        self.add_node(src)
        self.add_node(dst)
        key = (src, dst, kind)
        edge = self.edges.get(key)
        if edge is None:
            edge = self.edges[key] = CallEdge(src, dst, kind, 0)
        edge.support += support
        self._succ[src].add(dst)
        self._pred[dst].add(src)
        return edge

    def successors(self, nid: NodeId) -> set[NodeId]:
        return self._succ.get(nid, set())

    def predecessors(self, nid: NodeId) -> set[NodeId]:
        return self._pred.get(nid, set())

    def edges_between(self, src: NodeId, dst: NodeId) -> list[CallEdge]:
        return [e for k, e in self.edges.items() if k[0] == src and k[1] == dst]

    def with_role(self, role: Role) -> set[NodeId]:
        return {n for n, node in self.nodes.items() if role in node.roles}

    def containing(self, library: str, offset: int) -> NodeId | None:
        """Node in ``library`` with the greatest entry offset <= ``offset``."""
        best = None
        for nid, node in self.nodes.items():
            if nid.library == library and node.offset is not None and node.offset <= offset:
                if best is None or node.offset > self.nodes[best].offset:
                    best = nid
        return best

    def assign_roles(self, role_map: dict) -> None:
        for ref, roles in role_map.items():
            nid = ref if isinstance(ref, NodeId) else NodeId.parse(ref)
            node = self.add_node(nid)
            node.roles.update(Role(r) for r in ([roles] if isinstance(roles, str) else roles))

    def mark_evidence(self, evidence: Iterable[Evidence]) -> None:
        """Tag nodes carrying detector evidence.

        Probability vectors and keyword hits in data fields mark an output
        register; a keyword in the function name marks a model entry.
        """
        for e in evidence:
            nid = NodeId(e.function_name, e.library)
            if nid not in self.nodes:
                continue
            if isinstance(e.rule, KeywordHit) and e.rule.field == "function_name":
                self.nodes[nid].roles.add(Role.MODEL_ENTRY)
            else:
                self.nodes[nid].roles.add(Role.OUTPUT_REGISTER)

    def to_dict(self) -> dict:
        return {
            "nodes": [_node_dict(self.nodes[n]) for n in sorted(self.nodes, key=str)],
            "edges": [e.to_dict() for _, e in sorted(self.edges.items(), key=lambda kv: _edge_key(kv[0]))],
            "unresolved_jumps": [dict(u.jump.to_dict(), reason=u.reason) for u in self.unresolved],
        }


def _edge_key(k) -> tuple:
    return (str(k[0]), str(k[1]), k[2].value)


def _node_dict(node: FunctionNode) -> dict:
    return {
        "id": str(node.id),
        "layer": node.layer,
        "exported": node.exported,
        "roles": sorted(r.value for r in node.roles),
        "offset": hex(node.offset) if node.offset is not None else None,
        "first_seen": None if math.isinf(node.first_seen) else int(node.first_seen),
    }


def build_call_graph(log: TraceLog, static_edges: Iterable[CallEdge] = (),
                     jumps: Iterable[JumpRecord] = ()) -> CallGraph:
    g = CallGraph()
    for rec in log.records:
        nid = NodeId(rec.function_name, rec.library)
        node = g.add_node(nid, ts=rec.timestamp_ns, offset=rec.offset)
        if rec.kind is RecordKind.JNI:
            node.exported = True
        if not rec.stack:
            continue
        frames = [parse_frame(f) for f in rec.stack]
        for fid, off in frames:
            g.add_node(fid, ts=rec.timestamp_ns, offset=off)
        # innermost first: frames[i + 1] called frames[i]
        for (callee, _), (caller, _) in zip(frames, frames[1:]):
            g.add_edge(caller, callee, EdgeKind.STACK)
    for e in static_edges:
        g.add_edge(e.src, e.dst, e.kind if e.kind is not EdgeKind.STACK else EdgeKind.STATIC, 0)
    for j in jumps:
        src = g.containing(j.library, j.branch_offset)
        dst = g.containing(j.library, j.dest_offset)
        if src is None or dst is None:
            which = "branch" if src is None else "destination"
            g.unresolved.append(UnresolvedJump(j, f"no known function contains the {which} offset"))
            continue
        if src != dst:
            g.add_edge(src, dst, EdgeKind.JUMP, max(1, j.observations))
    return g


def resolve_jump(jumps: Iterable[JumpRecord], library: str, branch_offset: int) -> list[int]:
    return sorted({j.dest_offset for j in jumps
                   if j.library == library and j.branch_offset == branch_offset})


def _reach(g: CallGraph, start: Iterable[NodeId], forward: bool) -> set[NodeId]:
    step = g.successors if forward else g.predecessors
    seen = set(start)
    queue = deque(seen)
    while queue:
        for n in step(queue.popleft()):
            if n not in seen:
                seen.add(n)
                queue.append(n)
    return seen


@dataclass
class PipelineSlice:
    anchor: NodeId | None
    nodes: list[NodeId]
    edges: list[CallEdge]
    complete: bool
    missing_inputs: list[NodeId]
    roles: dict[NodeId, set] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "anchor": str(self.anchor) if self.anchor is not None else None,
            "nodes": [str(n) for n in self.nodes],
            "edges": [e.to_dict() for e in self.edges],
            "roles": {str(n): sorted(r.value for r in self.roles.get(n, ())) for n in self.nodes},
            "complete": self.complete,
            "missing_inputs": [str(n) for n in self.missing_inputs],
        }


def _order(g: CallGraph, nodes: set[NodeId]) -> list[NodeId]:
    """Topological order inside the slice, preferring earlier first sighting."""
    def key(n):
        return (g.nodes[n].first_seen, str(n))
    indeg = {n: len(g.predecessors(n) & nodes) for n in nodes}
    heap = [(key(n), n) for n in nodes if indeg[n] == 0]
    heapq.heapify(heap)
    out = []
    while heap:
        _, n = heapq.heappop(heap)
        out.append(n)
        for m in g.successors(n) & nodes:
            indeg[m] -= 1
            if indeg[m] == 0:
                heapq.heappush(heap, (key(m), m))
    if len(out) < len(nodes):  # cycles: append the rest by sighting
        out += sorted(nodes - set(out), key=key)
    return out


def slice_pipeline(g: CallGraph, anchor: NodeId | str) -> PipelineSlice:
    """Nodes on some InputSource -> anchor -> Sink path.

    Without a reachable InputSource the slice is incomplete and keeps every
    ancestor of the anchor; ``missing_inputs`` then lists the roots of that
    ancestor set. Branches that leave the path (dead ends, side jumps that
    never reach a sink) are dropped.
    """
    if isinstance(anchor, str):
        anchor = NodeId.parse(anchor)
    if anchor not in g.nodes:
        raise AnchorNotFound(str(anchor))
    ancestors = _reach(g, [anchor], forward=False)
    descendants = _reach(g, [anchor], forward=True)
    inputs = g.with_role(Role.INPUT_SOURCE) & ancestors
    sinks = g.with_role(Role.SINK) & descendants
    if inputs:
        back = ancestors & _reach(g, inputs, forward=True)
        missing: list[NodeId] = []
    else:
        back = ancestors
        missing = sorted((n for n in ancestors if not (g.predecessors(n) & ancestors - {n})), key=str)
        missing = missing or [anchor]  # ancestor set is a cycle
    fwd = descendants & _reach(g, sinks, forward=False) if sinks else {anchor}
    nodes = back | fwd | {anchor}
    ordered = _order(g, nodes)
    edges = [e for k, e in sorted(g.edges.items(), key=lambda kv: _edge_key(kv[0]))
             if k[0] in nodes and k[1] in nodes]
    roles = {n: set(g.nodes[n].roles) for n in nodes}
    return PipelineSlice(anchor, ordered, edges, not missing, missing, roles)


@dataclass(frozen=True)
class InFlow:
    src: NodeId
    dst: NodeId
    kinds: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"from": str(self.src), "to": str(self.dst), "kinds": list(self.kinds)}


def completeness_check(sl: PipelineSlice, declared_inputs: Iterable, g: CallGraph) -> list[InFlow]:
    """In-flows into the model's upstream that do not come from the declared inputs.

    The model nodes are the slice's ModelEntry nodes (the anchor if none is
    tagged). Every in-edge of a slice node upstream of a model node must
    start inside the set reachable from ``declared_inputs``.
    """
    if not sl.nodes:
        return []
    declared = {d if isinstance(d, NodeId) else NodeId.parse(d) for d in declared_inputs}
    allowed = _reach(g, [d for d in declared if d in g.nodes], forward=True)
    members = set(sl.nodes)
    models = {n for n in members if Role.MODEL_ENTRY in g.nodes[n].roles} or {sl.anchor}
    upstream = _reach(g, models, forward=False) & members
    flows = []
    for dst in sorted(upstream, key=str):
        for src in sorted(g.predecessors(dst), key=str):
            if src not in allowed:
                kinds = tuple(sorted(e.kind.value for e in g.edges_between(src, dst)))
                flows.append(InFlow(src, dst, kinds))
    return flows


def load_static_edges(path) -> list[CallEdge]:
    with open(path, encoding="utf-8") as fh:
        return [CallEdge.from_dict(d) for d in json.load(fh)]


def load_jumps(path) -> list[JumpRecord]:
    with open(path, encoding="utf-8") as fh:
        return [JumpRecord.from_dict(d) for d in json.load(fh)]


def load_roles(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def anchor_from_candidate(c: CandidateFunction) -> NodeId:
    return NodeId(c.function_name, c.library)
