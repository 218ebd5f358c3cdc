"""Node-graph workflows in the ComfyUI API format.

A document maps node ids to ``{"class_type": ..., "inputs": {...}}``. Inputs
are literals, links written as ``[source_id, output_index]``, or placeholders
written as the string ``__PARAM:<key>__`` (optionally embedded in a longer
string).
"""

from __future__ import annotations

import heapq
import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterator, Mapping, Union

PLACEHOLDER_RE = re.compile(r"__PARAM:([A-Za-z0-9_.\-]+)__")

Scalar = Union[str, int, float, bool]


class ParseError(ValueError):
    """Raised when a document is not a well-formed API-format workflow."""

    def __init__(self, kind: str, where: str | int | None, message: str = ""):
        self.kind = kind
        self.where = where
        super().__init__(f"{kind} at {where!r}: {message}" if message else f"{kind} at {where!r}")


class CycleError(ValueError):
    def __init__(self, cycle: list[str]):
        self.cycle = cycle
        super().__init__(f"cycle through nodes {cycle}")


@dataclass(frozen=True)
class Literal:
    value: Scalar | None


@dataclass(frozen=True)
class Link:
    source: str
    output_index: int = 0


@dataclass(frozen=True)
class Placeholder:
    """A template slot. ``text`` is the raw string the token was found in."""

    key: str
    text: str

    @property
    def bare(self) -> bool:
        return self.text == f"__PARAM:{self.key}__"

    def fill(self, value: Any) -> Any:
        if self.bare:
            return value
        return self.text.replace(f"__PARAM:{self.key}__", str(value))


InputValue = Union[Literal, Link, Placeholder]


@dataclass(frozen=True)
class WorkflowNode:
    id: str
    class_type: str
    inputs: Mapping[str, InputValue]
    # UI metadata and other unknown fields; re-emitted verbatim, ignored by equality
    extras: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def links(self) -> Iterator[tuple[str, Link]]:
        for name, value in self.inputs.items():
            if isinstance(value, Link):
                yield name, value

    def placeholders(self) -> Iterator[tuple[str, Placeholder]]:
        for name, value in self.inputs.items():
            if isinstance(value, Placeholder):
                yield name, value

    def replace_inputs(self, **changes: InputValue) -> WorkflowNode:
        inputs = dict(self.inputs)
        inputs.update(changes)
        return WorkflowNode(self.id, self.class_type, inputs, self.extras)


@dataclass(frozen=True)
class WorkflowGraph:
    """An immutable API-format workflow. Mutating helpers return new graphs."""

    nodes: Mapping[str, WorkflowNode]
    metadata: Mapping[str, Any] = field(default_factory=dict, compare=False)

    def __len__(self) -> int:
        return len(self.nodes)

    def __contains__(self, node_id: object) -> bool:
        return node_id in self.nodes

    def __getitem__(self, node_id: str) -> WorkflowNode:
        return self.nodes[node_id]

    def edges(self) -> list[tuple[str, str]]:
        """(source, consumer) pairs, one per link input."""
        return [
            (link.source, node.id)
            for node in self.nodes.values()
            for _, link in node.links()
        ]

    def placeholders(self) -> list[tuple[str, str, Placeholder]]:
        return [
            (node.id, name, ph)
            for node in self.nodes.values()
            for name, ph in node.placeholders()
        ]

    def placeholder_keys(self) -> set[str]:
        return {ph.key for _, _, ph in self.placeholders()}

    def with_node(self, node: WorkflowNode) -> WorkflowGraph:
        nodes = dict(self.nodes)
        nodes[node.id] = node
        return WorkflowGraph(nodes, self.metadata)

    def with_metadata(self, **meta: Any) -> WorkflowGraph:
        return WorkflowGraph(self.nodes, {**self.metadata, **meta})


# -- parsing -----------------------------------------------------------------


def _byte_offset(text: str, char_pos: int) -> int:
    return len(text[:char_pos].encode("utf-8"))


class _Object(dict):
    """json object that remembers keys it saw more than once."""

    duplicates: list[str]


def _collect_pairs(pairs: list[tuple[str, Any]]) -> _Object:
    out = _Object()
    out.duplicates = []
    for key, value in pairs:
        if key in out:
            out.duplicates.append(key)
        out[key] = value
    return out


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, list):
        return [_plain(v) for v in value]
    return value


def _parse_value(node_id: str, name: str, raw: Any) -> InputValue:
    if isinstance(raw, list):
        if len(raw) == 1 and isinstance(raw[0], str):
            return Link(raw[0], 0)
        if (
            len(raw) == 2
            and isinstance(raw[0], str)
            and isinstance(raw[1], int)
            and not isinstance(raw[1], bool)
            and raw[1] >= 0
        ):
            return Link(raw[0], raw[1])
        raise ParseError("malformed-link", node_id, f"input {name!r}: {raw!r}")
    if isinstance(raw, str):
        keys = PLACEHOLDER_RE.findall(raw)
        if raw.count("__PARAM:") != len(keys):
            raise ParseError("malformed-placeholder", node_id, f"input {name!r}: bad placeholder token in {raw!r}")
        if len(keys) > 1:
            raise ParseError("malformed-placeholder", node_id, f"input {name!r} holds {len(keys)} placeholders")
        if keys:
            return Placeholder(keys[0], raw)
        return Literal(raw)
    if raw is None or isinstance(raw, (int, float, bool)):
        return Literal(raw)
    raise ParseError("malformed-syntax", node_id, f"input {name!r} is a {type(raw).__name__}")


def parse_workflow(text: bytes | str) -> WorkflowGraph:
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise ParseError("malformed-syntax", exc.start, "not UTF-8") from None
    try:
        doc = json.loads(text, object_pairs_hook=_collect_pairs)
    except json.JSONDecodeError as exc:
        raise ParseError("malformed-syntax", _byte_offset(text, exc.pos), exc.msg) from None
    if not isinstance(doc, dict):
        raise ParseError("malformed-syntax", 0, "top level must be an object")
    if doc.duplicates:
        raise ParseError("duplicate-node-id", doc.duplicates[0])

    nodes: dict[str, WorkflowNode] = {}
    for node_id, body in doc.items():
        if not node_id:
            raise ParseError("malformed-syntax", node_id, "empty node id")
        if not isinstance(body, dict):
            raise ParseError("malformed-syntax", node_id, "node must be an object")
        class_type = body.get("class_type")
        if not isinstance(class_type, str) or not class_type:
            raise ParseError("missing-class-type", node_id)
        raw_inputs = body.get("inputs", {})
        if not isinstance(raw_inputs, dict):
            raise ParseError("malformed-syntax", node_id, "inputs must be an object")
        if getattr(raw_inputs, "duplicates", None):
            raise ParseError("malformed-syntax", node_id, f"duplicate input {raw_inputs.duplicates[0]!r}")
        inputs = {name: _parse_value(node_id, name, raw) for name, raw in raw_inputs.items()}
        extras = {k: _plain(v) for k, v in body.items() if k not in ("class_type", "inputs")}
        nodes[node_id] = WorkflowNode(node_id, class_type, inputs, extras)
    return WorkflowGraph(nodes)


# -- serialization -----------------------------------------------------------


def _emit_value(value: InputValue) -> Any:
    if isinstance(value, Link):
        return [value.source, value.output_index]
    if isinstance(value, Placeholder):
        return value.text
    return value.value


def to_document(graph: WorkflowGraph) -> dict[str, Any]:
    doc: dict[str, Any] = {}
    for node in graph.nodes.values():
        body: dict[str, Any] = {
            "inputs": {name: _emit_value(v) for name, v in node.inputs.items()},
            "class_type": node.class_type,
        }
        body.update(node.extras)
        doc[node.id] = body
    return doc


def serialize_workflow(graph: WorkflowGraph, indent: int | None = None) -> bytes:
    return json.dumps(to_document(graph), indent=indent, ensure_ascii=False).encode("utf-8")


# -- validation --------------------------------------------------------------


@dataclass(frozen=True)
class Finding:
    kind: str  # cycle | unresolved-link | unbound-placeholder
    node_ids: tuple[str, ...]
    message: str = ""

    def line(self) -> str:
        return f"FINDING {self.kind} {','.join(self.node_ids)}"


@dataclass(frozen=True)
class ValidationReport:
    findings: tuple[Finding, ...]

    @property
    def ok(self) -> bool:
        return not self.findings

    @property
    def has_cycle(self) -> bool:
        return any(f.kind == "cycle" for f in self.findings)

    def __bool__(self) -> bool:
        return self.ok


def _adjacency(graph: WorkflowGraph) -> dict[str, list[str]]:
    adj: dict[str, list[str]] = {nid: [] for nid in graph.nodes}
    for src, dst in graph.edges():
        if src in adj:
            adj[src].append(dst)
    return adj


def strongly_connected_cycles(graph: WorkflowGraph) -> list[list[str]]:
    """Node sets of every cycle-bearing strongly connected component (iterative Tarjan)."""
    adj = _adjacency(graph)
    index: dict[str, int] = {}
    low: dict[str, int] = {}
    on_stack: set[str] = set()
    stack: list[str] = []
    counter = 0
    out: list[list[str]] = []

    for root in sorted(adj):
        if root in index:
            continue
        work = [(root, iter(adj[root]))]
        index[root] = low[root] = counter
        counter += 1
        stack.append(root)
        on_stack.add(root)
        while work:
            v, it = work[-1]
            advanced = False
            for w in it:
                if w not in index:
                    index[w] = low[w] = counter
                    counter += 1
                    stack.append(w)
                    on_stack.add(w)
                    work.append((w, iter(adj[w])))
                    advanced = True
                    break
                if w in on_stack:
                    low[v] = min(low[v], index[w])
            if advanced:
                continue
            work.pop()
            if work:
                parent = work[-1][0]
                low[parent] = min(low[parent], low[v])
            if low[v] == index[v]:
                comp = []
                while True:
                    w = stack.pop()
                    on_stack.discard(w)
                    comp.append(w)
                    if w == v:
                        break
                if len(comp) > 1 or v in adj[v]:
                    out.append(sorted(comp))
    return out


def validate_dag(graph: WorkflowGraph, require_concrete: bool = False) -> ValidationReport:
    findings: list[Finding] = []
    for node in graph.nodes.values():
        for name, link in node.links():
            if link.source not in graph.nodes:
                findings.append(
                    Finding("unresolved-link", (node.id, link.source), f"input {name!r}")
                )
    for comp in strongly_connected_cycles(graph):
        findings.append(Finding("cycle", tuple(comp)))
    if require_concrete:
        for node_id, name, ph in graph.placeholders():
            findings.append(Finding("unbound-placeholder", (node_id,), f"{name}={ph.key}"))
    return ValidationReport(tuple(findings))


def topological_order(graph: WorkflowGraph) -> list[str]:
    """Kahn's algorithm with a min-heap: the lexicographically least valid order.

    Links to nodes absent from the graph are ignored here; validate_dag reports them.
    """
    indegree = {nid: 0 for nid in graph.nodes}
    adj = _adjacency(graph)
    for src, dst in graph.edges():
        if src in indegree:
            indegree[dst] += 1
    heap = [nid for nid, d in indegree.items() if d == 0]
    heapq.heapify(heap)
    order: list[str] = []
    while heap:
        nid = heapq.heappop(heap)
        order.append(nid)
        for dst in adj[nid]:
            indegree[dst] -= 1
            if indegree[dst] == 0:
                heapq.heappush(heap, dst)
    if len(order) != len(indegree):
        raise CycleError(strongly_connected_cycles(graph)[0])
    return order


# -- diff --------------------------------------------------------------------


@dataclass(frozen=True)
class InputChange:
    node_id: str
    input_name: str
    old: Any
    new: Any

    def swapped(self) -> InputChange:
        return InputChange(self.node_id, self.input_name, self.new, self.old)


@dataclass(frozen=True)
class GraphDiff:
    added: tuple[str, ...] = ()
    removed: tuple[str, ...] = ()
    changed_classes: tuple[InputChange, ...] = ()
    changed_literals: tuple[InputChange, ...] = ()
    changed_links: tuple[InputChange, ...] = ()

    @property
    def empty(self) -> bool:
        return not (
            self.added or self.removed or self.changed_classes
            or self.changed_literals or self.changed_links
        )

    @property
    def structure_preserved(self) -> bool:
        """No node or edge was added, removed, or rewired."""
        return not (self.added or self.removed or self.changed_classes or self.changed_links)

    def swapped(self) -> GraphDiff:
        return GraphDiff(
            added=self.removed,
            removed=self.added,
            changed_classes=tuple(c.swapped() for c in self.changed_classes),
            changed_literals=tuple(c.swapped() for c in self.changed_literals),
            changed_links=tuple(c.swapped() for c in self.changed_links),
        )


_MISSING = object()


def diff_graphs(a: WorkflowGraph, b: WorkflowGraph) -> GraphDiff:
    added = tuple(sorted(set(b.nodes) - set(a.nodes)))
    removed = tuple(sorted(set(a.nodes) - set(b.nodes)))
    classes, literals, links = [], [], []
    for nid in sorted(set(a.nodes) & set(b.nodes)):
        na, nb = a.nodes[nid], b.nodes[nid]
        if na.class_type != nb.class_type:
            classes.append(InputChange(nid, "class_type", na.class_type, nb.class_type))
        for name in sorted(set(na.inputs) | set(nb.inputs)):
            va = na.inputs.get(name, _MISSING)
            vb = nb.inputs.get(name, _MISSING)
            if va == vb:
                continue
            old = None if va is _MISSING else va
            new = None if vb is _MISSING else vb
            change = InputChange(nid, name, old, new)
            if isinstance(va, Link) or isinstance(vb, Link):
                links.append(change)
            else:
                literals.append(change)
    return GraphDiff(added, removed, tuple(classes), tuple(literals), tuple(links))


def load_workflow(path: str | Path) -> WorkflowGraph:
    p = Path(path)
    return parse_workflow(p.read_bytes()).with_metadata(source=str(p))
