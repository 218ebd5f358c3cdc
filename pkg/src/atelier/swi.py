"""Semantic Workflow Interface: atomic workflows as described, callable functions.

A library is loaded from one descriptor document plus a directory of API-format
templates. Planners only ever see :func:`render_context`; they call workflows
by name through :class:`SwiCall` and never touch node graphs.
"""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Iterator, Mapping

from .graph import (
    Literal,
    ParseError,
    WorkflowGraph,
    diff_graphs,
    load_workflow,
    validate_dag,
)

log = logging.getLogger(__name__)

FIELDS = ("name", "template", "kind", "description", "param", "constraint")


class TaskKind(str, Enum):
    TEXT_TO_IMAGE = "text-to-image"
    IMAGE_TO_IMAGE = "image-to-image"
    TEXT_TO_VIDEO = "text-to-video"
    IMAGE_TO_VIDEO = "image-to-video"
    VIDEO_TO_VIDEO = "video-to-video"
    AUXILIARY = "auxiliary"


class ParamKind(str, Enum):
    PROMPT_TEXT = "prompt-text"
    IMAGE_PATH = "image-path"
    VIDEO_PATH = "video-path"
    NUMBER = "number"

    def accepts(self, value: Any) -> bool:
        if self is ParamKind.NUMBER:
            return isinstance(value, (int, float)) and not isinstance(value, bool)
        return isinstance(value, str)


class LibraryError(ValueError):
    def __init__(self, kind: str, descriptor: str | None, message: str = ""):
        self.kind = kind
        self.descriptor = descriptor
        super().__init__(f"{kind} in {descriptor!r}: {message}" if message else f"{kind} in {descriptor!r}")


class InstantiationError(ValueError):
    def __init__(self, kind: str, key: str):
        self.kind = kind
        self.key = key
        super().__init__(f"{kind}({key})")


class AdaptError(ValueError):
    def __init__(self, kind: str, key: str, message: str = ""):
        self.kind = kind
        self.key = key
        super().__init__(f"{kind}({key})" + (f": {message}" if message else ""))


class ConstraintClamped(UserWarning):
    """A constraint value fell outside its domain and was clamped."""


@dataclass(frozen=True)
class ParamSpec:
    key: str
    kind: ParamKind
    required: bool = True
    default: Any = None


@dataclass(frozen=True)
class ValueDomain:
    lo: float | None = None
    hi: float | None = None
    choices: tuple[Any, ...] = ()

    @property
    def is_range(self) -> bool:
        return not self.choices

    def describe(self) -> str:
        if self.choices:
            return "|".join(str(c) for c in self.choices)
        return f"{_fmt_num(self.lo)}..{_fmt_num(self.hi)}"


def _fmt_num(x: float | None) -> str:
    if x is None:
        return ""
    return str(int(x)) if float(x).is_integer() else str(x)


@dataclass(frozen=True)
class ConstraintSpec:
    key: str
    target_class: str
    target_input: str
    domain: ValueDomain


@dataclass(frozen=True)
class SwiDescriptor:
    name: str
    description: str
    task_kind: TaskKind
    required_params: tuple[ParamSpec, ...]
    optional_constraints: tuple[ConstraintSpec, ...] = ()
    template_path: str = ""

    def param(self, key: str) -> ParamSpec | None:
        for p in self.required_params:
            if p.key == key:
                return p
        return None

    def constraints_for(self, key: str) -> list[ConstraintSpec]:
        return [c for c in self.optional_constraints if c.key == key]

    @property
    def constraint_keys(self) -> list[str]:
        return list(dict.fromkeys(c.key for c in self.optional_constraints))


@dataclass(frozen=True)
class AtomicWorkflow:
    descriptor: SwiDescriptor
    template: WorkflowGraph


@dataclass(frozen=True)
class SwiCall:
    workflow_name: str
    arguments: Mapping[str, Any] = field(default_factory=dict)
    constraints: Mapping[str, Any] = field(default_factory=dict)

    def to_json(self) -> dict[str, Any]:
        return {
            "workflow": self.workflow_name,
            "arguments": dict(self.arguments),
            "constraints": dict(self.constraints),
        }

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> SwiCall:
        name = obj.get("workflow") or obj.get("workflow_name") or obj.get("name")
        if not isinstance(name, str) or not name:
            raise ValueError(f"call without a workflow name: {obj!r}")
        args = obj.get("arguments", {}) or {}
        cons = obj.get("constraints", {}) or {}
        if not isinstance(args, dict) or not isinstance(cons, dict):
            raise ValueError(f"arguments and constraints must be objects: {obj!r}")
        return cls(name, args, cons)


class Library(Mapping[str, AtomicWorkflow]):
    """Immutable name -> AtomicWorkflow mapping, in document order."""

    def __init__(self, workflows: list[AtomicWorkflow] | None = None, context_budget: int = 4000):
        self._items = {wf.descriptor.name: wf for wf in workflows or []}
        self.context_budget = context_budget

    def __getitem__(self, name: str) -> AtomicWorkflow:
        return self._items[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._items)

    def __len__(self) -> int:
        return len(self._items)

    def __repr__(self) -> str:
        return f"Library({list(self._items)})"

    def descriptors(self) -> list[SwiDescriptor]:
        return [wf.descriptor for wf in self._items.values()]


# -- descriptor document -------------------------------------------------------


def _split_entries(text: str) -> list[list[tuple[int, str]]]:
    entries: list[list[tuple[int, str]]] = [[]]
    for lineno, line in enumerate(text.splitlines(), 1):
        if line.strip() == "---":
            entries.append([])
        elif line.lstrip().startswith("#"):
            continue
        else:
            entries[-1].append((lineno, line))
    return [e for e in entries if any(line.strip() for _, line in e)]


def _field_of(line: str) -> tuple[str, str] | None:
    head, sep, rest = line.partition(":")
    if sep and not line[:1].isspace() and head.strip() in FIELDS:
        return head.strip(), rest.strip()
    return None


def _parse_default(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _parse_param(value: str, where: str) -> ParamSpec:
    parts = value.split(None, 3)
    if len(parts) < 3 or parts[2] not in ("required", "optional"):
        raise LibraryError("malformed-document", where, f"bad param line {value!r}")
    try:
        kind = ParamKind(parts[1])
    except ValueError:
        raise LibraryError("malformed-document", where, f"unknown param kind {parts[1]!r}") from None
    default = _parse_default(parts[3]) if len(parts) == 4 else None
    return ParamSpec(parts[0], kind, parts[2] == "required", default)


def _parse_number(raw: str, where: str) -> float:
    try:
        num = float(raw)
    except ValueError:
        raise LibraryError("malformed-document", where, f"bad bound {raw!r}") from None
    return int(num) if num.is_integer() and "." not in raw else num


def _parse_constraint(value: str, where: str) -> ConstraintSpec:
    parts = value.split()
    if len(parts) < 3:
        raise LibraryError("malformed-document", where, f"bad constraint line {value!r}")
    key, domain_raw = parts[0], parts[-1]
    target = " ".join(parts[1:-1])
    cls_name, dot, input_name = target.rpartition(".")
    if not dot or not cls_name or not input_name:
        raise LibraryError("malformed-document", where, f"bad constraint target {target!r}")
    if ".." in domain_raw:
        lo, _, hi = domain_raw.partition("..")
        domain = ValueDomain(_parse_number(lo, where), _parse_number(hi, where))
        if domain.lo > domain.hi:
            raise LibraryError("malformed-document", where, f"empty range {domain_raw!r}")
    else:
        domain = ValueDomain(choices=tuple(_parse_default(c) for c in domain_raw.split("|")))
    return ConstraintSpec(key, cls_name, input_name, domain)


def parse_descriptor_document(text: str) -> list[SwiDescriptor]:
    descriptors = []
    for entry in _split_entries(text):
        where = f"entry at line {entry[0][0]}"
        values: dict[str, Any] = {"param": [], "constraint": []}
        current: str | None = None
        for _, line in entry:
            parsed = _field_of(line)
            if parsed:
                current, value = parsed
                if current in ("param", "constraint"):
                    values[current].append(value)
                elif current in values:
                    raise LibraryError("malformed-document", where, f"repeated field {current!r}")
                else:
                    values[current] = value
            elif current == "description" and line.strip():
                values["description"] = f"{values['description']} {line.strip()}".strip()
            elif line.strip():
                raise LibraryError("malformed-document", where, f"unexpected line {line!r}")
        name = values.get("name", "")
        where = name or where
        for required in ("name", "template", "kind"):
            if not values.get(required):
                raise LibraryError("malformed-document", where, f"missing {required!r}")
        if not values.get("description"):
            raise LibraryError("malformed-document", where, "description is empty")
        try:
            kind = TaskKind(values["kind"])
        except ValueError:
            raise LibraryError("malformed-document", where, f"unknown kind {values['kind']!r}") from None
        params = tuple(_parse_param(v, where) for v in values["param"])
        keys = [p.key for p in params]
        if len(set(keys)) != len(keys):
            raise LibraryError("malformed-document", where, "duplicate param key")
        constraints = tuple(_parse_constraint(v, where) for v in values["constraint"])
        descriptors.append(
            SwiDescriptor(name, values["description"], kind, params, constraints, values["template"])
        )
    return descriptors


def _check_workflow(desc: SwiDescriptor, template: WorkflowGraph) -> None:
    report = validate_dag(template)
    if not report.ok:
        raise LibraryError("invalid-template", desc.name, "; ".join(f.line() for f in report.findings))
    declared = {p.key for p in desc.required_params}
    present = template.placeholder_keys()
    for key in sorted(present - declared):
        raise LibraryError("unbound-placeholder", desc.name, key)
    for p in desc.required_params:
        if p.required and p.key not in present:
            raise LibraryError("missing-required-placeholder", desc.name, p.key)
    seen: set[tuple[str, str]] = set()
    for c in desc.optional_constraints:
        target = (c.target_class, c.target_input)
        if target in seen:
            raise LibraryError("duplicate-constraint-target", desc.name, f"{c.target_class}.{c.target_input}")
        seen.add(target)
        sites = [
            n for n in template.nodes.values()
            if n.class_type == c.target_class and isinstance(n.inputs.get(c.target_input), Literal)
        ]
        if not sites:
            raise LibraryError("invalid-constraint-target", desc.name, f"{c.key} -> {c.target_class}.{c.target_input}")


def load_library(
    descriptor_document: str,
    template_dir: str | Path,
    context_budget: int = 4000,
) -> Library:
    template_dir = Path(template_dir)
    workflows: list[AtomicWorkflow] = []
    names: set[str] = set()
    for desc in parse_descriptor_document(descriptor_document):
        if desc.name in names:
            raise LibraryError("duplicate-name", desc.name)
        names.add(desc.name)
        path = template_dir / desc.template_path
        if not path.is_file():
            raise LibraryError("unknown-template-file", desc.name, str(desc.template_path))
        try:
            template = load_workflow(path).with_metadata(workflow=desc.name)
        except ParseError as exc:
            raise LibraryError("invalid-template", desc.name, str(exc)) from None
        _check_workflow(desc, template)
        workflows.append(AtomicWorkflow(desc, template))
    return Library(workflows, context_budget)


def load_library_file(path: str | Path, template_dir: str | Path | None = None, **kw: Any) -> Library:
    path = Path(path)
    return load_library(path.read_text(encoding="utf-8"), template_dir or path.parent, **kw)


def fixture_library() -> Library:
    """The bundled twelve-workflow library."""
    return load_library_file(Path(__file__).parent / "fixtures" / "library.txt")


# -- context -----------------------------------------------------------------

CONTEXT_HEADER = "# Available workflows\nCall a workflow by name with its parameters; constraints are optional.\n"


def render_context(library: Library) -> str:
    parts = [CONTEXT_HEADER]
    for d in library.descriptors():
        lines = [f"\n## {d.name}", f"kind: {d.task_kind.value}", f"description: {d.description}"]
        for p in d.required_params:
            flag = "required" if p.required else "optional"
            lines.append(f"param: {p.key} ({p.kind.value}, {flag})")
        for key in d.constraint_keys:
            specs = d.constraints_for(key)
            lines.append(f"constraint: {key} in {specs[0].domain.describe()}")
        parts.append("\n".join(lines) + "\n")
    return "".join(parts)


def estimate_tokens(text: str) -> int:
    return len(text.split())


# -- instantiation and adaptation --------------------------------------------


def instantiate(wf: AtomicWorkflow, call: SwiCall) -> WorkflowGraph:
    desc = wf.descriptor
    if call.workflow_name != desc.name:
        raise InstantiationError("wrong-workflow", call.workflow_name)
    for key in call.arguments:
        if desc.param(key) is None:
            raise InstantiationError("unknown-argument", key)
    values: dict[str, Any] = {}
    for p in desc.required_params:
        if p.key in call.arguments:
            value = call.arguments[p.key]
            if not p.kind.accepts(value):
                raise InstantiationError("type-mismatch", p.key)
            values[p.key] = value
        elif p.required:
            raise InstantiationError("missing-argument", p.key)
        else:
            values[p.key] = p.default if p.default is not None else ("" if p.kind is not ParamKind.NUMBER else 0)

    graph = wf.template
    for node in list(graph.nodes.values()):
        filled = {name: Literal(ph.fill(values[ph.key])) for name, ph in node.placeholders()}
        if filled:
            graph = graph.with_node(node.replace_inputs(**filled))
    return graph.with_metadata(workflow=desc.name, task_kind=desc.task_kind.value)


def _coerce_like(original: Any, value: float) -> Any:
    if isinstance(original, int) and not isinstance(original, bool) and float(value).is_integer():
        return int(value)
    return value


def adapt_parameters(
    graph: WorkflowGraph,
    descriptor: SwiDescriptor,
    constraints: Mapping[str, Any],
) -> WorkflowGraph:
    """Apply constraint values to their bound literal inputs.

    Out-of-range numbers are clamped into the domain with a
    :class:`ConstraintClamped` warning. The node and link sets never change.
    """
    out = graph
    for key, value in constraints.items():
        specs = descriptor.constraints_for(key)
        if not specs:
            raise AdaptError("unknown-constraint", key)
        for spec in specs:
            dom = spec.domain
            if dom.is_range:
                if isinstance(value, bool) or not isinstance(value, (int, float)):
                    raise AdaptError("type-mismatch", key, f"expected a number, got {value!r}")
                clamped = min(max(value, dom.lo), dom.hi)
                if clamped != value:
                    warnings.warn(
                        ConstraintClamped(f"{key}={value} clamped to {clamped} for {spec.target_class}.{spec.target_input}"),
                        stacklevel=2,
                    )
                new_value = clamped
            else:
                if value not in dom.choices:
                    raise AdaptError("out-of-domain", key, f"{value!r} not in {dom.describe()}")
                new_value = value
            for node in list(out.nodes.values()):
                if node.class_type != spec.target_class:
                    continue
                current = node.inputs.get(spec.target_input)
                if not isinstance(current, Literal):
                    continue
                if dom.is_range:
                    lit = Literal(_coerce_like(current.value, new_value))
                else:
                    lit = Literal(new_value)
                out = out.with_node(node.replace_inputs(**{spec.target_input: lit}))
    assert diff_graphs(graph, out).structure_preserved
    return out


def synthetic_arguments(desc: SwiDescriptor) -> dict[str, Any]:
    """Type-correct arguments for every declared parameter; handy for smoke runs."""
    samples = {
        ParamKind.PROMPT_TEXT: "a lighthouse at dusk",
        ParamKind.IMAGE_PATH: "input/example.png",
        ParamKind.VIDEO_PATH: "input/example.mp4",
        ParamKind.NUMBER: 1,
    }
    return {p.key: samples[p.kind] for p in desc.required_params}
