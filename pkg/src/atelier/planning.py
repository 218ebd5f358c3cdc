"""Search-tree planning with feedback confined to one tree level.

Each plan node asks the planner for a chain of workflow calls and executes
only the head. A successful call opens a child node on the updated workspace;
a failed one is retried at the same node with its diagnostics, and once a
node runs out of attempts it reports a summary to its parent and nothing
further up.
"""

from __future__ import annotations

import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Any, Sequence

from .agents.base import AdapterFailure, AgentBundle, EvalVerdict, PlannerProposal, Threshold
from .backends.base import DEFAULT_TIMEOUT, Backend, BackendUnreachable, ExecutionOutcome
from .graph import validate_dag
from .swi import (
    AdaptError,
    ConstraintClamped,
    InstantiationError,
    Library,
    SwiCall,
    adapt_parameters,
    estimate_tokens,
    instantiate,
    render_context,
)
from .trace import RunTrace
from .workspace import ArtifactRecord, Workspace, WorkspaceSnapshot

log = logging.getLogger(__name__)

NO_WORKFLOW = "no applicable workflow"


class Policy(str, Enum):
    FULL = "full"
    NO_TREE = "no-tree"
    NO_FEEDBACK = "no-feedback"


class NodeStatus(str, Enum):
    OPEN = "open"
    EXPANDED = "expanded"
    SUCCEEDED = "succeeded"
    FAILED_EXHAUSTED = "failed-exhausted"


class Action(str, Enum):
    DESCEND = "descend"
    RETRY = "retry-same-level"
    PROPAGATE = "propagate-up"
    SUCCESS = "terminate-success"


@dataclass
class PlanConfig:
    max_depth: int = 6
    max_children_per_node: int = 3
    max_total_expansions: int = 24
    evaluation_threshold: Threshold = Threshold.NORMAL
    evaluate_intermediate: bool = False
    job_timeout: float = DEFAULT_TIMEOUT

    def __post_init__(self) -> None:
        self.evaluation_threshold = Threshold(self.evaluation_threshold)
        for name in ("max_depth", "max_children_per_node", "max_total_expansions"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")


@dataclass
class AttemptRecord:
    call: SwiCall | None
    outcome: ExecutionOutcome | AdapterFailure | None = None
    child: int | None = None
    feedback: str | None = None
    verdict: EvalVerdict | None = None
    terminal: bool = False
    artifacts: tuple[ArtifactRecord, ...] = ()


@dataclass
class PlanNode:
    id: int
    parent: int | None
    depth: int
    workspace_snapshot: WorkspaceSnapshot
    edge_artifacts: tuple[ArtifactRecord, ...] = ()
    proposed_chain: tuple[SwiCall, ...] = ()
    attempts: list[AttemptRecord] = field(default_factory=list)
    status: NodeStatus = NodeStatus.OPEN
    # (feedback id, text) visible to this node's planner calls
    feedback: list[tuple[str, str]] = field(default_factory=list)

    @property
    def direct_failures(self) -> list[str]:
        return [a.feedback for a in self.attempts if a.feedback and a.child is None]


@dataclass
class TaskResult:
    status: str  # resolved | unresolved-exhausted | unresolved-budget
    artifacts: list[str]
    trace: RunTrace
    expansions: int
    nodes: dict[int, PlanNode]
    workspace: WorkspaceSnapshot
    duration: float = 0.0
    structural_failures: int = 0
    run_dir: Path | None = None

    @property
    def resolved(self) -> bool:
        return self.status == "resolved"

    def summary(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "artifacts": list(self.artifacts),
            "expansions": self.expansions,
            "duration_ms": round(self.duration * 1000),
        }


def handle_result(node: PlanNode, attempt: AttemptRecord, verdict: EvalVerdict, max_children: int) -> Action:
    """Decide what follows an executed attempt (already appended to ``node.attempts``)."""
    if verdict.passed:
        return Action.SUCCESS if attempt.terminal else Action.DESCEND
    if len(node.attempts) < max_children:
        return Action.RETRY
    return Action.PROPAGATE


def preprocess(instruction: str, agents: AgentBundle, trace: RunTrace | None = None) -> str:
    try:
        enriched = agents.preprocessor.expand(instruction)
    except Exception as exc:  # any adapter fault degrades to the raw instruction
        if trace is not None:
            trace.emit("warning", None, message=f"preprocessing failed, using raw instruction: {exc}")
        return instruction
    if not isinstance(enriched, str) or not enriched:
        return instruction
    return enriched


class _Budget(Exception):
    pass


class TaskRunner:
    """Runs one task. Not reusable: build a new runner per task."""

    def __init__(
        self,
        library: Library,
        agents: AgentBundle,
        backend: Backend,
        config: PlanConfig | None = None,
        run_dir: str | Path | None = None,
        policy: Policy = Policy.FULL,
        trace: RunTrace | None = None,
    ):
        self.library = library
        self.agents = agents
        self.backend = backend
        self.config = config or PlanConfig()
        self.run_dir = Path(run_dir) if run_dir else None
        self.policy = Policy(policy)
        self.trace = trace or RunTrace()
        self.context = render_context(library)
        self.nodes: dict[int, PlanNode] = {}
        self.expansions = 0
        self.structural_failures = 0
        self._feedback_seq = 0
        self._final: tuple[ArtifactRecord, ...] = ()
        self._last_ws: WorkspaceSnapshot | None = None

    # -- helpers --------------------------------------------------------------

    @property
    def artifact_dir(self) -> Path | None:
        return self.run_dir / "artifacts" if self.run_dir else None

    def _rel(self, path: str) -> str:
        if self.run_dir:
            try:
                return str(Path(path).resolve().relative_to(self.run_dir.resolve()))
            except ValueError:
                pass
        return str(path)

    def _open(self, parent: PlanNode | None, ws: WorkspaceSnapshot, edge: tuple[ArtifactRecord, ...] = ()) -> PlanNode:
        node = PlanNode(len(self.nodes), parent.id if parent else None, parent.depth + 1 if parent else 0, ws, edge)
        self.nodes[node.id] = node
        self._last_ws = ws
        self.trace.emit("node-opened", node.id, parent=node.parent, depth=node.depth)
        return node

    def _record_feedback(self, at: PlanNode, origin: int, text: str, attempt: int | None) -> None:
        fid = f"f{self._feedback_seq}"
        self._feedback_seq += 1
        self.trace.emit("feedback-recorded", at.id, feedback_id=fid, origin=origin, text=text, attempt=attempt)
        if self.policy is Policy.FULL:
            at.feedback.append((fid, text))

    def _visible_feedback(self, node: PlanNode) -> list[tuple[str, str]]:
        return list(node.feedback) if self.policy is Policy.FULL else []

    # -- one edge -------------------------------------------------------------

    def _propose(self, node: PlanNode) -> PlannerProposal | AdapterFailure:
        visible = self._visible_feedback(node)
        try:
            proposal = self.agents.planner.propose(node.workspace_snapshot, self.context, [t for _, t in visible])
            if not isinstance(proposal, PlannerProposal):
                raise AdapterFailure(f"planner returned {type(proposal).__name__}, not a proposal")
        except AdapterFailure as exc:
            self.trace.emit("call-proposed", node.id, attempt=len(node.attempts), chain=[], terminate=False,
                            feedback_ids=[f for f, _ in visible], error=str(exc))
            return exc
        self.trace.emit(
            "call-proposed",
            node.id,
            attempt=len(node.attempts),
            chain=[c.workflow_name for c in proposal.chain],
            terminate=proposal.terminate,
            feedback_ids=[f for f, _ in visible],
            rationale=proposal.rationale,
        )
        return proposal

    def _evaluate(self, node: PlanNode, task_kind: str, artifacts: Sequence[ArtifactRecord],
                  workflow: str | None, terminal: bool) -> EvalVerdict:
        if not artifacts:
            verdict = EvalVerdict(False, "nothing to evaluate: no visual result has been produced yet")
        else:
            try:
                verdict = self.agents.evaluator.evaluate(
                    node.workspace_snapshot.enriched_spec or node.workspace_snapshot.instruction,
                    list(artifacts), task_kind, self.config.evaluation_threshold,
                )
            except AdapterFailure as exc:
                verdict = EvalVerdict(False, f"evaluator failure: {exc}")
        self.trace.emit("evaluated", node.id, workflow=workflow, passed=verdict.passed, terminal=terminal,
                        threshold=self.config.evaluation_threshold.value, analysis=verdict.failure_analysis)
        return verdict

    def expand(self, node: PlanNode) -> tuple[AttemptRecord, EvalVerdict, Workspace | None]:
        """Plan at ``node`` and execute at most one call: the head of the proposed chain."""
        proposal = self._propose(node)
        if isinstance(proposal, AdapterFailure):
            text = f"planner failure: {proposal}" + (f" (reply: {proposal.raw[:300]})" if proposal.raw else "")
            attempt = AttemptRecord(None, proposal)
            return attempt, EvalVerdict(False, text), None

        if proposal.terminate:
            attempt = AttemptRecord(None, terminal=True, artifacts=node.edge_artifacts)
            kind = node.edge_artifacts[-1].origin[1] if node.edge_artifacts else ""
            task_kind = self.library[kind].descriptor.task_kind.value if kind in self.library else "auxiliary"
            verdict = self._evaluate(node, task_kind, node.edge_artifacts, None, True)
            return attempt, verdict, None

        node.proposed_chain = proposal.chain
        call = proposal.head
        terminal = len(proposal.chain) == 1
        attempt = AttemptRecord(call, terminal=terminal)
        wf = self.library.get(call.workflow_name)
        if wf is None:
            return attempt, EvalVerdict(False, f"unknown workflow {call.workflow_name!r}"), None
        try:
            graph = instantiate(wf, call)
            with warnings.catch_warnings(record=True) as caught:
                warnings.simplefilter("always", ConstraintClamped)
                graph = adapt_parameters(graph, wf.descriptor, call.constraints)
            for w in caught:
                self.trace.emit("warning", node.id, message=str(w.message))
        except (InstantiationError, AdaptError) as exc:
            return attempt, EvalVerdict(False, f"invalid call to {call.workflow_name}: {exc}"), None

        report = validate_dag(graph, require_concrete=True)
        if not report.ok:
            self.structural_failures += 1
            return attempt, EvalVerdict(False, "workflow failed structural validation: "
                                        + "; ".join(f.line() for f in report.findings)), None

        if self.expansions >= self.config.max_total_expansions:
            raise _Budget
        self.expansions += 1
        outcome = self.backend.execute(graph, self.config.job_timeout, self.artifact_dir)
        attempt.outcome = outcome
        self.trace.emit(
            "call-executed", node.id, workflow=call.workflow_name, job=self.expansions,
            status=outcome.status, fault=outcome.fault,
            artifacts=[self._rel(p) for _, p in outcome.artifacts],
        )
        if outcome.fault == "connection-refused":
            raise BackendUnreachable(outcome.diagnostics)
        if not outcome.ok:
            return attempt, EvalVerdict(False, f"{call.workflow_name} failed: {outcome.diagnostics}"), None

        child_ws = Workspace.extending(node.workspace_snapshot)
        try:
            annotations = {p: self.agents.annotator.annotate(p) for _, p in outcome.artifacts}
        except AdapterFailure as exc:
            return attempt, EvalVerdict(False, f"annotation of {call.workflow_name} output failed: {exc}"), None
        child_ws.ingest_outcome(outcome, annotations, (node.id, call.workflow_name), self.run_dir)
        produced = tuple(child_ws.artifacts[p] for _, p in outcome.artifacts)
        attempt.artifacts = produced

        task_kind = wf.descriptor.task_kind.value
        if terminal or self.config.evaluate_intermediate:
            verdict = self._evaluate(node, task_kind, produced, call.workflow_name, terminal)
            if not verdict.passed:
                verdict = EvalVerdict(False, f"{call.workflow_name} result rejected: {verdict.failure_analysis}",
                                      verdict.dimensions)
        else:
            verdict = EvalVerdict(True)
        return attempt, verdict, child_ws

    # -- search ---------------------------------------------------------------

    def _fail_attempt(self, node: PlanNode, attempt: AttemptRecord, text: str) -> Action:
        attempt.feedback = text
        self._record_feedback(node, node.id, text, len(node.attempts) - 1)
        return handle_result(node, attempt, EvalVerdict(False, text), self.config.max_children_per_node)

    def _exhaust(self, node: PlanNode) -> str:
        node.status = NodeStatus.FAILED_EXHAUSTED
        own = node.direct_failures
        if own:
            return f"sub-task at node {node.id} failed {len(node.attempts)} attempt(s); last: {own[-1]}"
        if node.attempts:
            return f"sub-task at node {node.id} failed: all {len(node.attempts)} option(s) failed further down"
        return f"sub-task at node {node.id} could not be attempted"

    def _solve(self, node: PlanNode) -> str | None:
        """Return None on success, else the failure summary for the parent."""
        if node.depth >= self.config.max_depth:
            text = f"depth limit {self.config.max_depth} reached"
            self._record_feedback(node, node.id, text, None)
            node.status = NodeStatus.FAILED_EXHAUSTED
            return f"sub-task at node {node.id} failed: {text}"

        while len(node.attempts) < self.config.max_children_per_node:
            attempt, verdict, child_ws = self.expand(node)
            node.attempts.append(attempt)
            if not verdict.passed:
                action = self._fail_attempt(node, attempt, verdict.failure_analysis)
                if action is Action.PROPAGATE:
                    break
                continue

            action = handle_result(node, attempt, verdict, self.config.max_children_per_node)
            if action is Action.SUCCESS:
                if child_ws is not None:
                    leaf = self._open(node, child_ws.snapshot(), attempt.artifacts)
                    attempt.child = leaf.id
                    leaf.status = NodeStatus.SUCCEEDED
                node.status = NodeStatus.SUCCEEDED
                self._final = attempt.artifacts
                return None

            node.status = NodeStatus.EXPANDED
            assert child_ws is not None
            child = self._open(node, child_ws.snapshot(), attempt.artifacts)
            attempt.child = child.id
            summary = self._solve(child)
            if summary is None:
                node.status = NodeStatus.SUCCEEDED
                return None
            self.trace.emit("backtracked", child.id, to=node.id)
            attempt.feedback = summary
            self._record_feedback(node, child.id, summary, len(node.attempts) - 1)
        return self._exhaust(node)

    def _solve_flat(self, root_ws: WorkspaceSnapshot) -> str | None:
        """Single-path re-planning: any failure restarts from the original workspace with no memory."""
        node = self._open(None, root_ws)
        proposals = 0
        limit = self.config.max_total_expansions * self.config.max_children_per_node
        last = "no attempt made"
        while proposals < limit:
            proposals += 1
            if node.depth >= self.config.max_depth:
                verdict, attempt, child_ws = EvalVerdict(False, f"depth limit {self.config.max_depth} reached"), None, None
            else:
                attempt, verdict, child_ws = self.expand(node)
                node.attempts.append(attempt)
            if verdict.passed and attempt is not None:
                action = Action.SUCCESS if attempt.terminal else Action.DESCEND
                child = self._open(node, child_ws.snapshot(), attempt.artifacts) if child_ws else None
                if child is not None:
                    attempt.child = child.id
                if action is Action.SUCCESS:
                    node.status = NodeStatus.SUCCEEDED
                    self._final = attempt.artifacts
                    return None
                node.status = NodeStatus.EXPANDED
                node = child
                continue
            last = verdict.failure_analysis
            if attempt is not None:
                attempt.feedback = last
            self._record_feedback(node, node.id, last, len(node.attempts) - 1 if attempt else None)
            node.status = NodeStatus.FAILED_EXHAUSTED
            self.trace.emit("backtracked", node.id, to=None)
            node = self._open(None, root_ws)
        return last

    def run(self, instruction: str, inputs: Sequence[str | Path] = ()) -> TaskResult:
        started = time.monotonic()
        enriched = preprocess(instruction, self.agents, self.trace)
        tokens = estimate_tokens(self.context)
        if tokens > self.library.context_budget:
            # the full context is still sent; this only flags the cost
            self.trace.emit("warning", None, message=f"library context is ~{tokens} tokens, "
                                                     f"over the budget of {self.library.context_budget}")
        ws = Workspace(instruction, enriched)
        ws.add_inputs(inputs)
        root_ws = ws.snapshot()
        self._last_ws = root_ws
        status = "unresolved-exhausted"
        try:
            if not self.library:
                root = self._open(None, root_ws)
                self._record_feedback(root, root.id, NO_WORKFLOW, None)
                root.status = NodeStatus.FAILED_EXHAUSTED
            elif self.policy is Policy.NO_TREE:
                status = "resolved" if self._solve_flat(root_ws) is None else status
            else:
                status = "resolved" if self._solve(self._open(None, root_ws)) is None else status
        except _Budget:
            status = "unresolved-budget"
        finally:
            self.trace.emit("terminated", None, status=status, expansions=self.expansions)
            final_ws = self._final_workspace()
            if self.run_dir:
                self.run_dir.mkdir(parents=True, exist_ok=True)
                self.trace.write(self.run_dir / "trace.jsonl")
                (self.run_dir / "workspace.json").write_text(
                    json.dumps(final_ws.to_json(), indent=2), encoding="utf-8"
                )
        return TaskResult(
            status,
            [a.path for a in self._final] if status == "resolved" else [],
            self.trace,
            self.expansions,
            self.nodes,
            final_ws,
            time.monotonic() - started,
            self.structural_failures,
            self.run_dir,
        )

    def _final_workspace(self) -> WorkspaceSnapshot:
        for node in reversed(list(self.nodes.values())):
            if node.status is NodeStatus.SUCCEEDED and not any(
                n.parent == node.id and n.status is NodeStatus.SUCCEEDED for n in self.nodes.values()
            ):
                return node.workspace_snapshot
        return self._last_ws


def run_task(
    instruction: str,
    inputs: Sequence[str | Path],
    library: Library,
    agents: AgentBundle,
    backend: Backend,
    config: PlanConfig | None = None,
    *,
    run_dir: str | Path | None = None,
    policy: Policy = Policy.FULL,
) -> TaskResult:
    return TaskRunner(library, agents, backend, config, run_dir, policy).run(instruction, inputs)
