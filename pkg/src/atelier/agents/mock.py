"""Deterministic stand-ins for the model-backed roles.

Every mock is a pure function of its constructor arguments and call inputs
(scripted mocks additionally of the call index), so runs replay exactly.
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping, Sequence

from ..backends.simulator import decode_payload
from ..swi import SwiCall
from ..workspace import Annotation, ArtifactRecord, WorkspaceSnapshot, artifact_kind, fingerprint_bytes
from .base import CUTOFFS, AdapterFailure, EvalVerdict, PlannerProposal, Threshold


def resolve_arguments(args: Mapping[str, Any], ws: WorkspaceSnapshot) -> dict[str, Any]:
    """Expand ``$task``, ``$latest``, ``$latest_image`` and ``$latest_video`` tokens."""
    out = {}
    for key, value in args.items():
        if isinstance(value, str) and value.startswith("$"):
            token = value[1:]
            if token == "task":
                value = ws.enriched_spec or ws.instruction
            elif token.startswith("latest"):
                kind = token.partition("_")[2] or None
                rec = ws.latest(kind)
                value = rec.path if rec else ""
        out[key] = value
    return out


def _resolved(proposal: PlannerProposal, ws: WorkspaceSnapshot) -> PlannerProposal:
    if proposal.terminate:
        return proposal
    calls = tuple(
        SwiCall(c.workflow_name, resolve_arguments(c.arguments, ws), dict(c.constraints)) for c in proposal.chain
    )
    return PlannerProposal(calls, False, proposal.rationale)


class ScriptedPlanner:
    """Returns the scripted proposals in order; the last one repeats once the script runs out."""

    def __init__(self, script: Sequence[PlannerProposal]):
        if not script:
            raise ValueError("empty planner script")
        self.script = list(script)
        self.calls = 0

    def propose(self, workspace, library_context, feedback_history):
        proposal = self.script[min(self.calls, len(self.script) - 1)]
        self.calls += 1
        return _resolved(proposal, workspace)


class CyclingPlanner:
    """Picks ``candidates[len(feedback_history) % n]``: each failure moves to the next candidate."""

    def __init__(self, candidates: Sequence[PlannerProposal]):
        if not candidates:
            raise ValueError("no candidates")
        self.candidates = list(candidates)

    def propose(self, workspace, library_context, feedback_history):
        return _resolved(self.candidates[len(feedback_history) % len(self.candidates)], workspace)


class FixedPlanner:
    def __init__(self, proposal: PlannerProposal):
        self.proposal = proposal

    def propose(self, workspace, library_context, feedback_history):
        return _resolved(self.proposal, workspace)


class ScriptedEvaluator:
    def __init__(self, verdicts: Sequence[EvalVerdict]):
        if not verdicts:
            raise ValueError("empty verdict script")
        self.verdicts = list(verdicts)
        self.calls = 0

    def evaluate(self, task, artifacts, task_kind, threshold):
        verdict = self.verdicts[min(self.calls, len(self.verdicts) - 1)]
        self.calls += 1
        return verdict


class FingerprintEvaluator:
    """Passes exactly the artifacts whose content hash is in ``pass_set``."""

    def __init__(self, pass_set: set[str]):
        self.pass_set = set(pass_set)

    def evaluate(self, task, artifacts, task_kind, threshold):
        if not artifacts:
            return EvalVerdict(False, "nothing to evaluate: no artifacts were produced")
        rejected = [a for a in artifacts if a.fingerprint not in self.pass_set]
        if rejected:
            names = ", ".join(Path(a.path).name for a in rejected)
            return EvalVerdict(False, f"semantic deviation: {names} does not satisfy the task", {"instruction-adherence": 0.0})
        return EvalVerdict(True, "", {"instruction-adherence": 1.0})


def artifact_quality(record: ArtifactRecord) -> float | None:
    try:
        data = Path(record.path).read_bytes()
    except OSError:
        return None
    payload = decode_payload(data)
    if payload is None or "quality" not in payload:
        return None
    return float(payload["quality"])


class QualityEvaluator:
    """Judges simulated artifacts by the quality scalar their payload carries.

    A result passes when its worst artifact reaches the cutoff of the requested
    threshold. Cutoffs are ordered strict > normal > lenient, so pass sets nest.
    """

    def __init__(self, cutoffs: Mapping[Threshold, float] | None = None, reject_kinds: Sequence[str] = ()):
        self.cutoffs = {Threshold(k): float(v) for k, v in (cutoffs or CUTOFFS).items()}
        order = [self.cutoffs[t] for t in (Threshold.STRICT, Threshold.NORMAL, Threshold.LENIENT)]
        if order != sorted(order, reverse=True):
            raise ValueError("cutoffs must satisfy strict >= normal >= lenient")
        self.reject_kinds = set(reject_kinds)

    def evaluate(self, task, artifacts, task_kind, threshold):
        if not artifacts:
            return EvalVerdict(False, "nothing to evaluate: no artifacts were produced")
        scores = []
        for rec in artifacts:
            q = artifact_quality(rec)
            if q is None:
                return EvalVerdict(False, f"cannot assess {Path(rec.path).name}: unreadable artifact")
            scores.append(q)
        q = min(scores)
        cutoff = self.cutoffs[Threshold(threshold)]
        dims = {"generation-quality": q, "instruction-adherence": q}
        if q >= cutoff:
            return EvalVerdict(True, "", dims)
        return EvalVerdict(
            False,
            f"insufficient generation quality for {task_kind}: scored {q:.2f}, "
            f"{Threshold(threshold).value} threshold needs {cutoff:.2f} (lack of detail)",
            dims,
        )


class DigestAnnotator:
    """Summarises an artifact by the sha256 of its bytes."""

    def annotate(self, artifact: str) -> Annotation:
        try:
            data = Path(artifact).read_bytes()
        except OSError as exc:
            raise AdapterFailure(f"cannot annotate {artifact}: {exc}") from None
        digest = fingerprint_bytes(data)
        kind = artifact_kind(artifact)
        payload = decode_payload(data)
        details = ""
        traits: tuple[str, ...] = (kind,)
        if payload:
            details = f"made by {payload.get('workflow')} with quality {payload.get('quality')}"
            traits = (kind, str(payload.get("workflow")))
        return Annotation(str(artifact), f"{kind} sha256:{digest}", details, traits)


class IdentityPreprocessor:
    def expand(self, instruction: str) -> str:
        return instruction


class AppendingPreprocessor:
    def __init__(self, suffix: str):
        self.suffix = suffix

    def expand(self, instruction: str) -> str:
        return f"{instruction}\n{self.suffix}"


class FailingPreprocessor:
    def expand(self, instruction: str) -> str:
        raise AdapterFailure("preprocessor unavailable")
