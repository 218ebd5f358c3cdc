"""Contracts for the four model-backed roles and the values they exchange."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Mapping, Protocol, Sequence

from ..swi import SwiCall
from ..workspace import Annotation, ArtifactRecord, WorkspaceSnapshot


class AdapterFailure(RuntimeError):
    """An adapter could not produce a usable answer. ``raw`` keeps the model output, if any."""

    def __init__(self, message: str, raw: str = ""):
        self.raw = raw
        super().__init__(message)


class Threshold(str, Enum):
    STRICT = "strict"
    NORMAL = "normal"
    LENIENT = "lenient"


# quality cutoffs used by the built-in evaluators; stricter -> higher bar
CUTOFFS = {Threshold.STRICT: 0.8, Threshold.NORMAL: 0.6, Threshold.LENIENT: 0.4}


@dataclass(frozen=True)
class PlannerProposal:
    chain: tuple[SwiCall, ...] = ()
    terminate: bool = False
    rationale: str = ""

    def __post_init__(self) -> None:
        if self.terminate == bool(self.chain):
            raise ValueError("a proposal is either a non-empty chain or a termination signal")

    @classmethod
    def of(cls, *calls: SwiCall, rationale: str = "") -> PlannerProposal:
        return cls(tuple(calls), False, rationale)

    @classmethod
    def stop(cls, rationale: str = "") -> PlannerProposal:
        return cls((), True, rationale)

    @property
    def head(self) -> SwiCall:
        return self.chain[0]

    def to_json(self) -> dict[str, Any]:
        if self.terminate:
            return {"terminate": True, "rationale": self.rationale}
        return {"chain": [c.to_json() for c in self.chain], "rationale": self.rationale}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> PlannerProposal:
        rationale = str(obj.get("rationale", ""))
        if obj.get("terminate"):
            return cls.stop(rationale)
        if "chain" in obj:
            chain = obj["chain"]
            if not isinstance(chain, list) or not chain:
                raise ValueError("chain must be a non-empty list")
            return cls(tuple(SwiCall.from_json(c) for c in chain), False, rationale)
        return cls((SwiCall.from_json(obj),), False, rationale)


@dataclass(frozen=True)
class EvalVerdict:
    passed: bool
    failure_analysis: str = ""
    dimensions: Mapping[str, float] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if not self.passed and not self.failure_analysis:
            raise ValueError("a failing verdict needs a failure analysis")
        for name, score in self.dimensions.items():
            if not 0.0 <= score <= 1.0:
                raise ValueError(f"dimension {name} score {score} outside [0, 1]")

    def to_json(self) -> dict[str, Any]:
        return {"pass": self.passed, "failure_analysis": self.failure_analysis, "dimensions": dict(self.dimensions)}

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> EvalVerdict:
        passed = obj.get("pass", obj.get("passed"))
        if not isinstance(passed, bool):
            raise ValueError(f"verdict without a boolean 'pass': {obj!r}")
        dims = {k: float(v) for k, v in (obj.get("dimensions") or {}).items()}
        return cls(passed, str(obj.get("failure_analysis") or ""), dims)


class Planner(Protocol):
    def propose(
        self,
        workspace: WorkspaceSnapshot,
        library_context: str,
        feedback_history: Sequence[str],
    ) -> PlannerProposal: ...


class Evaluator(Protocol):
    def evaluate(
        self,
        task: str,
        artifacts: Sequence[ArtifactRecord],
        task_kind: str,
        threshold: Threshold,
    ) -> EvalVerdict: ...


class Annotator(Protocol):
    def annotate(self, artifact: str) -> Annotation: ...


class Preprocessor(Protocol):
    def expand(self, instruction: str) -> str: ...


@dataclass
class AgentBundle:
    planner: Planner
    annotator: Annotator
    evaluator: Evaluator
    preprocessor: Preprocessor

    def __post_init__(self) -> None:
        for role in ("planner", "annotator", "evaluator", "preprocessor"):
            if getattr(self, role) is None:
                raise ValueError(f"agent bundle is missing a {role}")
