from .base import (
    CUTOFFS,
    AdapterFailure,
    AgentBundle,
    Annotator,
    EvalVerdict,
    Evaluator,
    Planner,
    PlannerProposal,
    Preprocessor,
    Threshold,
)
from .mock import (
    AppendingPreprocessor,
    CyclingPlanner,
    DigestAnnotator,
    FailingPreprocessor,
    FingerprintEvaluator,
    FixedPlanner,
    IdentityPreprocessor,
    QualityEvaluator,
    ScriptedEvaluator,
    ScriptedPlanner,
)


def mock_bundle(planner: Planner, evaluator: Evaluator | None = None,
                preprocessor: Preprocessor | None = None) -> AgentBundle:
    """A bundle with digest annotation and, by default, quality-based evaluation."""
    return AgentBundle(
        planner,
        DigestAnnotator(),
        evaluator or QualityEvaluator(),
        preprocessor or IdentityPreprocessor(),
    )
