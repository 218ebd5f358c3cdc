"""Build a mock AgentBundle from a YAML scenario file.

```yaml
planner:
  script:                      # or `cycle:` for a CyclingPlanner
    - chain:
        - workflow: t2i_sd15
          arguments: {prompt: $task}
    - terminate: true
evaluator:
  verdicts: [{pass: true}]     # or `quality: {strict: 0.8, normal: 0.6, lenient: 0.4}`
                               # or `pass_fingerprints: [<sha256>, ...]`
preprocessor:
  append: "extra constraints"  # omit for the identity preprocessor
```
"""

from __future__ import annotations

from pathlib import Path
from typing import Any, Mapping

import yaml

from .base import AgentBundle, EvalVerdict, PlannerProposal
from .mock import (
    AppendingPreprocessor,
    CyclingPlanner,
    DigestAnnotator,
    FingerprintEvaluator,
    IdentityPreprocessor,
    QualityEvaluator,
    ScriptedEvaluator,
    ScriptedPlanner,
)


class ScenarioError(ValueError):
    pass


def _proposals(items: Any) -> list[PlannerProposal]:
    if not isinstance(items, list) or not items:
        raise ScenarioError("planner script must be a non-empty list")
    try:
        return [PlannerProposal.from_json(p) for p in items]
    except (ValueError, TypeError, AttributeError) as exc:
        raise ScenarioError(f"bad planner proposal: {exc}") from None


def bundle_from_scenario(data: Mapping[str, Any]) -> AgentBundle:
    planner_cfg = data.get("planner") or {}
    if "script" in planner_cfg:
        planner = ScriptedPlanner(_proposals(planner_cfg["script"]))
    elif "cycle" in planner_cfg:
        planner = CyclingPlanner(_proposals(planner_cfg["cycle"]))
    else:
        raise ScenarioError("scenario needs planner.script or planner.cycle")

    ev_cfg = data.get("evaluator") or {"verdicts": [{"pass": True}]}
    if "verdicts" in ev_cfg:
        try:
            evaluator = ScriptedEvaluator([EvalVerdict.from_json(v) for v in ev_cfg["verdicts"]])
        except (ValueError, TypeError) as exc:
            raise ScenarioError(f"bad verdict: {exc}") from None
    elif "quality" in ev_cfg:
        evaluator = QualityEvaluator(ev_cfg["quality"] or None)
    elif "pass_fingerprints" in ev_cfg:
        evaluator = FingerprintEvaluator(set(ev_cfg["pass_fingerprints"]))
    else:
        raise ScenarioError("evaluator needs verdicts, quality or pass_fingerprints")

    pre_cfg = data.get("preprocessor") or {}
    preprocessor = AppendingPreprocessor(pre_cfg["append"]) if "append" in pre_cfg else IdentityPreprocessor()
    return AgentBundle(planner, DigestAnnotator(), evaluator, preprocessor)


def load_scenario_bundle(path: str | Path) -> AgentBundle:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    if not isinstance(data, dict):
        raise ScenarioError(f"scenario {path} must be a mapping")
    return bundle_from_scenario(data)
