"""Desk-scale ablation: full planner vs. no-tree and no-feedback variants on the simulator.

Synthetic tasks are chains of atomic workflows (text-to-image, then image
edits, then image-to-video). Each step's failure mass ``1 - success`` is split
between execution faults (the simulator's success draw) and planner
confusion (the suite planner picks a distractor workflow whose output the
evaluator rejects). Only the planning control points differ between policies.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import tempfile
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

from .agents import mock_bundle
from .agents.base import PlannerProposal
from .agents.mock import resolve_arguments
from .backends.simulator import SimProfile, SimulatedBackend, WorkflowProfile
from .graph import validate_dag
from .planning import PlanConfig, Policy, TaskRunner
from .swi import Library, ParamKind, SwiCall, TaskKind, fixture_library

GOOD_QUALITY = (0.85, 0.05)
BAD_QUALITY = (0.25, 0.05)

# which kinds may follow which when composing a synthetic task
_STAGES = {
    "first": (TaskKind.TEXT_TO_IMAGE,),
    "middle": (TaskKind.IMAGE_TO_IMAGE,),
    "last": (TaskKind.IMAGE_TO_VIDEO,),
}


@dataclass(frozen=True)
class TaskStep:
    workflow: str
    success: float
    distractors: tuple[str, ...] = ()

    def to_json(self) -> dict[str, Any]:
        return {"workflow": self.workflow, "success": self.success, "distractors": list(self.distractors)}


@dataclass(frozen=True)
class SyntheticTask:
    steps: tuple[TaskStep, ...]
    instruction: str = "synthetic task"

    def to_json(self) -> dict[str, Any]:
        return {"instruction": self.instruction, "steps": [s.to_json() for s in self.steps]}


def _input_kind(library: Library, name: str) -> str:
    kinds = {p.kind for p in library[name].descriptor.required_params if p.required}
    if ParamKind.VIDEO_PATH in kinds:
        return "video"
    if ParamKind.IMAGE_PATH in kinds:
        return "image"
    return "text"


def _produces_artifact(library: Library, name: str) -> bool:
    return library[name].descriptor.task_kind is not TaskKind.AUXILIARY


@dataclass
class SyntheticTaskSuite:
    tasks: list[SyntheticTask]
    seed: int = 0
    semantic_share: float = 0.5

    def __post_init__(self) -> None:
        if not self.tasks:
            raise ValueError("a suite needs at least one task")
        if not 0.0 <= self.semantic_share <= 1.0:
            raise ValueError("semantic_share must lie in [0, 1]")

    @classmethod
    def generate(
        cls,
        library: Library | None = None,
        n_tasks: int = 20,
        steps: int = 3,
        success: float = 0.7,
        distractors: int = 2,
        seed: int = 0,
        semantic_share: float = 0.5,
    ) -> SyntheticTaskSuite:
        library = library or fixture_library()
        if steps < 1:
            raise ValueError("tasks need at least one step")
        rng = random.Random(f"suite:{seed}")
        by_kind: dict[TaskKind, list[str]] = {}
        for d in library.descriptors():
            by_kind.setdefault(d.task_kind, []).append(d.name)
        tasks = []
        for t in range(n_tasks):
            if steps == 1:
                stage_kinds = [_STAGES["first"]]
            else:
                stage_kinds = [_STAGES["first"]] + [_STAGES["middle"]] * (steps - 2) + [_STAGES["last"]]
            required: list[str] = []
            for kinds in stage_kinds:
                pool = [n for k in kinds for n in by_kind.get(k, []) if n not in required]
                if not pool:
                    raise ValueError(f"library has no unused workflow of kind {kinds}")
                required.append(rng.choice(sorted(pool)))
            task_steps = []
            for name in required:
                modality = _input_kind(library, name)
                pool = sorted(
                    n for n in library
                    if n not in required and _produces_artifact(library, n) and _input_kind(library, n) == modality
                )
                task_steps.append(TaskStep(name, success, tuple(rng.sample(pool, min(distractors, len(pool))))))
            tasks.append(SyntheticTask(tuple(task_steps), f"synthetic task {t}: {' then '.join(required)}"))
        return cls(tasks, seed, semantic_share)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any], library: Library | None = None) -> SyntheticTaskSuite:
        if "tasks" in obj and isinstance(obj["tasks"], list):
            tasks = [
                SyntheticTask(
                    tuple(TaskStep(s["workflow"], float(s.get("success", 0.7)), tuple(s.get("distractors", ())))
                          for s in t["steps"]),
                    t.get("instruction", f"synthetic task {i}"),
                )
                for i, t in enumerate(obj["tasks"])
            ]
            suite = cls(tasks, int(obj.get("seed", 0)), float(obj.get("semantic_share", 0.5)))
            suite.check(library or fixture_library())
            return suite
        return cls.generate(
            library,
            n_tasks=int(obj.get("tasks", 20)),
            steps=int(obj.get("steps", 3)),
            success=float(obj.get("success", 0.7)),
            distractors=int(obj.get("distractors", 2)),
            seed=int(obj.get("seed", 0)),
            semantic_share=float(obj.get("semantic_share", 0.5)),
        )

    def check(self, library: Library) -> None:
        for task in self.tasks:
            for step in task.steps:
                for name in (step.workflow, *step.distractors):
                    if name not in library:
                        raise ValueError(f"suite references unknown workflow {name!r}")
                if not 0.0 <= step.success <= 1.0:
                    raise ValueError(f"step success {step.success} outside [0, 1]")

    def split(self, success: float) -> tuple[float, float]:
        """(execution success probability, planner confusion probability) for a step."""
        p_exec = 1.0 - (1.0 - success) * (1.0 - self.semantic_share)
        confusion = max(0.0, 1.0 - success / p_exec) if p_exec > 0 else 0.0
        return p_exec, confusion

    def profile(self, task: SyntheticTask, seed: int) -> SimProfile:
        workflows: dict[str, WorkflowProfile] = {}
        for step in task.steps:
            p_exec, _ = self.split(step.success)
            workflows[step.workflow] = WorkflowProfile(p_exec, *GOOD_QUALITY)
            for d in step.distractors:
                workflows.setdefault(d, WorkflowProfile(p_exec, *BAD_QUALITY))
        return SimProfile(workflows, WorkflowProfile(1.0, *BAD_QUALITY), seed)

    def to_json(self) -> dict[str, Any]:
        return {"seed": self.seed, "semantic_share": self.semantic_share, "tasks": [t.to_json() for t in self.tasks]}


class SuitePlanner:
    """Planner mock that knows the task's intended workflow sequence but sometimes confuses a step.

    The choice is a pure function of (seed, visible workspace, visible feedback):
    asked twice with the same context it answers the same way. Failure
    analyses naming a rejected distractor rule that distractor out.
    """

    def __init__(self, task: SyntheticTask, library: Library, suite: SyntheticTaskSuite, seed: int):
        self.task = task
        self.library = library
        self.suite = suite
        self.seed = seed

    def _args(self, name: str) -> dict[str, str]:
        tokens = {ParamKind.PROMPT_TEXT: "$task", ParamKind.IMAGE_PATH: "$latest_image",
                  ParamKind.VIDEO_PATH: "$latest_video", ParamKind.NUMBER: 1}
        return {p.key: tokens[p.kind] for p in self.library[name].descriptor.required_params if p.required}

    def propose(self, workspace, library_context, feedback_history):
        done = len({a.origin for a in workspace.artifacts if a.origin[1] != "input"})
        if done >= len(self.task.steps):
            return PlannerProposal.stop("all steps produced")
        step = self.task.steps[done]
        digest = hashlib.sha256(
            "\x1f".join([str(self.seed), *(a.fingerprint for a in workspace.artifacts), *feedback_history]).encode()
        ).hexdigest()
        rng = random.Random(digest)
        rejected = {d for d in step.distractors if any(f.startswith(f"{d} result rejected") for f in feedback_history)}
        open_distractors = [d for d in step.distractors if d not in rejected]
        _, confusion = self.suite.split(step.success)
        head = step.workflow
        if open_distractors and rng.random() < confusion:
            head = rng.choice(open_distractors)
        names = [head] + [s.workflow for s in self.task.steps[done + 1:]]
        calls = [SwiCall(n, resolve_arguments(self._args(n), workspace)) for n in names]
        return PlannerProposal(tuple(calls), False, f"step {done + 1} of {len(self.task.steps)}")


@dataclass
class PolicyStats:
    runs: int = 0
    resolved: int = 0
    clean: int = 0  # runs with zero structural failures
    expansions: int = 0

    @property
    def resolve_rate(self) -> float:
        return self.resolved / self.runs if self.runs else 0.0

    @property
    def pass_rate(self) -> float:
        return self.clean / self.runs if self.runs else 0.0

    @property
    def mean_expansions(self) -> float:
        return self.expansions / self.runs if self.runs else 0.0

    def to_json(self) -> dict[str, Any]:
        lo, hi = wilson_interval(self.resolved, self.runs)
        return {
            "resolve_rate": round(self.resolve_rate, 6),
            "pass_rate": round(self.pass_rate, 6),
            "mean_expansions": round(self.mean_expansions, 6),
            "ci95": [round(lo, 6), round(hi, 6)],
        }


def wilson_interval(successes: int, n: int, z: float = 1.959963984540054) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    p = successes / n
    denom = 1 + z * z / n
    centre = (p + z * z / (2 * n)) / denom
    half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / denom
    return (max(0.0, centre - half), min(1.0, centre + half))


def two_proportion_test(x1: int, n1: int, x2: int, n2: int) -> tuple[float, float]:
    """Pooled z statistic and one-sided p-value for H1: p1 > p2."""
    pooled = (x1 + x2) / (n1 + n2)
    se = math.sqrt(pooled * (1 - pooled) * (1 / n1 + 1 / n2))
    if se == 0:
        return 0.0, 1.0 if x1 / n1 <= x2 / n2 else 0.0
    z = (x1 / n1 - x2 / n2) / se
    return z, 0.5 * math.erfc(z / math.sqrt(2))


@dataclass
class AblationReport:
    stats: dict[str, PolicyStats]
    seed: int
    repetitions: int
    elapsed: float = 0.0
    traces: dict[str, list[list[str]]] = field(default_factory=dict, repr=False)

    def to_json(self) -> dict[str, Any]:
        return {name: s.to_json() for name, s in self.stats.items()}

    def compare(self, better: str = "full", worse: str = "no-tree") -> tuple[float, float]:
        a, b = self.stats[better], self.stats[worse]
        return two_proportion_test(a.resolved, a.runs, b.resolved, b.runs)

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True)


def _rep_seed(seed: int, rep: int) -> int:
    return int.from_bytes(hashlib.sha256(f"{seed}:{rep}".encode()).digest()[:8], "big")


def run_ablation(
    suite: SyntheticTaskSuite,
    policies: Sequence[Policy | str] = (Policy.FULL, Policy.NO_TREE, Policy.NO_FEEDBACK),
    repetitions: int = 500,
    seed: int = 7,
    library: Library | None = None,
    config: PlanConfig | None = None,
    keep_traces: bool = False,
) -> AblationReport:
    if repetitions < 100:
        raise ValueError("an ablation needs at least 100 repetitions")
    library = library or fixture_library()
    suite.check(library)
    config = config or PlanConfig(evaluate_intermediate=True)
    started = time.monotonic()
    stats = {Policy(p).value: PolicyStats() for p in policies}
    traces: dict[str, list[list[str]]] = {name: [] for name in stats}
    with tempfile.TemporaryDirectory(prefix="atelier-ablate-") as tmp:
        for name in stats:
            policy = Policy(name)
            for rep in range(repetitions):
                task = suite.tasks[rep % len(suite.tasks)]
                rep_seed = _rep_seed(seed, rep)
                out = Path(tmp) / name / str(rep)
                backend = SimulatedBackend(suite.profile(task, rep_seed), out)
                planner = SuitePlanner(task, library, suite, rep_seed)
                runner = TaskRunner(library, mock_bundle(planner), backend, config, policy=policy)
                result = runner.run(task.instruction)
                structural = result.structural_failures + sum(
                    not validate_dag(g, require_concrete=True).ok for g in backend.submitted
                )
                s = stats[name]
                s.runs += 1
                s.resolved += result.resolved
                s.clean += structural == 0
                s.expansions += result.expansions
                if keep_traces:
                    traces[name].append(result.trace.canonical())
    return AblationReport(stats, seed, repetitions, time.monotonic() - started, traces)
