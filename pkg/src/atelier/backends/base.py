"""Types shared by every execution backend."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol

from ..graph import WorkflowGraph, validate_dag

DEFAULT_TIMEOUT = 600.0

# class_type -> file extension for nodes that write results to disk
OUTPUT_NODES = {
    "SaveImage": "png",
    "PreviewImage": "png",
    "SaveAnimatedWEBP": "webp",
    "SaveAnimatedPNG": "png",
    "SaveVideo": "mp4",
    "VHS_VideoCombine": "mp4",
}


class BackendUnreachable(RuntimeError):
    """The execution server could not be contacted at all."""


@dataclass(frozen=True)
class JobHandle:
    job_id: str
    submitted_at: float = field(default_factory=time.time)
    client_id: str = ""


@dataclass(frozen=True)
class ProgressEvent:
    type: str
    node: str | None = None
    data: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class ExecutionOutcome:
    status: str  # completed | failed | timed-out
    artifacts: tuple[tuple[str, str], ...] = ()  # (node_id, output_path)
    diagnostics: str = ""
    duration: float = 0.0
    fault: str | None = None  # machine-readable failure class

    def __post_init__(self) -> None:
        if self.status not in ("completed", "failed", "timed-out"):
            raise ValueError(f"unknown outcome status {self.status!r}")
        if self.status != "completed" and not self.diagnostics:
            raise ValueError("a failed outcome needs diagnostics")

    @property
    def ok(self) -> bool:
        return self.status == "completed"

    def to_json(self) -> dict[str, Any]:
        return {
            "status": self.status,
            "artifacts": [list(a) for a in self.artifacts],
            "diagnostics": self.diagnostics,
            "duration": self.duration,
            "fault": self.fault,
        }


class Backend(Protocol):
    def execute(
        self,
        graph: WorkflowGraph,
        timeout: float = DEFAULT_TIMEOUT,
        output_dir: str | Path | None = None,
    ) -> ExecutionOutcome: ...


def output_nodes(graph: WorkflowGraph) -> list[str]:
    return [nid for nid, node in graph.nodes.items() if node.class_type in OUTPUT_NODES]


def require_concrete(graph: WorkflowGraph) -> None:
    report = validate_dag(graph, require_concrete=True)
    assert report.ok, "backend handed a non-concrete graph: " + "; ".join(f.line() for f in report.findings)
