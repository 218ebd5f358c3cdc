"""Seeded stand-in for a ComfyUI server.

No node semantics run. Each job draws success and a quality scalar from the
profile of the workflow that produced the graph, and writes small synthetic
artifacts that carry those draws in their payload.
"""

from __future__ import annotations

import json
import logging
import random
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from ..graph import WorkflowGraph, topological_order
from .base import DEFAULT_TIMEOUT, OUTPUT_NODES, ExecutionOutcome, require_concrete

log = logging.getLogger(__name__)

MAGIC = b"ATELIER-SIM\n"

FAULTS = (
    "CUDA out of memory",
    "sampler produced NaN latents",
    "model weights failed to load",
    "custom node raised an exception",
)


@dataclass(frozen=True)
class WorkflowProfile:
    success_prob: float = 1.0
    quality_mean: float = 0.8
    quality_std: float = 0.05
    latency_ms: tuple[float, float] = (200.0, 800.0)

    def __post_init__(self) -> None:
        if not 0.0 <= self.success_prob <= 1.0:
            raise ValueError(f"success_prob {self.success_prob} outside [0, 1]")
        if self.quality_std < 0:
            raise ValueError("quality_std must be non-negative")
        lo, hi = self.latency_ms
        if lo < 0 or hi < lo:
            raise ValueError(f"bad latency range {self.latency_ms}")

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> WorkflowProfile:
        quality = obj.get("quality", {})
        return cls(
            success_prob=float(obj.get("success_prob", 1.0)),
            quality_mean=float(quality.get("mean", obj.get("quality_mean", 0.8))),
            quality_std=float(quality.get("std", obj.get("quality_std", 0.05))),
            latency_ms=tuple(obj.get("latency_ms", (200.0, 800.0))),
        )


@dataclass(frozen=True)
class SimProfile:
    workflows: Mapping[str, WorkflowProfile] = field(default_factory=dict)
    default: WorkflowProfile = WorkflowProfile()
    seed: int = 0

    def for_workflow(self, name: str) -> WorkflowProfile:
        if name in self.workflows:
            return self.workflows[name]
        log.warning("no simulation profile for workflow %r; using the default", name)
        return self.default

    @classmethod
    def uniform(cls, success_prob: float, quality_mean: float = 0.8, seed: int = 0, **kw: Any) -> SimProfile:
        return cls(default=WorkflowProfile(success_prob, quality_mean, **kw), seed=seed)

    @classmethod
    def from_json(cls, obj: Mapping[str, Any]) -> SimProfile:
        return cls(
            workflows={k: WorkflowProfile.from_json(v) for k, v in obj.get("workflows", {}).items()},
            default=WorkflowProfile.from_json(obj.get("default", {})),
            seed=int(obj.get("seed", 0)),
        )


def _rng(profile: SimProfile, draw: int, workflow: str) -> random.Random:
    # str seeds hash through sha512, so streams are stable across processes
    return random.Random(f"{profile.seed}:{draw}:{workflow}")


def encode_payload(meta: Mapping[str, Any]) -> bytes:
    return MAGIC + json.dumps(dict(meta), sort_keys=True).encode("utf-8") + b"\n"


def read_payload(path: str | Path) -> dict[str, Any] | None:
    """Decode a simulated artifact; None for anything the simulator did not write."""
    try:
        data = Path(path).read_bytes()
    except OSError:
        return None
    return decode_payload(data)


def decode_payload(data: bytes) -> dict[str, Any] | None:
    if not data.startswith(MAGIC):
        return None
    try:
        return json.loads(data[len(MAGIC):])
    except json.JSONDecodeError:
        return None


def simulate(
    graph: WorkflowGraph,
    profile: SimProfile,
    draw: int = 0,
    output_dir: str | Path | None = None,
) -> ExecutionOutcome:
    """Fabricate the outcome of running ``graph``; a pure function of its arguments."""
    require_concrete(graph)
    workflow = str(graph.metadata.get("workflow", "unknown"))
    prof = profile.for_workflow(workflow)
    rng = _rng(profile, draw, workflow)
    order = topological_order(graph)
    succeeded = rng.random() < prof.success_prob
    quality = min(1.0, max(0.0, rng.gauss(prof.quality_mean, prof.quality_std)))
    latency = rng.uniform(*prof.latency_ms) / 1000.0
    if not succeeded:
        failing = order[rng.randrange(len(order))]
        fault = FAULTS[rng.randrange(len(FAULTS))]
        node = graph.nodes[failing]
        return ExecutionOutcome(
            "failed",
            diagnostics=f"simulated fault in node {failing} ({node.class_type}) of {workflow}: {fault}",
            duration=latency,
            fault="simulated-fault",
        )

    outputs = [nid for nid in order if graph.nodes[nid].class_type in OUTPUT_NODES]
    if outputs and output_dir is None:
        output_dir = tempfile.mkdtemp(prefix="atelier-sim-")
    artifacts = []
    for nid in outputs:
        ext = OUTPUT_NODES[graph.nodes[nid].class_type]
        path = Path(output_dir) / f"{nid}_{draw}.{ext}"
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(
            encode_payload(
                {"workflow": workflow, "seed": profile.seed, "draw": draw, "node": nid, "quality": round(quality, 6)}
            )
        )
        artifacts.append((nid, str(path)))
    diagnostics = "" if artifacts else f"{workflow} finished; no output nodes"
    return ExecutionOutcome("completed", tuple(artifacts), diagnostics, latency)


class SimulatedBackend:
    """Backend facade over :func:`simulate` with a per-instance draw counter."""

    def __init__(self, profile: SimProfile, output_dir: str | Path | None = None, realtime: bool = False):
        self.profile = profile
        self.output_dir = output_dir
        self.realtime = realtime
        self.jobs = 0
        self.submitted: list[WorkflowGraph] = []
        self._lock = threading.Lock()

    def execute(
        self,
        graph: WorkflowGraph,
        timeout: float = DEFAULT_TIMEOUT,
        output_dir: str | Path | None = None,
    ) -> ExecutionOutcome:
        with self._lock:
            draw = self.jobs
            self.jobs += 1
            self.submitted.append(graph)
        outcome = simulate(graph, self.profile, draw, output_dir or self.output_dir)
        if outcome.duration > timeout:
            return ExecutionOutcome(
                "timed-out", diagnostics=f"job exceeded {timeout:.0f}s timeout", duration=timeout, fault="timeout"
            )
        if self.realtime:
            time.sleep(outcome.duration)
        return outcome
