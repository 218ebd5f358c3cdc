"""Per-run task state handed from one planning node to the next."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Iterable

log = logging.getLogger(__name__)

CONTEXT_ENTRY_LIMIT = 2000

IMAGE_EXTS = {".png", ".jpg", ".jpeg", ".webp", ".bmp", ".gif"}
VIDEO_EXTS = {".mp4", ".webm", ".mov", ".mkv", ".avi"}


def fingerprint_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def fingerprint_file(path: str | Path) -> str:
    return fingerprint_bytes(Path(path).read_bytes())


def artifact_kind(path: str | Path) -> str:
    ext = Path(path).suffix.lower()
    if ext in IMAGE_EXTS:
        return "image"
    if ext in VIDEO_EXTS:
        return "video"
    return "other"


@dataclass(frozen=True)
class Annotation:
    artifact_ref: str
    summary: str
    details: str = ""
    scene_traits: tuple[str, ...] = ()


@dataclass(frozen=True)
class ArtifactRecord:
    path: str
    kind: str
    origin: tuple[int | None, str]  # (plan node id, workflow name)
    fingerprint: str
    annotation: Annotation | None = None

    def to_json(self) -> dict[str, Any]:
        out = asdict(self)
        out["origin"] = list(self.origin)
        return out


def _truncate(text: str, limit: int = CONTEXT_ENTRY_LIMIT) -> str:
    return text if len(text) <= limit else text[:limit]


@dataclass(frozen=True)
class WorkspaceSnapshot:
    instruction: str
    enriched_spec: str
    artifacts: tuple[ArtifactRecord, ...]
    context_log: tuple[str, ...]
    parent: WorkspaceSnapshot | None = None

    @property
    def artifact_paths(self) -> list[str]:
        return [a.path for a in self.artifacts]

    def latest(self, kind: str | None = None) -> ArtifactRecord | None:
        for rec in reversed(self.artifacts):
            if kind is None or rec.kind == kind:
                return rec
        return None

    def to_json(self) -> dict[str, Any]:
        return {
            "instruction": self.instruction,
            "enriched_spec": self.enriched_spec,
            "artifacts": [a.to_json() for a in self.artifacts],
            "context_log": list(self.context_log),
        }


@dataclass
class Workspace:
    instruction: str
    enriched_spec: str = ""
    artifacts: dict[str, ArtifactRecord] = field(default_factory=dict)
    context_log: list[str] = field(default_factory=list)
    parent_snapshot: WorkspaceSnapshot | None = None

    @classmethod
    def extending(cls, snap: WorkspaceSnapshot) -> Workspace:
        """A fresh mutable workspace that starts from ``snap`` without touching it."""
        return cls(
            snap.instruction,
            snap.enriched_spec,
            {a.path: a for a in snap.artifacts},
            list(snap.context_log),
            parent_snapshot=snap,
        )

    def snapshot(self) -> WorkspaceSnapshot:
        return WorkspaceSnapshot(
            self.instruction,
            self.enriched_spec,
            tuple(self.artifacts.values()),
            tuple(self.context_log),
            self.parent_snapshot,
        )

    def note(self, text: str) -> None:
        self.context_log.append(_truncate(text))

    def add_artifact(self, record: ArtifactRecord) -> None:
        if record.path in self.artifacts:
            log.warning("artifact %s registered twice; replacing the earlier record", record.path)
            del self.artifacts[record.path]
        self.artifacts[record.path] = record

    def add_inputs(self, paths: Iterable[str | Path]) -> None:
        for p in paths:
            p = Path(p)
            fp = fingerprint_file(p) if p.is_file() else ""
            self.add_artifact(ArtifactRecord(str(p), artifact_kind(p), (None, "input"), fp))
            self.note(f"input {artifact_kind(p)}: {p}")

    def ingest_outcome(
        self,
        outcome: Any,
        annotations: dict[str, Annotation] | None = None,
        origin: tuple[int | None, str] = (None, ""),
        rel_to: Path | None = None,
    ) -> Workspace:
        """Register every artifact of a completed outcome and log one context line each."""
        if outcome.status != "completed":
            raise ValueError(f"cannot ingest a {outcome.status} outcome")
        annotations = annotations or {}
        if not outcome.artifacts:
            self.note(f"{origin[1]} completed without visual output. {outcome.diagnostics}".strip())
            return self
        for _node_id, path in outcome.artifacts:
            path = str(path)
            ann = annotations.get(path)
            record = ArtifactRecord(path, artifact_kind(path), origin, fingerprint_file(path), ann)
            self.add_artifact(record)
            shown = Path(path).relative_to(rel_to) if rel_to else path
            summary = ann.summary if ann else "(no annotation)"
            self.note(f"{origin[1]} produced {record.kind} {shown}: {summary}")
        return self

    def dump(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.snapshot().to_json(), indent=2), encoding="utf-8")


def snapshot(ws: Workspace) -> WorkspaceSnapshot:
    return ws.snapshot()


def ingest_outcome(ws: Workspace, outcome: Any, annotations: dict[str, Annotation] | None = None,
                   origin: tuple[int | None, str] = (None, "")) -> Workspace:
    return ws.ingest_outcome(outcome, annotations, origin)


__all__ = [
    "Annotation",
    "ArtifactRecord",
    "Workspace",
    "WorkspaceSnapshot",
    "artifact_kind",
    "fingerprint_bytes",
    "fingerprint_file",
    "ingest_outcome",
    "snapshot",
]
