"""Adapters backed by a generic chat-completion endpoint.

Contract: ``POST <url>`` with ``{model, messages, temperature}`` returns
``{content}``. Endpoint, key and model come from ``ATELIER_LLM_URL``,
``ATELIER_LLM_KEY`` and ``ATELIER_LLM_MODEL`` unless passed explicitly.
"""

from __future__ import annotations

import json
import logging
import os
import re
import time
from pathlib import Path
from typing import Any, Sequence

import httpx

from ..workspace import Annotation, WorkspaceSnapshot
from .base import AdapterFailure, EvalVerdict, PlannerProposal, Threshold

log = logging.getLogger(__name__)

PROMPT_DIR = Path(__file__).resolve().parent.parent / "prompts"
ROLES = ("preprocess", "planning", "tools-definition", "workspace-update", "adaptation", "evaluation")

FENCE_RE = re.compile(r"```(?:[a-zA-Z]+)?\s*\n(.*?)```", re.DOTALL)


def load_prompts(directory: str | Path | None = None) -> dict[str, str]:
    directory = Path(directory) if directory else PROMPT_DIR
    prompts = {}
    for role in ROLES:
        path = directory / f"{role}.txt"
        if path.is_file():
            prompts[role] = path.read_text(encoding="utf-8")
    return prompts


def extract_json_block(text: str) -> Any:
    """The single JSON object inside a fenced block; anything else is an AdapterFailure."""
    blocks = FENCE_RE.findall(text)
    if len(blocks) != 1:
        raise AdapterFailure(f"expected exactly one fenced block, found {len(blocks)}", raw=text)
    try:
        obj = json.loads(blocks[0])
    except json.JSONDecodeError as exc:
        raise AdapterFailure(f"fenced block is not JSON: {exc}", raw=text) from None
    if not isinstance(obj, dict):
        raise AdapterFailure("fenced block must hold one JSON object", raw=text)
    return obj


class ChatClient:
    def __init__(
        self,
        url: str | None = None,
        key: str | None = None,
        model: str | None = None,
        temperature: float = 0.0,
        retries: int = 2,
        backoff: float = 0.5,
        timeout: float = 120.0,
    ):
        self.url = url or os.environ.get("ATELIER_LLM_URL", "")
        if not self.url:
            raise AdapterFailure("no chat endpoint configured (set ATELIER_LLM_URL)")
        self.key = key if key is not None else os.environ.get("ATELIER_LLM_KEY", "")
        self.model = model or os.environ.get("ATELIER_LLM_MODEL", "default")
        self.temperature = temperature
        self.retries = retries
        self.backoff = backoff
        self._http = httpx.Client(timeout=timeout)

    def complete(self, messages: Sequence[dict[str, str]]) -> str:
        body = {"model": self.model, "messages": list(messages), "temperature": self.temperature}
        headers = {"Authorization": f"Bearer {self.key}"} if self.key else {}
        delay = self.backoff
        last = ""
        for attempt in range(self.retries + 1):
            try:
                resp = self._http.post(self.url, json=body, headers=headers)
                if resp.status_code >= 500:
                    last = f"HTTP {resp.status_code}"
                else:
                    resp.raise_for_status()
                    content = resp.json().get("content")
                    if not isinstance(content, str):
                        raise AdapterFailure("chat reply has no 'content' string", raw=resp.text)
                    return content
            except httpx.TransportError as exc:
                last = str(exc) or type(exc).__name__
            except httpx.HTTPStatusError as exc:
                raise AdapterFailure(f"chat endpoint rejected the request: {exc}") from None
            except ValueError as exc:
                raise AdapterFailure(f"chat reply is not JSON: {exc}") from None
            if attempt < self.retries:
                log.warning("chat request failed (%s); retrying in %.1fs", last, delay)
                time.sleep(delay)
                delay *= 2
        raise AdapterFailure(f"chat endpoint unavailable after {self.retries + 1} attempts: {last}")


def describe_workspace(ws: WorkspaceSnapshot) -> str:
    lines = [f"Instruction: {ws.instruction}"]
    if ws.enriched_spec and ws.enriched_spec != ws.instruction:
        lines.append(f"Task specification: {ws.enriched_spec}")
    if ws.artifacts:
        lines.append("Artifacts:")
        for a in ws.artifacts:
            note = f" - {a.annotation.summary}" if a.annotation else ""
            lines.append(f"  {a.path} ({a.kind}, from {a.origin[1]}){note}")
    if ws.context_log:
        lines.append("Context:")
        lines.extend(f"  {entry}" for entry in ws.context_log)
    return "\n".join(lines)


class _RemoteRole:
    role = ""

    def __init__(self, client: ChatClient, prompts: dict[str, str] | None = None):
        self.client = client
        self.prompts = prompts if prompts is not None else load_prompts()

    def _system(self, *roles: str) -> dict[str, str]:
        return {"role": "system", "content": "\n\n".join(self.prompts.get(r, "") for r in roles).strip()}


class RemotePlanner(_RemoteRole):
    def propose(self, workspace, library_context, feedback_history):
        user = [describe_workspace(workspace), "", library_context]
        if feedback_history:
            user.append("\nFailed attempts at this step:")
            user.extend(f"- {f}" for f in feedback_history)
        reply = self.client.complete([self._system("planning", "tools-definition"),
                                      {"role": "user", "content": "\n".join(user)}])
        obj = extract_json_block(reply)
        try:
            return PlannerProposal.from_json(obj)
        except ValueError as exc:
            raise AdapterFailure(f"unusable proposal: {exc}", raw=reply) from None


class RemoteEvaluator(_RemoteRole):
    def evaluate(self, task, artifacts, task_kind, threshold):
        listing = "\n".join(
            f"- {a.path}: {a.annotation.summary if a.annotation else ''} {a.annotation.details if a.annotation else ''}"
            for a in artifacts
        )
        user = f"Task ({task_kind}, {Threshold(threshold).value} threshold): {task}\nResults:\n{listing}"
        reply = self.client.complete([self._system("evaluation"), {"role": "user", "content": user}])
        try:
            return EvalVerdict.from_json(extract_json_block(reply))
        except ValueError as exc:
            raise AdapterFailure(f"unusable verdict: {exc}", raw=reply) from None


class RemoteAnnotator(_RemoteRole):
    def annotate(self, artifact: str) -> Annotation:
        if not Path(artifact).is_file():
            raise AdapterFailure(f"cannot annotate missing file {artifact}")
        reply = self.client.complete(
            [self._system("workspace-update"), {"role": "user", "content": f"Describe the artifact at {artifact}."}]
        )
        obj = extract_json_block(reply)
        return Annotation(
            str(artifact),
            str(obj.get("summary", "")),
            str(obj.get("details", "")),
            tuple(str(t) for t in obj.get("scene_traits", [])),
        )


class RemotePreprocessor(_RemoteRole):
    def expand(self, instruction: str) -> str:
        reply = self.client.complete([self._system("preprocess"), {"role": "user", "content": instruction}])
        reply = reply.strip()
        return f"{instruction}\n{reply}" if reply else instruction
