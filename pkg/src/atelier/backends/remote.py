"""Client for a ComfyUI server: HTTP job submission, WebSocket progress."""

from __future__ import annotations

import json
import logging
import time
import uuid
from pathlib import Path
from typing import Iterator
from urllib.parse import urlsplit

import httpx
from websockets.exceptions import ConnectionClosed, InvalidHandshake
from websockets.sync.client import ClientConnection, connect

from ..graph import WorkflowGraph, serialize_workflow
from .base import (
    DEFAULT_TIMEOUT,
    BackendUnreachable,
    ExecutionOutcome,
    JobHandle,
    ProgressEvent,
    require_concrete,
)

log = logging.getLogger(__name__)

OUTPUT_KEYS = ("images", "gifs", "videos")


class _Failed(Exception):
    def __init__(self, fault: str, diagnostics: str, status: str = "failed"):
        self.fault = fault
        self.diagnostics = diagnostics
        self.status = status
        super().__init__(diagnostics)


def prompt_body(graph: WorkflowGraph, client_id: str) -> bytes:
    """The /prompt request body. The graph bytes are embedded exactly as serialized."""
    return b'{"prompt": ' + serialize_workflow(graph) + b', "client_id": ' + json.dumps(client_id).encode() + b"}"


def _describe_rejection(response: httpx.Response) -> _Failed:
    try:
        payload = response.json()
    except ValueError:
        payload = {}
    node_errors = payload.get("node_errors") or {}
    error = payload.get("error") or {}
    message = error.get("message") if isinstance(error, dict) else str(error)
    if node_errors:
        parts = []
        for nid, info in node_errors.items():
            msgs = "; ".join(e.get("message", "") for e in info.get("errors", []))
            parts.append(f"node {nid} ({info.get('class_type', '?')}): {msgs}")
        return _Failed("node-error", f"server rejected prompt: {message}; " + " | ".join(parts))
    return _Failed("server-error", f"server returned HTTP {response.status_code}: {message or response.text[:200]}")


class RemoteBackend:
    def __init__(self, base_url: str, timeout: float = DEFAULT_TIMEOUT, client_id: str | None = None,
                 output_dir: str | Path | None = None):
        self.base_url = base_url.rstrip("/")
        self.timeout = timeout
        self.client_id = client_id or str(uuid.uuid4())
        self.output_dir = output_dir
        self.jobs = 0
        self._saved = 0
        self._http = httpx.Client(base_url=self.base_url, timeout=30.0)
        self._ws: ClientConnection | None = None

    @property
    def ws_url(self) -> str:
        parts = urlsplit(self.base_url)
        scheme = "wss" if parts.scheme == "https" else "ws"
        return f"{scheme}://{parts.netloc}{parts.path}/ws?clientId={self.client_id}"

    def ping(self) -> None:
        try:
            self._http.get("/system_stats", timeout=5.0)
        except httpx.TransportError as exc:
            raise BackendUnreachable(f"{self.base_url}: {exc}") from None

    def close(self) -> None:
        if self._ws is not None:
            self._ws.close()
            self._ws = None
        self._http.close()

    # -- protocol steps -------------------------------------------------------

    def connect(self, open_timeout: float = 10.0) -> None:
        if self._ws is not None:
            return
        try:
            self._ws = connect(self.ws_url, open_timeout=open_timeout, max_size=None)
        except (ConnectionRefusedError, OSError) as exc:
            if isinstance(exc, TimeoutError):
                raise _Failed("handshake-failure", f"websocket handshake timed out: {exc}") from None
            raise _Failed("connection-refused", f"cannot reach {self.base_url}: {exc}") from None
        except InvalidHandshake as exc:
            raise _Failed("handshake-failure", f"websocket handshake failed: {exc}") from None

    def submit(self, graph: WorkflowGraph) -> JobHandle:
        require_concrete(graph)
        self.connect()
        body = prompt_body(graph, self.client_id)
        try:
            response = self._http.post("/prompt", content=body, headers={"Content-Type": "application/json"})
        except httpx.ConnectError as exc:
            raise _Failed("connection-refused", f"cannot reach {self.base_url}: {exc}") from None
        except httpx.TransportError as exc:
            raise _Failed("server-error", f"prompt submission failed: {exc}") from None
        self.jobs += 1
        if response.status_code != 200:
            raise _describe_rejection(response)
        payload = response.json()
        if payload.get("node_errors"):
            raise _describe_rejection(response)
        prompt_id = payload.get("prompt_id")
        if not prompt_id:
            raise _Failed("server-error", f"server reply lacks a prompt_id: {payload}")
        return JobHandle(str(prompt_id), time.time(), self.client_id)

    def monitor(self, handle: JobHandle, timeout: float | None = None,
                output_dir: str | Path | None = None) -> Iterator[ProgressEvent | ExecutionOutcome]:
        """Yield progress events for ``handle``; the last item is the ExecutionOutcome."""
        timeout = self.timeout if timeout is None else timeout
        started = time.monotonic()
        deadline = started + timeout
        try:
            for event in self._events(handle, deadline):
                yield event
            artifacts = self._collect(handle, output_dir or self.output_dir)
        except _Failed as failure:
            yield ExecutionOutcome(failure.status, (), failure.diagnostics, time.monotonic() - started, failure.fault)
            return
        yield ExecutionOutcome("completed", tuple(artifacts), "", time.monotonic() - started)

    def _events(self, handle: JobHandle, deadline: float) -> Iterator[ProgressEvent]:
        assert self._ws is not None
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise _Failed("timeout", f"job {handle.job_id} did not finish before the timeout", "timed-out")
            try:
                raw = self._ws.recv(timeout=remaining)
            except TimeoutError:
                raise _Failed("timeout", f"job {handle.job_id} did not finish before the timeout", "timed-out") from None
            except ConnectionClosed as exc:
                self._ws = None
                raise _Failed("server-error", f"websocket closed during job {handle.job_id}: {exc}") from None
            if isinstance(raw, bytes):
                continue  # binary preview frames
            try:
                message = json.loads(raw)
            except json.JSONDecodeError:
                log.warning("ignoring non-JSON frame %r", raw[:80])
                continue
            kind = message.get("type")
            data = message.get("data") or {}
            if data.get("prompt_id") not in (None, handle.job_id):
                continue
            if kind == "execution_error":
                node = data.get("node_id")
                raise _Failed(
                    "node-error",
                    f"node {node} ({data.get('node_type', '?')}) failed: "
                    f"{data.get('exception_type', '')}: {data.get('exception_message', '')}",
                )
            if kind == "execution_interrupted":
                raise _Failed("server-error", f"execution interrupted at node {data.get('node_id')}")
            if kind in ("executing", "progress", "executed", "execution_start", "execution_cached"):
                if data.get("prompt_id") != handle.job_id:
                    continue
                yield ProgressEvent(kind, data.get("node"), data)
                if kind == "executing" and data.get("node") is None:
                    return
            elif kind == "execution_success":
                yield ProgressEvent(kind, None, data)
                return

    def _collect(self, handle: JobHandle, output_dir: str | Path | None) -> list[tuple[str, str]]:
        try:
            history = self._http.get(f"/history/{handle.job_id}").json()
        except (httpx.TransportError, ValueError) as exc:
            raise _Failed("server-error", f"could not fetch history: {exc}") from None
        entry = history.get(handle.job_id)
        if entry is None:
            raise _Failed("server-error", f"history has no entry for {handle.job_id}")
        out_dir = Path(output_dir) if output_dir else Path("runs") / "remote" / "artifacts"
        out_dir.mkdir(parents=True, exist_ok=True)
        artifacts = []
        for nid, node_output in entry.get("outputs", {}).items():
            for key in OUTPUT_KEYS:
                for item in node_output.get(key, []):
                    params = {"filename": item["filename"], "subfolder": item.get("subfolder", ""),
                              "type": item.get("type", "output")}
                    try:
                        resp = self._http.get("/view", params=params)
                        resp.raise_for_status()
                    except httpx.HTTPError as exc:
                        raise _Failed("server-error", f"download of {item['filename']} failed: {exc}") from None
                    ext = Path(item["filename"]).suffix or ".bin"
                    path = out_dir / f"{nid}_{self._saved}{ext}"
                    self._saved += 1
                    path.write_bytes(resp.content)
                    artifacts.append((str(nid), str(path)))
        return artifacts

    # -- Backend contract -----------------------------------------------------

    def execute(
        self,
        graph: WorkflowGraph,
        timeout: float | None = None,
        output_dir: str | Path | None = None,
    ) -> ExecutionOutcome:
        started = time.monotonic()
        try:
            handle = self.submit(graph)
        except _Failed as failure:
            return ExecutionOutcome(failure.status, (), failure.diagnostics, time.monotonic() - started, failure.fault)
        outcome = None
        for item in self.monitor(handle, timeout, output_dir):
            if isinstance(item, ExecutionOutcome):
                outcome = item
        assert outcome is not None
        return outcome
