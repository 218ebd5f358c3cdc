"""A scripted ComfyUI-protocol server for tests and offline demos.

Speaks ``POST /prompt``, ``GET /history/<id>``, ``GET /view`` and
``/ws?clientId=`` the way a real server does, plus ``POST /v1/chat`` for the
chat-completion contract used by the remote agent adapters. Behaviour comes
from a scenario mapping::

    mode: complete          # complete | fail | node-error | server-error | hang
    node: "7"               # node blamed by fail / node-error
    progress_steps: 2       # progress frames per node
    chat: ["reply 1", ...]  # contents returned by /v1/chat, in order (last repeats)

Every request body is recorded verbatim in ``StubServer.requests``.
"""

from __future__ import annotations

import asyncio
import json
import threading
import uuid
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml
from aiohttp import WSMsgType, web

from ..graph import parse_workflow, topological_order
from .base import OUTPUT_NODES

MODES = ("complete", "fail", "node-error", "server-error", "hang")


@dataclass
class RecordedRequest:
    method: str
    path: str
    body: bytes


def load_scenario(path: str | Path) -> dict[str, Any]:
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError(f"scenario {path} must be a mapping")
    return data


def view_bytes(filename: str) -> bytes:
    return b"STUB-ARTIFACT:" + filename.encode("utf-8")


@dataclass
class _State:
    scenario: dict[str, Any]
    requests: list[RecordedRequest] = field(default_factory=list)
    sockets: dict[str, web.WebSocketResponse] = field(default_factory=dict)
    pending: dict[str, list[dict[str, Any]]] = field(default_factory=dict)
    history: dict[str, dict[str, Any]] = field(default_factory=dict)
    chat_calls: int = 0
    tasks: set[asyncio.Task] = field(default_factory=set)


class StubServer:
    """Runs the stub app on a background thread; usable as a context manager."""

    def __init__(self, scenario: dict[str, Any] | None = None, host: str = "127.0.0.1", port: int = 0):
        scenario = dict(scenario or {})
        mode = scenario.setdefault("mode", "complete")
        if mode not in MODES:
            raise ValueError(f"unknown stub mode {mode!r}")
        self.host = host
        self.port = port
        self.state = _State(scenario)
        self._loop: asyncio.AbstractEventLoop | None = None
        self._runner: web.AppRunner | None = None
        self._thread: threading.Thread | None = None
        self._ready = threading.Event()

    @property
    def url(self) -> str:
        return f"http://{self.host}:{self.port}"

    @property
    def requests(self) -> list[RecordedRequest]:
        return self.state.requests

    def prompt_bodies(self) -> list[bytes]:
        return [r.body for r in self.state.requests if r.method == "POST" and r.path == "/prompt"]

    # -- lifecycle -----------------------------------------------------------

    def start(self) -> StubServer:
        self._thread = threading.Thread(target=self._serve, name="atelier-stub", daemon=True)
        self._thread.start()
        if not self._ready.wait(10):
            raise RuntimeError("stub server did not start")
        return self

    def stop(self) -> None:
        if self._loop is None:
            return
        fut = asyncio.run_coroutine_threadsafe(self._shutdown(), self._loop)
        fut.result(10)
        self._loop.call_soon_threadsafe(self._loop.stop)
        if self._thread:
            self._thread.join(10)
        self._loop = None

    def __enter__(self) -> StubServer:
        return self.start()

    def __exit__(self, *exc: object) -> None:
        self.stop()

    def _serve(self) -> None:
        loop = asyncio.new_event_loop()
        self._loop = loop
        asyncio.set_event_loop(loop)
        self._runner = web.AppRunner(build_app(self.state), access_log=None)
        loop.run_until_complete(self._runner.setup())
        site = web.TCPSite(self._runner, self.host, self.port)
        loop.run_until_complete(site.start())
        self.port = site._server.sockets[0].getsockname()[1]
        self._ready.set()
        loop.run_forever()
        loop.close()

    async def _shutdown(self) -> None:
        for task in list(self.state.tasks):
            task.cancel()
        for ws in list(self.state.sockets.values()):
            await ws.close()
        if self._runner:
            await self._runner.cleanup()


def serve_forever(scenario: dict[str, Any], host: str = "127.0.0.1", port: int = 8188) -> None:
    web.run_app(build_app(_State(scenario)), host=host, port=port, print=None)


STATE = web.AppKey("state", _State)


# -- the app -------------------------------------------------------------------


def build_app(state: _State) -> web.Application:
    app = web.Application()
    app[STATE] = state
    app.router.add_post("/prompt", _post_prompt)
    app.router.add_get("/history/{prompt_id}", _get_history)
    app.router.add_get("/view", _get_view)
    app.router.add_get("/ws", _websocket)
    app.router.add_post("/v1/chat", _post_chat)
    app.router.add_get("/system_stats", _system_stats)
    return app


async def _record(request: web.Request) -> bytes:
    body = await request.read()
    request.app[STATE].requests.append(RecordedRequest(request.method, request.path, body))
    return body


async def _system_stats(request: web.Request) -> web.Response:
    return web.json_response({"system": {"os": "stub", "comfyui_version": "stub"}, "devices": []})


async def _post_prompt(request: web.Request) -> web.Response:
    state: _State = request.app[STATE]
    body = await _record(request)
    scenario = state.scenario
    try:
        payload = json.loads(body)
        graph = parse_workflow(json.dumps(payload["prompt"]))
        client_id = str(payload.get("client_id", ""))
    except (ValueError, KeyError, TypeError) as exc:
        return web.json_response({"error": {"type": "invalid_prompt", "message": str(exc)}, "node_errors": {}}, status=400)

    mode = scenario["mode"]
    if mode == "server-error":
        return web.json_response({"error": {"type": "internal", "message": "scripted server error"}}, status=500)
    if mode == "node-error":
        node = str(scenario.get("node", next(iter(graph.nodes))))
        class_type = graph.nodes[node].class_type if node in graph.nodes else "unknown"
        return web.json_response(
            {
                "error": {"type": "prompt_outputs_failed_validation", "message": "Prompt outputs failed validation"},
                "node_errors": {
                    node: {
                        "errors": [{"type": "value_not_in_list", "message": "Value not in list", "details": ""}],
                        "dependent_outputs": [],
                        "class_type": class_type,
                    }
                },
            },
            status=400,
        )

    prompt_id = str(uuid.uuid4())
    number = len(state.history)
    task = asyncio.get_running_loop().create_task(_run_job(state, client_id, prompt_id, graph))
    state.tasks.add(task)
    task.add_done_callback(state.tasks.discard)
    return web.json_response({"prompt_id": prompt_id, "number": number, "node_errors": {}})


async def _send(state: _State, client_id: str, message: dict[str, Any]) -> None:
    ws = state.sockets.get(client_id)
    if ws is None or ws.closed:
        state.pending.setdefault(client_id, []).append(message)
        return
    await ws.send_str(json.dumps(message))


async def _run_job(state: _State, client_id: str, prompt_id: str, graph) -> None:
    scenario = state.scenario
    mode = scenario["mode"]
    steps = int(scenario.get("progress_steps", 1))
    delay = float(scenario.get("delay", 0.0))
    await _send(state, client_id, {"type": "execution_start", "data": {"prompt_id": prompt_id}})
    if mode == "hang":
        return
    outputs: dict[str, Any] = {}
    for nid in topological_order(graph):
        await _send(state, client_id, {"type": "executing", "data": {"node": nid, "prompt_id": prompt_id}})
        if mode == "fail" and nid == str(scenario.get("node", nid)):
            await _send(
                state,
                client_id,
                {
                    "type": "execution_error",
                    "data": {
                        "prompt_id": prompt_id,
                        "node_id": nid,
                        "node_type": graph.nodes[nid].class_type,
                        "exception_type": "RuntimeError",
                        "exception_message": "scripted failure",
                        "traceback": [],
                    },
                },
            )
            state.history[prompt_id] = {"outputs": {}, "status": {"status_str": "error", "completed": False}}
            return
        for step in range(1, steps + 1):
            await _send(state, client_id, {"type": "progress", "data": {"value": step, "max": steps, "node": nid, "prompt_id": prompt_id}})
            if delay:
                await asyncio.sleep(delay)
        ext = OUTPUT_NODES.get(graph.nodes[nid].class_type)
        if ext:
            key = "images" if ext in ("png", "webp") else "gifs"
            files = [{"filename": f"stub_{prompt_id[:8]}_{nid}.{ext}", "subfolder": "", "type": "output"}]
            outputs[nid] = {key: files}
            await _send(state, client_id, {"type": "executed", "data": {"node": nid, "output": outputs[nid], "prompt_id": prompt_id}})
    state.history[prompt_id] = {"outputs": outputs, "status": {"status_str": "success", "completed": True}}
    await _send(state, client_id, {"type": "executing", "data": {"node": None, "prompt_id": prompt_id}})


async def _get_history(request: web.Request) -> web.Response:
    state: _State = request.app[STATE]
    await _record(request)
    prompt_id = request.match_info["prompt_id"]
    if prompt_id not in state.history:
        return web.json_response({})
    return web.json_response({prompt_id: state.history[prompt_id]})


async def _get_view(request: web.Request) -> web.Response:
    await _record(request)
    filename = request.query.get("filename", "")
    if not filename:
        return web.Response(status=404)
    return web.Response(body=view_bytes(filename), content_type="application/octet-stream")


async def _websocket(request: web.Request) -> web.WebSocketResponse:
    state: _State = request.app[STATE]
    client_id = request.query.get("clientId", "")
    ws = web.WebSocketResponse()
    await ws.prepare(request)
    await ws.send_str(json.dumps({"type": "status", "data": {"status": {"exec_info": {"queue_remaining": 0}}, "sid": client_id}}))
    # drain queued frames before registering so job frames cannot overtake them
    while state.pending.get(client_id):
        for message in state.pending.pop(client_id):
            await ws.send_str(json.dumps(message))
    state.sockets[client_id] = ws
    async for msg in ws:
        if msg.type == WSMsgType.ERROR:
            break
    if state.sockets.get(client_id) is ws:
        del state.sockets[client_id]
    return ws


async def _post_chat(request: web.Request) -> web.Response:
    state: _State = request.app[STATE]
    await _record(request)
    replies = state.scenario.get("chat") or [""]
    if isinstance(replies, str):
        replies = [replies]
    content = replies[min(state.chat_calls, len(replies) - 1)]
    state.chat_calls += 1
    status = int(state.scenario.get("chat_status", 200))
    if status != 200:
        return web.json_response({"error": "scripted chat failure"}, status=status)
    return web.json_response({"content": content})
