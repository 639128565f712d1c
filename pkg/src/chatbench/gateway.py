"""Network face: the WebSocket chat endpoint, the admin HTTP API, and
durable wiring of sessions to their log files.

Every operation on one session runs under that session's asyncio lock
(one logical writer per session); fan-out goes through bounded
per-connection queues so one slow consumer can only get itself dropped,
never stall the session.
"""

from __future__ import annotations

import asyncio
import contextlib
import os
import secrets
import socket
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import uvicorn
from fastapi import FastAPI, Request, WebSocket
from fastapi.responses import JSONResponse, Response
from starlette.staticfiles import StaticFiles
from starlette.websockets import WebSocketDisconnect, WebSocketState

from .engine import EngineError, SessionEngine
from .export import export_session
from .model import (
    AnnotationKind,
    ChatMode,
    Identity,
    IndicatorVariant,
    Participant,
    ParticipantKind,
    RecordKind,
    SessionConfig,
    TypingIndicatorPolicy,
    token_digest,
)
from .protocol import (
    ClientFrame,
    ClientKind,
    DecodeError,
    ServerFrame,
    ServerKind,
    decode_frame,
    encode_frame,
    error_frame,
    identity_from_obj,
    input_event_from_obj,
    policy_from_obj,
)
from .store import SessionLog, log_path

DEFAULT_BIND = "127.0.0.1:8600"
DEFAULT_TICK_MS = 500
DEFAULT_QUEUE_LIMIT = 1024


@dataclass
class GatewayConfig:
    bind_address: str = DEFAULT_BIND
    data_dir: Path = Path("./chatbench-data")
    admin_token: str = ""
    session_tick_ms: int = DEFAULT_TICK_MS
    tls_cert: str | None = None
    tls_key: str | None = None
    static_dir: Path | None = None
    queue_limit: int = DEFAULT_QUEUE_LIMIT

    @property
    def host(self) -> str:
        return self.bind_address.rsplit(":", 1)[0]

    @property
    def port(self) -> int:
        return int(self.bind_address.rsplit(":", 1)[1])


def load_gateway_config(path: str | Path | None = None, env=os.environ) -> GatewayConfig:
    """Config file is flat `key = value` lines (# comments); CBK_* environment
    variables override the file. See README for the key list."""
    values: dict[str, str] = {}
    if path is not None:
        for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key = value")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    if env.get("CBK_BIND"):
        values["bind"] = env["CBK_BIND"]
    if env.get("CBK_DATA_DIR"):
        values["data_dir"] = env["CBK_DATA_DIR"]
    if env.get("CBK_ADMIN_TOKEN"):
        values["admin_token"] = env["CBK_ADMIN_TOKEN"]
    if env.get("CBK_TICK_MS"):
        values["session_tick_ms"] = env["CBK_TICK_MS"]
    cfg = GatewayConfig()
    if "bind" in values:
        cfg.bind_address = values["bind"]
    if "data_dir" in values:
        cfg.data_dir = Path(values["data_dir"])
    if "admin_token" in values:
        cfg.admin_token = values["admin_token"]
    if "session_tick_ms" in values:
        cfg.session_tick_ms = int(values["session_tick_ms"])
    if values.get("tls_cert"):
        cfg.tls_cert = values["tls_cert"]
    if values.get("tls_key"):
        cfg.tls_key = values["tls_key"]
    if values.get("static_dir"):
        cfg.static_dir = Path(values["static_dir"])
    if "queue_limit" in values:
        cfg.queue_limit = int(values["queue_limit"])
    return cfg


def now_ms() -> int:
    return int(time.time() * 1000)


class Connection:
    """One live WebSocket with its bounded outbound queue."""

    def __init__(self, participant_id: str, ws: WebSocket, limit: int):
        self.participant_id = participant_id
        self.ws = ws
        self.queue: asyncio.Queue[ServerFrame | None] = asyncio.Queue(maxsize=limit)
        self.last_client_seq = 0
        self.sender_task: asyncio.Task | None = None


@dataclass
class SessionRuntime:
    engine: SessionEngine
    log: SessionLog
    lock: asyncio.Lock = field(default_factory=asyncio.Lock)
    connections: dict[str, Connection] = field(default_factory=dict)
    tick_task: asyncio.Task | None = None

    @property
    def session_id(self) -> str:
        return self.engine.state.config.session_id

    def sink(self, record) -> None:
        # group commit: records are written and flushed here; the gateway
        # fsyncs before anything that acknowledges them leaves the process
        self.log.append(record, sync=False)

    async def commit(self) -> None:
        if self.log.dirty:
            await asyncio.get_running_loop().run_in_executor(None, self.log.sync)


class Gateway:
    def __init__(self, config: GatewayConfig):
        self.config = config
        self.sessions: dict[str, SessionRuntime] = {}

    # -- lifecycle ----------------------------------------------------------

    def load_existing(self) -> None:
        """Reopen logs found in the data dir. Participants still marked
        connected mean the previous process died without LEAVE records;
        write them now so the log reflects reality."""
        self.config.data_dir.mkdir(parents=True, exist_ok=True)
        for path in sorted(self.config.data_dir.glob("*.log")):
            log = SessionLog.open(path)
            if not log.records:
                continue
            runtime = SessionRuntime(engine=SessionEngine.from_records(log.records), log=log)
            runtime.engine.record_sink = runtime.sink
            for pid, entry in runtime.engine.state.roster.items():
                if entry.connected:
                    runtime.engine.leave(pid, now_ms())
            log.sync()
            self.sessions[log.session_id] = runtime

    def start_ticking(self) -> None:
        for runtime in self.sessions.values():
            self._ensure_tick(runtime)

    def _ensure_tick(self, runtime: SessionRuntime) -> None:
        if runtime.tick_task is None and not runtime.engine.state.closed:
            runtime.tick_task = asyncio.create_task(self._tick_loop(runtime))

    async def _tick_loop(self, runtime: SessionRuntime) -> None:
        interval = self.config.session_tick_ms / 1000.0
        while True:
            await asyncio.sleep(interval)
            async with runtime.lock:
                if runtime.engine.state.closed:
                    return
                deliveries = runtime.engine.tick(now_ms())
                # coalesced durability point for records whose commands
                # produced no frames (e.g. quasi-sync keystrokes)
                await runtime.commit()
                self._dispatch(runtime, deliveries)

    async def shutdown(self) -> None:
        for runtime in self.sessions.values():
            if runtime.tick_task is not None:
                runtime.tick_task.cancel()
                with contextlib.suppress(asyncio.CancelledError):
                    await runtime.tick_task
            runtime.log.close()

    # -- fan-out ------------------------------------------------------------

    def _dispatch(self, runtime: SessionRuntime, deliveries) -> None:
        for pid, frame in deliveries:
            conn = runtime.connections.get(pid)
            if conn is None:
                continue
            try:
                conn.queue.put_nowait(frame)
            except asyncio.QueueFull:
                # backpressure: drop the slow consumer, never stall the session
                self._detach(runtime, conn)
                asyncio.get_running_loop().create_task(self._drop_connection(runtime, conn))

    def _detach(self, runtime: SessionRuntime, conn: Connection) -> None:
        if runtime.connections.get(conn.participant_id) is conn:
            del runtime.connections[conn.participant_id]

    async def _drop_connection(self, runtime: SessionRuntime, conn: Connection) -> None:
        if conn.sender_task is not None:
            conn.sender_task.cancel()
        with contextlib.suppress(Exception):
            await conn.ws.close(code=1013)
        async with runtime.lock:
            deliveries = runtime.engine.leave(conn.participant_id, now_ms())
            await runtime.commit()
            self._dispatch(runtime, deliveries)

    # -- session creation ---------------------------------------------------

    def create_session(self, spec: dict) -> dict:
        """Admin surface: build a session from a config + roster request,
        returning the one-time view of the join tokens."""
        cfg_obj = spec.get("config")
        roster_obj = spec.get("participants")
        if not isinstance(cfg_obj, dict) or not isinstance(roster_obj, list) or not roster_obj:
            raise EngineError("INVALID_CONFIG", "request needs config and a non-empty participants list")
        try:
            config = _config_from_request(cfg_obj)
            participants, tokens = _roster_from_request(roster_obj)
        except (KeyError, TypeError, ValueError) as exc:
            raise EngineError("INVALID_CONFIG", f"bad session spec: {exc}") from exc
        if config.session_id in self.sessions:
            raise EngineError("INVALID_CONFIG", f"session id {config.session_id!r} already exists")
        log = SessionLog(log_path(self.config.data_dir, config.session_id), config.session_id)
        engine = SessionEngine.create(config, participants, now_ms=now_ms())
        runtime = SessionRuntime(engine=engine, log=log)
        for record in engine.records:
            log.append(record, sync=False)
        engine.record_sink = runtime.sink
        log.sync()  # durable before the tokens leave the process
        self.sessions[config.session_id] = runtime
        with contextlib.suppress(RuntimeError):  # no loop when driven offline
            self._ensure_tick(runtime)
        return {
            "session_id": config.session_id,
            "participants": [
                {"participant_id": p.participant_id, "kind": p.kind.value, "token": tok}
                for p, tok in zip(participants, tokens)
            ],
        }

    # -- admin auth ---------------------------------------------------------

    def authorize_admin(self, token: str | None, session_id: str | None = None) -> bool:
        """The configured admin token, or a LEADER token of the session."""
        if not token:
            return False
        if self.config.admin_token and secrets.compare_digest(token, self.config.admin_token):
            return True
        if session_id is not None:
            runtime = self.sessions.get(session_id)
            if runtime is not None:
                digest = token_digest(token)
                for entry in runtime.engine.state.roster.values():
                    if (entry.participant.kind == ParticipantKind.LEADER
                            and secrets.compare_digest(entry.participant.token_digest, digest)):
                        return True
        return False


def _config_from_request(obj: dict) -> SessionConfig:
    indicator = obj.get("indicator", {})
    policy = TypingIndicatorPolicy(
        session_default=IndicatorVariant(indicator.get("session_default", "TYPING_ONLY")),
        idle_timeout_ms=int(indicator.get("idle_timeout_ms", 3000)),
        per_participant_overrides={},
        leader_locked=bool(indicator.get("leader_locked", False)),
    )
    return SessionConfig(
        session_id=obj.get("session_id") or f"s-{secrets.token_hex(6)}",
        mode=ChatMode(obj["mode"]),
        indicator_policy=policy,
        max_participants=int(obj.get("max_participants", 8)),
        rating_scale_max=int(obj.get("rating_scale_max", 5)),
        mouse_sample_interval_ms=int(obj.get("mouse_sample_interval_ms", 200)),
        title=obj.get("title", ""),
    )


def _roster_from_request(items: list) -> tuple[list[Participant], list[str]]:
    participants: list[Participant] = []
    tokens: list[str] = []
    for i, item in enumerate(items, start=1):
        kind = ParticipantKind(item["kind"])
        identities = tuple(identity_from_obj(o) if isinstance(o, dict) else Identity(str(o))
                           for o in item["identities"])
        token = item.get("token") or secrets.token_urlsafe(16)
        participants.append(Participant(
            participant_id=item.get("participant_id") or f"p{i}",
            token_digest=token_digest(token),
            kind=kind,
            identities=identities,
            active_identity_index=int(item.get("active_identity_index", 0)),
        ))
        tokens.append(token)
    return participants, tokens


# ---------------------------------------------------------------------------
# FastAPI application

def create_app(config: GatewayConfig) -> FastAPI:
    gateway = Gateway(config)
    gateway.load_existing()

    @contextlib.asynccontextmanager
    async def lifespan(_app):
        gateway.start_ticking()
        yield
        await gateway.shutdown()

    app = FastAPI(title="chatbench gateway", lifespan=lifespan)
    app.state.gateway = gateway

    def bearer_token(request: Request) -> str | None:
        header = request.headers.get("authorization", "")
        if header.lower().startswith("bearer "):
            return header[7:].strip()
        return None

    def error_response(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse({"error": code, "message": message}, status_code=status)

    @app.post("/api/sessions")
    async def api_create_session(request: Request):
        if not gateway.authorize_admin(bearer_token(request)):
            return error_response(401, "UNAUTHORIZED", "admin token required")
        try:
            spec = await request.json()
        except Exception:
            return error_response(400, "INVALID_CONFIG", "body must be json")
        try:
            result = gateway.create_session(spec)
        except EngineError as exc:
            return error_response(400, exc.code, str(exc))
        return JSONResponse(result, status_code=201)

    @app.get("/api/sessions/{session_id}")
    async def api_session_status(session_id: str, request: Request):
        if not gateway.authorize_admin(bearer_token(request), session_id):
            return error_response(401, "UNAUTHORIZED", "admin or leader token required")
        runtime = gateway.sessions.get(session_id)
        if runtime is None:
            return error_response(404, "UNKNOWN_SESSION", f"no session {session_id!r}")
        async with runtime.lock:
            state = runtime.engine.state
            return JSONResponse({
                "session_id": session_id,
                "title": state.config.title,
                "mode": state.config.mode.value,
                "closed": state.closed,
                "record_seq": len(runtime.engine.records),
                "message_count": len(state.messages),
                "participants": [
                    {"participant_id": pid, "kind": e.participant.kind.value,
                     "connected": e.connected,
                     "display_name": e.participant.active_identity.display_name}
                    for pid, e in state.roster.items()
                ],
            })

    @app.patch("/api/sessions/{session_id}/indicator")
    async def api_update_indicator(session_id: str, request: Request):
        if not gateway.authorize_admin(bearer_token(request), session_id):
            return error_response(401, "UNAUTHORIZED", "admin or leader token required")
        runtime = gateway.sessions.get(session_id)
        if runtime is None:
            return error_response(404, "UNKNOWN_SESSION", f"no session {session_id!r}")
        try:
            body = await request.json()
            policy = policy_from_obj({
                "session_default": body["session_default"],
                "idle_timeout_ms": body.get("idle_timeout_ms", 3000),
                "per_participant_overrides": body.get("per_participant_overrides", {}),
                "leader_locked": body.get("leader_locked", False),
            })
        except Exception as exc:
            return error_response(400, "INVALID_CONFIG", f"bad policy: {exc}")
        async with runtime.lock:
            try:
                deliveries = runtime.engine.set_policy(policy, "admin", now_ms())
            except EngineError as exc:
                return error_response(400, exc.code, str(exc))
            await runtime.commit()
            gateway._dispatch(runtime, deliveries)
        return JSONResponse({"ok": True})

    @app.get("/api/sessions/{session_id}/export")
    async def api_export(session_id: str, request: Request, format: str = "csv"):
        if not gateway.authorize_admin(bearer_token(request), session_id):
            return error_response(401, "UNAUTHORIZED", "admin or leader token required")
        runtime = gateway.sessions.get(session_id)
        if runtime is None:
            return error_response(404, "UNKNOWN_SESSION", f"no session {session_id!r}")
        if format not in ("csv", "xlsx"):
            return error_response(400, "INVALID_FORMAT", "format must be csv or xlsx")
        async with runtime.lock:
            snapshot = list(runtime.engine.records)  # fixed record_seq snapshot
        data = export_session(snapshot, format)
        media = ("text/csv; charset=utf-8" if format == "csv" else
                 "application/vnd.openxmlformats-officedocument.spreadsheetml.sheet")
        return Response(content=data, media_type=media, headers={
            "Content-Disposition": f'attachment; filename="{session_id}.{format}"'})

    @app.websocket("/ws")
    async def ws_endpoint(ws: WebSocket):
        await ws.accept()
        await _serve_connection(gateway, ws)

    static_dir = config.static_dir
    if static_dir is None:
        candidate = Path("frontend/dist")
        if candidate.is_dir():
            static_dir = candidate
    if static_dir is not None and Path(static_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(static_dir), html=True), name="static")
    else:
        @app.get("/")
        async def index():
            return {"service": "chatbench", "chat": "/ws", "admin": "/api/sessions"}

    return app


async def _send_error(ws: WebSocket, code: str, message: str, in_reply_to: int | None = None) -> None:
    with contextlib.suppress(Exception):
        await ws.send_text(encode_frame(error_frame(code, message, in_reply_to)).decode("utf-8"))


async def _sender_loop(conn: Connection) -> None:
    while True:
        frame = await conn.queue.get()
        if frame is None:
            return
        await conn.ws.send_text(encode_frame(frame).decode("utf-8"))


async def _serve_connection(gateway: Gateway, ws: WebSocket) -> None:
    """Bridge one socket: HELLO/auth handshake, WELCOME snapshot, then
    frames both ways until BYE, error, or transport close."""
    try:
        raw = await ws.receive_text()
    except WebSocketDisconnect:
        return
    try:
        hello = decode_frame(raw)
    except DecodeError as exc:
        await _send_error(ws, exc.code, str(exc))
        await ws.close(code=4400)
        return
    if not isinstance(hello, ClientFrame) or hello.kind != ClientKind.HELLO:
        await _send_error(ws, "BAD_FRAME", "first frame must be HELLO")
        await ws.close(code=4400)
        return

    session_id = hello.body.get("session_id")
    token = hello.body.get("token", "")
    runtime = gateway.sessions.get(session_id)
    if runtime is None:
        await _send_error(ws, "AUTH_FAILED", "unknown session or bad token")
        await ws.close(code=4401)
        return
    pid = _find_participant(runtime.engine, token)
    if pid is None:
        await _send_error(ws, "AUTH_FAILED", "unknown session or bad token")
        await ws.close(code=4401)
        return

    conn = Connection(pid, ws, gateway.config.queue_limit)
    conn.last_client_seq = hello.client_seq
    async with runtime.lock:
        try:
            deliveries = runtime.engine.join(pid, token, int(hello.body.get("client_ts_ms", 0)), now_ms())
        except EngineError as exc:
            await _send_error(ws, exc.code, str(exc))
            await ws.close(code=4403)
            return
        await runtime.commit()
        stale = runtime.connections.get(pid)
        if stale is not None:
            # same participant reconnecting: the newest socket wins
            gateway._detach(runtime, stale)
            if stale.sender_task is not None:
                stale.sender_task.cancel()
            asyncio.get_running_loop().create_task(_close_quietly(stale.ws))
        welcome = ServerFrame(ServerKind.WELCOME, len(runtime.engine.records),
                              runtime.engine.welcome_body(pid))
        conn.queue.put_nowait(welcome)
        runtime.connections[pid] = conn
        gateway._dispatch(runtime, deliveries)
    conn.sender_task = asyncio.create_task(_sender_loop(conn))

    try:
        while True:
            try:
                raw = await ws.receive_text()
            except WebSocketDisconnect:
                break
            try:
                frame = decode_frame(raw)
            except DecodeError as exc:
                await _send_error(ws, exc.code, str(exc))
                continue
            if not isinstance(frame, ClientFrame):
                await _send_error(ws, "BAD_FRAME", "expected a client frame")
                continue
            if frame.kind == ClientKind.BYE:
                break
            if frame.client_seq <= conn.last_client_seq:
                await _send_error(ws, "SEQ_REGRESSION",
                                  f"client_seq {frame.client_seq} not after {conn.last_client_seq}",
                                  in_reply_to=frame.client_seq)
                continue
            conn.last_client_seq = frame.client_seq
            async with runtime.lock:
                if runtime.connections.get(pid) is not conn:
                    break  # a newer connection took over
                try:
                    deliveries = _dispatch_client_frame(runtime.engine, pid, frame)
                except EngineError as exc:
                    await _send_error(ws, exc.code, str(exc), in_reply_to=frame.client_seq)
                    continue
                except (KeyError, TypeError, ValueError) as exc:
                    await _send_error(ws, "BAD_FRAME", f"bad {frame.kind.value} body: {exc}",
                                      in_reply_to=frame.client_seq)
                    continue
                if deliveries:  # records stay flushed; fsync before any frame reflects them
                    await runtime.commit()
                gateway._dispatch(runtime, deliveries)
    finally:
        if conn.sender_task is not None:
            conn.sender_task.cancel()
        async with runtime.lock:
            if runtime.connections.get(pid) is conn:
                gateway._detach(runtime, conn)
                deliveries = runtime.engine.leave(pid, now_ms())
                await runtime.commit()
                gateway._dispatch(runtime, deliveries)
        await _close_quietly(ws)


async def _close_quietly(ws: WebSocket) -> None:
    with contextlib.suppress(Exception):
        if ws.client_state != WebSocketState.DISCONNECTED:
            await ws.close()


def _find_participant(engine: SessionEngine, token: str) -> str | None:
    digest = token_digest(token)
    for pid, entry in engine.state.roster.items():
        if secrets.compare_digest(entry.participant.token_digest, digest):
            return pid
    return None


def _dispatch_client_frame(engine: SessionEngine, pid: str, frame: ClientFrame):
    body = frame.body
    ts = now_ms()
    if frame.kind == ClientKind.INPUT:
        return engine.ingest_input(pid, input_event_from_obj(body["event"]), ts)
    if frame.kind == ClientKind.SUBMIT:
        return engine.submit_message(pid, str(body["text"]), int(body["client_ts_ms"]), ts)
    if frame.kind == ClientKind.SWITCH_IDENTITY:
        return engine.switch_identity(pid, int(body["identity_index"]), ts)
    if frame.kind == ClientKind.ANNOTATE:
        return engine.annotate(pid, AnnotationKind(body["kind"]), str(body["target_message_id"]),
                               body["body"], ts, body.get("study_internal"))
    if frame.kind == ClientKind.SET_INDICATOR:
        return engine.set_own_indicator(pid, IndicatorVariant(body["variant"]), ts)
    if frame.kind == ClientKind.HELLO:
        raise EngineError("BAD_FRAME", "connection already established")
    raise EngineError("BAD_FRAME", f"unhandled frame kind {frame.kind.value}")


# ---------------------------------------------------------------------------
# embedded server (tests, simulations, `serve`)

class ServerHandle:
    """A gateway running on a background thread with its own event loop."""

    def __init__(self, config: GatewayConfig):
        if config.bind_address.endswith(":0"):
            config.bind_address = f"{config.host}:{_free_port(config.host)}"
        self.config = config
        self.app = create_app(config)
        uv_config = uvicorn.Config(self.app, host=config.host, port=config.port,
                                   log_level="warning", ws_ping_interval=None,
                                   ssl_certfile=config.tls_cert, ssl_keyfile=config.tls_key)
        self._server = uvicorn.Server(uv_config)
        self._thread: threading.Thread | None = None

    @property
    def base_url(self) -> str:
        scheme = "https" if self.config.tls_cert else "http"
        return f"{scheme}://{self.config.host}:{self.config.port}"

    @property
    def ws_url(self) -> str:
        scheme = "wss" if self.config.tls_cert else "ws"
        return f"{scheme}://{self.config.host}:{self.config.port}/ws"

    def start(self, timeout: float = 10.0) -> ServerHandle:
        self._thread = threading.Thread(target=self._server.run, daemon=True)
        self._thread.start()
        deadline = time.monotonic() + timeout
        while not self._server.started:
            if time.monotonic() > deadline or not self._thread.is_alive():
                raise RuntimeError("gateway failed to start")
            time.sleep(0.01)
        return self

    def stop(self) -> None:
        self._server.should_exit = True
        if self._thread is not None:
            self._thread.join(timeout=10)


def _free_port(host: str) -> int:
    with socket.socket() as s:
        s.bind((host, 0))
        return s.getsockname()[1]
