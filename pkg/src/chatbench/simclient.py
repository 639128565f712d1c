"""Scripted chat clients driven over real connections.

Each client follows a schedule of actions at millisecond offsets and
reports timestamps on its own virtual clock (logical milliseconds since
script start), so typing metrics derived from a scripted run are
reproducible under a fixed seed while wall-clock pacing stays realistic.
Everything sent and received lands in a machine-readable transcript for
offline assertions.
"""

from __future__ import annotations

import asyncio
import json
import random
import time
from dataclasses import dataclass, field

from websockets.asyncio.client import connect as ws_connect
from websockets.exceptions import ConnectionClosed

from .protocol import ClientFrame, ClientKind, ServerFrame, ServerKind, decode_frame, encode_frame

CONNECT_FAILED = "CONNECT_FAILED"
SCRIPT_INVALID = "SCRIPT_INVALID"

WIZARD_ONLY_ACTIONS = {"switch_identity", "edit"}


class SimError(Exception):
    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


@dataclass(frozen=True)
class ScriptStep:
    at_ms: int
    action: str
    params: dict


@dataclass
class TranscriptEntry:
    direction: str        # "sent" | "recv"
    wall_ms: int          # wall clock when handled locally
    logical_ms: int       # position on the client's virtual clock
    raw: str              # canonical frame text, exactly as on the wire
    connection: int       # 0-based connection attempt


@dataclass
class Transcript:
    name: str
    session_id: str
    participant_id: str = ""
    entries: list[TranscriptEntry] = field(default_factory=list)

    def received(self, kind: ServerKind | None = None) -> list[ServerFrame]:
        frames = []
        for e in self.entries:
            if e.direction != "recv":
                continue
            frame = decode_frame(e.raw)
            if isinstance(frame, ServerFrame) and (kind is None or frame.kind == kind):
                frames.append(frame)
        return frames

    def sent(self, kind: ClientKind | None = None) -> list[ClientFrame]:
        frames = []
        for e in self.entries:
            if e.direction != "sent":
                continue
            frame = decode_frame(e.raw)
            if isinstance(frame, ClientFrame) and (kind is None or frame.kind == kind):
                frames.append(frame)
        return frames

    def to_json(self) -> str:
        return json.dumps({
            "name": self.name,
            "session_id": self.session_id,
            "participant_id": self.participant_id,
            "entries": [{"direction": e.direction, "wall_ms": e.wall_ms,
                         "logical_ms": e.logical_ms, "raw": e.raw,
                         "connection": e.connection}
                        for e in self.entries],
        }, indent=2)

    @classmethod
    def from_json(cls, text: str) -> Transcript:
        obj = json.loads(text)
        t = cls(name=obj["name"], session_id=obj["session_id"],
                participant_id=obj.get("participant_id", ""))
        t.entries = [TranscriptEntry(**e) for e in obj["entries"]]
        return t


def validate_script(steps: list[ScriptStep], participant_kind: str) -> list[str]:
    problems = []
    last_at = 0
    for i, step in enumerate(steps):
        if step.at_ms < last_at:
            problems.append(f"step {i}: at_ms {step.at_ms} before previous {last_at}")
        last_at = step.at_ms
        if step.action in ("switch_identity",) and participant_kind not in ("WIZARD", "LEADER"):
            problems.append(f"step {i}: {step.action} not allowed for {participant_kind}")
        if (step.action == "annotate" and step.params.get("kind") == "EDIT"
                and participant_kind not in ("WIZARD", "LEADER")):
            problems.append(f"step {i}: EDIT annotation not allowed for {participant_kind}")
        if step.action not in ("type", "erase", "mouse", "pause", "submit", "switch_identity",
                               "annotate", "set_indicator", "disconnect", "reconnect"):
            problems.append(f"step {i}: unknown action {step.action!r}")
    return problems


class ScriptedClient:
    """Runs one participant's script against a live gateway."""

    def __init__(self, name: str, ws_url: str, session_id: str, token: str,
                 steps: list[ScriptStep], *, kind: str = "SUBJECT",
                 jitter_ms: int = 0, seed: int = 0, settle_ms: int = 500):
        problems = validate_script(steps, kind)
        if problems:
            raise SimError(SCRIPT_INVALID, "; ".join(problems))
        self.name = name
        self.ws_url = ws_url
        self.session_id = session_id
        self.token = token
        self.steps = steps
        self.kind = kind
        self.settle_ms = settle_ms
        self.transcript = Transcript(name=name, session_id=session_id)
        self._rng = random.Random(seed)
        self._jitter_ms = jitter_ms
        self._ws = None
        self._recv_task: asyncio.Task | None = None
        self._conn_index = -1
        self._client_seq = 0
        self._draft = ""
        self._logical = 0
        self._t0 = 0.0
        self._seq_to_message: dict[int, str] = {}
        self.errors: list[ServerFrame] = []

    # -- wire helpers ---------------------------------------------------

    def _record(self, direction: str, raw: str) -> None:
        self.transcript.entries.append(TranscriptEntry(
            direction=direction, wall_ms=int(time.time() * 1000),
            logical_ms=self._logical, raw=raw, connection=self._conn_index))

    async def _send(self, kind: ClientKind, body: dict) -> None:
        self._client_seq += 1
        raw = encode_frame(ClientFrame(kind, self._client_seq, body)).decode("utf-8")
        self._record("sent", raw)
        await self._ws.send(raw)

    def _on_raw(self, raw: str) -> None:
        self._record("recv", raw)
        frame = decode_frame(raw)
        if not isinstance(frame, ServerFrame):
            return
        if frame.kind == ServerKind.ERROR:
            self.errors.append(frame)
        elif frame.kind == ServerKind.MESSAGE_POSTED:
            self._seq_to_message[int(frame.body["session_seq"])] = frame.body["message_id"]
        elif frame.kind == ServerKind.WELCOME:
            self.transcript.participant_id = frame.body["you"]["participant_id"]
            for view in frame.body.get("messages", []):
                self._seq_to_message[int(view["session_seq"])] = view["message_id"]

    async def _receiver(self, ws) -> None:
        try:
            async for raw in ws:
                self._on_raw(raw)
        except ConnectionClosed:
            pass

    # -- lifecycle ------------------------------------------------------

    async def connect(self) -> None:
        try:
            self._ws = await ws_connect(self.ws_url, open_timeout=10)
        except OSError as exc:
            raise SimError(CONNECT_FAILED, f"{self.ws_url}: {exc}") from exc
        self._conn_index += 1
        self._client_seq = 0
        await self._send(ClientKind.HELLO, {
            "token": self.token, "session_id": self.session_id,
            "client_ts_ms": self._logical})
        raw = await asyncio.wait_for(self._ws.recv(), timeout=10)
        self._on_raw(raw)
        frame = decode_frame(raw)
        if isinstance(frame, ServerFrame) and frame.kind == ServerKind.ERROR:
            raise SimError(CONNECT_FAILED, f"handshake rejected: {frame.body}")
        self._recv_task = asyncio.create_task(self._receiver(self._ws))

    async def _disconnect(self, *, polite: bool) -> None:
        if self._ws is None:
            return
        if polite:
            try:
                await self._send(ClientKind.BYE, {})
            except ConnectionClosed:
                pass
        if self._recv_task is not None:
            # drain whatever the server already queued for us
            await asyncio.sleep(0)
        try:
            await self._ws.close()
        except ConnectionClosed:
            pass
        if self._recv_task is not None:
            try:
                await asyncio.wait_for(self._recv_task, timeout=5)
            except (asyncio.TimeoutError, asyncio.CancelledError):
                pass
        self._ws = None
        self._recv_task = None

    # -- schedule execution ----------------------------------------------

    async def _advance_to(self, logical_ms: int) -> None:
        if logical_ms < self._logical:
            logical_ms = self._logical
        self._logical = logical_ms
        target = self._t0 + logical_ms / 1000.0
        delay = target - time.monotonic()
        if delay > 0:
            await asyncio.sleep(delay)

    def _jittered(self, delay: int) -> int:
        if self._jitter_ms <= 0:
            return max(1, delay)
        return max(1, delay + self._rng.randint(-self._jitter_ms, self._jitter_ms))

    async def _input_event(self, kind: str, *, char_count: int = 0, chars: str | None = None,
                           x: float = 0.0, y: float = 0.0) -> None:
        await self._send(ClientKind.INPUT, {"event": {
            "kind": kind, "client_ts_ms": self._logical,
            "draft_len_after": len(self._draft), "char_count": char_count,
            "chars": chars, "x": x, "y": y}})

    async def run(self, t0: float, *, send_chars: bool) -> Transcript:
        """Execute all steps against the shared wall-clock origin t0.
        send_chars mirrors the session mode: characters ride along only
        when the mode transmits keystrokes."""
        self._t0 = t0
        for step in self.steps:
            await self._advance_to(step.at_ms)
            await self._run_step(step, send_chars)
        await asyncio.sleep(self.settle_ms / 1000.0)
        await self._disconnect(polite=True)
        return self.transcript

    async def _run_step(self, step: ScriptStep, send_chars: bool) -> None:
        p = step.params
        if step.action == "type":
            delay = int(p.get("delay_ms", 120))
            for ch in str(p["text"]):
                await self._advance_to(self._logical + self._jittered(delay))
                self._draft += ch
                await self._input_event("KEY_DOWN", char_count=1,
                                        chars=ch if send_chars else None)
        elif step.action == "erase":
            delay = int(p.get("delay_ms", 120))
            for _ in range(int(p["count"])):
                await self._advance_to(self._logical + self._jittered(delay))
                self._draft = self._draft[:-1]
                await self._input_event("KEY_ERASE", char_count=1)
        elif step.action == "mouse":
            delay = int(p.get("delay_ms", 50))
            for x, y in p["points"]:
                await self._advance_to(self._logical + self._jittered(delay))
                await self._input_event("MOUSE_MOVE", x=float(x), y=float(y))
        elif step.action == "pause":
            await self._advance_to(self._logical + int(p.get("ms", 0)))
        elif step.action == "submit":
            text = p.get("text")
            if text is not None:
                # paste-style: a single multi-character insertion
                self._draft += text
                await self._input_event("KEY_DOWN", char_count=len(text),
                                        chars=text if send_chars else None)
            await self._send(ClientKind.SUBMIT,
                             {"text": self._draft, "client_ts_ms": self._logical})
            self._draft = ""
        elif step.action == "switch_identity":
            await self._send(ClientKind.SWITCH_IDENTITY, {"identity_index": int(p["index"])})
        elif step.action == "annotate":
            message_id = await self._resolve_target(p)
            body = {"kind": p["kind"], "target_message_id": message_id, "body": p["body"]}
            if "study_internal" in p:
                body["study_internal"] = bool(p["study_internal"])
            await self._send(ClientKind.ANNOTATE, body)
        elif step.action == "set_indicator":
            await self._send(ClientKind.SET_INDICATOR, {"variant": p["variant"]})
        elif step.action == "disconnect":
            await self._disconnect(polite=bool(p.get("polite", False)))
        elif step.action == "reconnect":
            await self.connect()
        else:
            raise SimError(SCRIPT_INVALID, f"unknown action {step.action!r}")

    async def _resolve_target(self, p: dict) -> str:
        if "target_message_id" in p:
            return p["target_message_id"]
        seq = int(p["target_seq"])
        deadline = time.monotonic() + 5
        while seq not in self._seq_to_message:
            if time.monotonic() > deadline:
                raise SimError(SCRIPT_INVALID, f"message with session_seq {seq} never arrived")
            await asyncio.sleep(0.02)
        return self._seq_to_message[seq]


async def run_script(ws_url: str, session_id: str, token: str, steps: list[ScriptStep],
                     *, kind: str = "SUBJECT", send_chars: bool = False,
                     jitter_ms: int = 0, seed: int = 0, settle_ms: int = 500) -> Transcript:
    """Connect, execute one script, disconnect; the single-client entry point."""
    client = ScriptedClient("client", ws_url, session_id, token, steps, kind=kind,
                            jitter_ms=jitter_ms, seed=seed, settle_ms=settle_ms)
    await client.connect()
    return await client.run(time.monotonic(), send_chars=send_chars)
