"""Wire protocol: frame types, canonical encoding, and visibility rules.

Frames and log records share one canonical encoding: UTF-8 JSON with
sorted keys and no insignificant whitespace, so structural equality and
byte equality coincide. Everything here is a pure function; sockets and
sequencing enforcement live in the gateway and session engine.

The full field-by-field format is documented in protocol.md at the repo
root, with byte-exact examples produced by this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum

from .model import (
    Annotation,
    AnnotationKind,
    ChatMode,
    EventRecord,
    Identity,
    InputEvent,
    InputKind,
    Message,
    Participant,
    ParticipantKind,
    RecordKind,
    SessionConfig,
    TelemetrySummary,
    TypingIndicatorPolicy,
    TypingState,
)

PROTOCOL_VERSION = 1


class ClientKind(str, Enum):
    HELLO = "HELLO"
    INPUT = "INPUT"
    SUBMIT = "SUBMIT"
    SWITCH_IDENTITY = "SWITCH_IDENTITY"
    ANNOTATE = "ANNOTATE"
    SET_INDICATOR = "SET_INDICATOR"
    BYE = "BYE"


class ServerKind(str, Enum):
    WELCOME = "WELCOME"
    PEER_JOINED = "PEER_JOINED"
    PEER_LEFT = "PEER_LEFT"
    TYPING_STATE = "TYPING_STATE"
    PEER_KEYSTROKE = "PEER_KEYSTROKE"
    MESSAGE_POSTED = "MESSAGE_POSTED"
    MESSAGE_UPDATED = "MESSAGE_UPDATED"
    INDICATOR_CHANGED = "INDICATOR_CHANGED"
    ERROR = "ERROR"


@dataclass(frozen=True)
class ClientFrame:
    kind: ClientKind
    client_seq: int  # strictly increasing per connection, starting at 1
    body: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ServerFrame:
    kind: ServerKind
    record_seq: int  # log position this frame reflects; 0 = not log-derived
    body: dict = field(default_factory=dict)


class DecodeError(Exception):
    """Raised by decode_frame / decode_record; code names the first violated rule."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


MALFORMED = "MALFORMED"
UNKNOWN_KIND = "UNKNOWN_KIND"
INVARIANT_VIOLATION = "INVARIANT_VIOLATION"

# Body fields that must be present for a client frame to be dispatchable.
_CLIENT_REQUIRED_FIELDS = {
    ClientKind.HELLO: ("token", "session_id", "client_ts_ms"),
    ClientKind.INPUT: ("event",),
    ClientKind.SUBMIT: ("text", "client_ts_ms"),
    ClientKind.SWITCH_IDENTITY: ("identity_index",),
    ClientKind.ANNOTATE: ("kind", "target_message_id", "body"),
    ClientKind.SET_INDICATOR: ("variant",),
    ClientKind.BYE: (),
}


def _canonical_bytes(obj: dict) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")


def encode_frame(frame: ClientFrame | ServerFrame) -> bytes:
    """Canonical byte encoding; structurally equal frames encode identically."""
    if isinstance(frame, ClientFrame):
        envelope = {"v": PROTOCOL_VERSION, "kind": frame.kind.value,
                    "client_seq": frame.client_seq, "body": frame.body}
    elif isinstance(frame, ServerFrame):
        envelope = {"v": PROTOCOL_VERSION, "kind": frame.kind.value,
                    "record_seq": frame.record_seq, "body": frame.body}
    else:
        raise TypeError(f"not a frame: {type(frame)!r}")
    return _canonical_bytes(envelope)


def decode_frame(data: bytes | str) -> ClientFrame | ServerFrame:
    """Inverse of encode_frame. Client and server kinds are disjoint, so the
    frame side is recovered from the kind alone."""
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(MALFORMED, f"invalid utf-8: {exc}") from exc
    try:
        obj = json.loads(data) if data.strip() else None
    except json.JSONDecodeError as exc:
        raise DecodeError(MALFORMED, f"invalid json: {exc}") from exc
    if not isinstance(obj, dict):
        raise DecodeError(MALFORMED, "frame must be a json object")
    if obj.get("v") != PROTOCOL_VERSION:
        raise DecodeError(MALFORMED, f"unsupported protocol version {obj.get('v')!r}")
    kind_name = obj.get("kind")
    if not isinstance(kind_name, str):
        raise DecodeError(MALFORMED, "missing frame kind")
    body = obj.get("body")
    if not isinstance(body, dict):
        raise DecodeError(MALFORMED, "body must be a json object")

    client_kinds = {k.value for k in ClientKind}
    server_kinds = {k.value for k in ServerKind}
    if kind_name in client_kinds:
        seq = obj.get("client_seq")
        if not isinstance(seq, int) or isinstance(seq, bool) or seq < 1:
            raise DecodeError(INVARIANT_VIOLATION, f"client_seq must be a positive integer, got {seq!r}")
        kind = ClientKind(kind_name)
        for fname in _CLIENT_REQUIRED_FIELDS[kind]:
            if fname not in body:
                raise DecodeError(INVARIANT_VIOLATION, f"{kind_name} body missing field {fname!r}")
        return ClientFrame(kind=kind, client_seq=seq, body=body)
    if kind_name in server_kinds:
        seq = obj.get("record_seq")
        if not isinstance(seq, int) or isinstance(seq, bool) or seq < 0:
            raise DecodeError(INVARIANT_VIOLATION, f"record_seq must be a non-negative integer, got {seq!r}")
        return ServerFrame(kind=ServerKind(kind_name), record_seq=seq, body=body)
    raise DecodeError(UNKNOWN_KIND, f"unknown frame kind {kind_name!r}")


# ---------------------------------------------------------------------------
# object <-> dict converters shared by frames and log records

def identity_to_obj(ident: Identity) -> dict:
    return {"display_name": ident.display_name, "role_label": ident.role_label,
            "presented_as_machine": ident.presented_as_machine}


def identity_from_obj(obj: dict) -> Identity:
    return Identity(display_name=obj["display_name"], role_label=obj.get("role_label", ""),
                    presented_as_machine=bool(obj.get("presented_as_machine", False)))


def input_event_to_obj(ev: InputEvent) -> dict:
    return {"kind": ev.kind.value, "client_ts_ms": ev.client_ts_ms,
            "draft_len_after": ev.draft_len_after, "char_count": ev.char_count,
            "chars": ev.chars, "x": ev.x, "y": ev.y}


def input_event_from_obj(obj: dict) -> InputEvent:
    return InputEvent(
        kind=InputKind(obj["kind"]),
        client_ts_ms=int(obj["client_ts_ms"]),
        draft_len_after=int(obj["draft_len_after"]),
        char_count=int(obj.get("char_count", 0)),
        chars=obj.get("chars"),
        x=float(obj.get("x", 0.0)),
        y=float(obj.get("y", 0.0)),
    )


def telemetry_to_obj(t: TelemetrySummary) -> dict:
    return {"pause_before_ms": t.pause_before_ms, "typing_duration_ms": t.typing_duration_ms,
            "char_count": t.char_count, "keystroke_count": t.keystroke_count,
            "erase_count": t.erase_count, "speed_cps": t.speed_cps,
            "iki_mean_ms": t.iki_mean_ms, "iki_stddev_ms": t.iki_stddev_ms,
            "iki_cv": t.iki_cv, "iki_list_ms": list(t.iki_list_ms),
            "mouse_path_px": t.mouse_path_px, "mouse_event_count": t.mouse_event_count}


def telemetry_from_obj(obj: dict) -> TelemetrySummary:
    return TelemetrySummary(
        pause_before_ms=int(obj["pause_before_ms"]),
        typing_duration_ms=int(obj["typing_duration_ms"]),
        char_count=int(obj["char_count"]),
        keystroke_count=int(obj["keystroke_count"]),
        erase_count=int(obj["erase_count"]),
        speed_cps=float(obj["speed_cps"]),
        iki_mean_ms=None if obj["iki_mean_ms"] is None else float(obj["iki_mean_ms"]),
        iki_stddev_ms=None if obj["iki_stddev_ms"] is None else float(obj["iki_stddev_ms"]),
        iki_cv=None if obj["iki_cv"] is None else float(obj["iki_cv"]),
        iki_list_ms=tuple(int(v) for v in obj["iki_list_ms"]),
        mouse_path_px=float(obj["mouse_path_px"]),
        mouse_event_count=int(obj["mouse_event_count"]),
    )


def annotation_to_obj(a: Annotation) -> dict:
    return {"annotation_id": a.annotation_id, "kind": a.kind.value,
            "author_participant_id": a.author_participant_id,
            "target_message_id": a.target_message_id, "ts_server_ms": a.ts_server_ms,
            "body": a.body, "study_internal": a.study_internal}


def annotation_from_obj(obj: dict) -> Annotation:
    return Annotation(
        annotation_id=obj["annotation_id"],
        kind=AnnotationKind(obj["kind"]),
        author_participant_id=obj["author_participant_id"],
        target_message_id=obj["target_message_id"],
        ts_server_ms=int(obj["ts_server_ms"]),
        body=obj["body"],
        study_internal=bool(obj["study_internal"]),
    )


def message_to_obj(m: Message) -> dict:
    # Annotations are carried by their own records; a MESSAGE record stores
    # the message as born (annotation list empty).
    return {"message_id": m.message_id, "session_seq": m.session_seq,
            "author_participant_id": m.author_participant_id,
            "author_identity": identity_to_obj(m.author_identity),
            "text_original": m.text_original, "text_current": m.text_current,
            "submit_ts_client_ms": m.submit_ts_client_ms,
            "submit_ts_server_ms": m.submit_ts_server_ms,
            "telemetry": telemetry_to_obj(m.telemetry)}


def message_from_obj(obj: dict) -> Message:
    return Message(
        message_id=obj["message_id"],
        session_seq=int(obj["session_seq"]),
        author_participant_id=obj["author_participant_id"],
        author_identity=identity_from_obj(obj["author_identity"]),
        text_original=obj["text_original"],
        text_current=obj["text_current"],
        submit_ts_client_ms=int(obj["submit_ts_client_ms"]),
        submit_ts_server_ms=int(obj["submit_ts_server_ms"]),
        telemetry=telemetry_from_obj(obj["telemetry"]),
    )


def policy_to_obj(p: TypingIndicatorPolicy) -> dict:
    return {"session_default": p.session_default.value, "idle_timeout_ms": p.idle_timeout_ms,
            "per_participant_overrides": {k: v.value for k, v in sorted(p.per_participant_overrides.items())},
            "leader_locked": p.leader_locked}


def policy_from_obj(obj: dict) -> TypingIndicatorPolicy:
    from .model import IndicatorVariant
    return TypingIndicatorPolicy(
        session_default=IndicatorVariant(obj["session_default"]),
        idle_timeout_ms=int(obj["idle_timeout_ms"]),
        per_participant_overrides={k: IndicatorVariant(v)
                                   for k, v in obj.get("per_participant_overrides", {}).items()},
        leader_locked=bool(obj.get("leader_locked", False)),
    )


def config_to_obj(cfg: SessionConfig) -> dict:
    return {"session_id": cfg.session_id, "mode": cfg.mode.value,
            "indicator_policy": policy_to_obj(cfg.indicator_policy),
            "max_participants": cfg.max_participants, "rating_scale_max": cfg.rating_scale_max,
            "mouse_sample_interval_ms": cfg.mouse_sample_interval_ms, "title": cfg.title}


def config_from_obj(obj: dict) -> SessionConfig:
    return SessionConfig(
        session_id=obj["session_id"],
        mode=ChatMode(obj["mode"]),
        indicator_policy=policy_from_obj(obj["indicator_policy"]),
        max_participants=int(obj["max_participants"]),
        rating_scale_max=int(obj["rating_scale_max"]),
        mouse_sample_interval_ms=int(obj["mouse_sample_interval_ms"]),
        title=obj.get("title", ""),
    )


def participant_to_obj(p: Participant) -> dict:
    return {"participant_id": p.participant_id, "token_digest": p.token_digest,
            "kind": p.kind.value, "identities": [identity_to_obj(i) for i in p.identities],
            "active_identity_index": p.active_identity_index}


def participant_from_obj(obj: dict) -> Participant:
    return Participant(
        participant_id=obj["participant_id"],
        token_digest=obj["token_digest"],
        kind=ParticipantKind(obj["kind"]),
        identities=tuple(identity_from_obj(i) for i in obj["identities"]),
        active_identity_index=int(obj.get("active_identity_index", 0)),
    )


def encode_record(record: EventRecord) -> bytes:
    """Canonical single-line encoding used for the session log and raw export."""
    envelope = {"v": PROTOCOL_VERSION, "record": record.kind.value,
                "record_seq": record.record_seq, "session_id": record.session_id,
                "server_ts_ms": record.server_ts_ms, "payload": record.payload}
    return _canonical_bytes(envelope)


def decode_record(data: bytes | str) -> EventRecord:
    if isinstance(data, bytes):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise DecodeError(MALFORMED, f"invalid utf-8: {exc}") from exc
    try:
        obj = json.loads(data) if data.strip() else None
    except json.JSONDecodeError as exc:
        raise DecodeError(MALFORMED, f"invalid json: {exc}") from exc
    if not isinstance(obj, dict):
        raise DecodeError(MALFORMED, "record must be a json object")
    if obj.get("v") != PROTOCOL_VERSION:
        raise DecodeError(MALFORMED, f"unsupported protocol version {obj.get('v')!r}")
    kind_name = obj.get("record")
    try:
        kind = RecordKind(kind_name)
    except ValueError:
        raise DecodeError(UNKNOWN_KIND, f"unknown record kind {kind_name!r}") from None
    seq = obj.get("record_seq")
    if not isinstance(seq, int) or isinstance(seq, bool) or seq < 1:
        raise DecodeError(INVARIANT_VIOLATION, f"record_seq must be a positive integer, got {seq!r}")
    payload = obj.get("payload")
    if not isinstance(payload, dict):
        raise DecodeError(MALFORMED, "payload must be a json object")
    session_id = obj.get("session_id")
    if not isinstance(session_id, str) or not session_id:
        raise DecodeError(INVARIANT_VIOLATION, "session_id must be a non-empty string")
    ts = obj.get("server_ts_ms")
    if not isinstance(ts, int) or isinstance(ts, bool):
        raise DecodeError(INVARIANT_VIOLATION, "server_ts_ms must be an integer")
    return EventRecord(record_seq=seq, session_id=session_id, kind=kind,
                       server_ts_ms=ts, payload=payload)


# ---------------------------------------------------------------------------
# per-viewer visibility

def policy_view(policy: TypingIndicatorPolicy, viewer_id: str) -> dict:
    """Indicator policy as shown to one participant. Override keys are
    participant ids, so the raw map is never sent to clients."""
    return {"session_default": policy.session_default.value,
            "idle_timeout_ms": policy.idle_timeout_ms,
            "leader_locked": policy.leader_locked,
            "your_variant": policy.effective(viewer_id).value}


def message_view(message: Message, viewer: Participant) -> dict:
    """Message as delivered in frames. Peers are identified by displayed
    identity only; participant ids stay server-side (and in exports)."""
    view = {"message_id": message.message_id, "session_seq": message.session_seq,
            "author": identity_to_obj(message.author_identity),
            "text": message.text_current,
            "submit_ts_server_ms": message.submit_ts_server_ms}
    if viewer.kind in (ParticipantKind.WIZARD, ParticipantKind.LEADER):
        view["text_original"] = message.text_original
        view["annotations"] = [_annotation_view(a) for a in message.annotations]
    return view


def _annotation_view(a: Annotation) -> dict:
    return {"annotation_id": a.annotation_id, "kind": a.kind.value, "body": a.body,
            "ts_server_ms": a.ts_server_ms, "study_internal": a.study_internal}


def annotation_visible_to(annotation: Annotation, viewer: Participant) -> bool:
    if not annotation.study_internal:
        return True
    return (viewer.kind in (ParticipantKind.WIZARD, ParticipantKind.LEADER)
            or viewer.participant_id == annotation.author_participant_id)


def visibility_filter(
    mode: ChatMode,
    record: EventRecord,
    viewer: Participant,
    *,
    author: Participant | None = None,
    message: Message | None = None,
    policy: TypingIndicatorPolicy | None = None,
) -> list[ServerFrame]:
    """Frames the viewer may receive for one log record.

    `author` is the participant the record is about (its current roster
    value), `message` the derived message for MESSAGE/ANNOTATION records,
    `policy` the policy now in force for INDICATOR_CHANGED records.
    """
    seq = record.record_seq
    kind = record.kind

    if kind in (RecordKind.SESSION_CREATED, RecordKind.SESSION_CLOSED, RecordKind.IDENTITY_SWITCH):
        return []  # identity switches are deliberately invisible

    if kind == RecordKind.INPUT_EVENT:
        assert author is not None
        if viewer.participant_id == author.participant_id:
            return []  # the writer already sees their own draft
        event = input_event_from_obj(record.payload["event"])
        if mode != ChatMode.SYNC or event.kind not in (InputKind.KEY_DOWN, InputKind.KEY_ERASE):
            return []
        body = {"author": identity_to_obj(author.active_identity),
                "event_kind": event.kind.value, "char_count": event.char_count,
                "chars": event.chars, "draft_len_after": event.draft_len_after,
                "client_ts_ms": event.client_ts_ms}
        return [ServerFrame(ServerKind.PEER_KEYSTROKE, seq, body)]

    if kind == RecordKind.TYPING_STATE:
        assert author is not None
        if viewer.participant_id == author.participant_id:
            return []
        body = {"who": identity_to_obj(author.active_identity),
                "state": record.payload["state"]}
        return [ServerFrame(ServerKind.TYPING_STATE, seq, body)]

    if kind == RecordKind.MESSAGE:
        assert message is not None
        return [ServerFrame(ServerKind.MESSAGE_POSTED, seq, message_view(message, viewer))]

    if kind == RecordKind.ANNOTATION:
        assert message is not None
        annotation = annotation_from_obj(record.payload["annotation"])
        if not annotation_visible_to(annotation, viewer):
            return []
        body = {"message_id": message.message_id, "text": message.text_current,
                "edit_count": sum(1 for a in message.annotations if a.kind == AnnotationKind.EDIT)}
        if (viewer.kind in (ParticipantKind.WIZARD, ParticipantKind.LEADER)
                or viewer.participant_id == annotation.author_participant_id):
            from .model import latest_rating
            body["annotation"] = _annotation_view(annotation)
            body["rating_latest"] = latest_rating(message.annotations)
        return [ServerFrame(ServerKind.MESSAGE_UPDATED, seq, body)]

    if kind == RecordKind.JOIN:
        assert author is not None
        if viewer.participant_id == author.participant_id:
            return []  # the joiner receives WELCOME instead
        return [ServerFrame(ServerKind.PEER_JOINED, seq,
                            {"identity": identity_to_obj(author.active_identity)})]

    if kind == RecordKind.LEAVE:
        assert author is not None
        if viewer.participant_id == author.participant_id:
            return []
        return [ServerFrame(ServerKind.PEER_LEFT, seq,
                            {"identity": identity_to_obj(author.active_identity)})]

    if kind == RecordKind.INDICATOR_CHANGED:
        assert policy is not None
        return [ServerFrame(ServerKind.INDICATOR_CHANGED, seq,
                            policy_view(policy, viewer.participant_id))]

    raise ValueError(f"unhandled record kind {kind!r}")


def error_frame(code: str, message: str, in_reply_to: int | None = None) -> ServerFrame:
    body: dict = {"code": code, "message": message}
    if in_reply_to is not None:
        body["in_reply_to"] = in_reply_to
    return ServerFrame(ServerKind.ERROR, 0, body)
