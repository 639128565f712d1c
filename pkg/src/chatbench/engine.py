"""Per-session state machine.

Commands validate, append records to the session log, and fold each
record into state through a single `_apply` path; replaying a log runs
the same fold, so a fresh engine fed the records reproduces the live
state field for field at every prefix. Frame fan-out is computed per
record per connected viewer via the wire-protocol visibility filter.

One engine instance is a single serialization domain: callers must
apply operations on one session in a total order (the gateway holds a
per-session lock). Distinct sessions share nothing.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field, replace

from . import telemetry
from .model import (
    Annotation,
    AnnotationKind,
    ChatMode,
    EventRecord,
    IndicatorVariant,
    InputEvent,
    InputKind,
    Message,
    Participant,
    ParticipantKind,
    RecordKind,
    SessionConfig,
    TypingIndicatorPolicy,
    TypingState,
    token_digest,
    validate_input_event,
    validate_participant,
    validate_session_config,
)
from .protocol import (
    ServerFrame,
    annotation_from_obj,
    annotation_to_obj,
    config_from_obj,
    config_to_obj,
    identity_to_obj,
    input_event_from_obj,
    input_event_to_obj,
    message_from_obj,
    message_to_obj,
    message_view,
    participant_from_obj,
    participant_to_obj,
    policy_from_obj,
    policy_to_obj,
    policy_view,
    visibility_filter,
)

# (recipient participant_id, frame) pairs, in delivery order
Delivery = tuple[str, ServerFrame]


class EngineError(Exception):
    """Command rejection; code is one of the protocol error codes."""

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


AUTH_FAILED = "AUTH_FAILED"
SESSION_FULL = "SESSION_FULL"
SESSION_CLOSED = "SESSION_CLOSED"
NOT_CONNECTED = "NOT_CONNECTED"
MALFORMED_EVENT = "MALFORMED_EVENT"
EMPTY_MESSAGE = "EMPTY_MESSAGE"
UNKNOWN_MESSAGE = "UNKNOWN_MESSAGE"
RATING_OUT_OF_RANGE = "RATING_OUT_OF_RANGE"
FORBIDDEN = "FORBIDDEN"
INDEX_OUT_OF_RANGE = "INDEX_OUT_OF_RANGE"
INVALID_CONFIG = "INVALID_CONFIG"
CORRUPT_LOG = "CORRUPT_LOG"


def derive_typing_state(
    policy: TypingIndicatorPolicy,
    draft_len: int,
    last_input_ts_ms: int | None,
    now_ms: int,
    *,
    participant_id: str | None = None,
) -> TypingState:
    """Indicator state for one participant under the effective policy.

    OFF never reports anything; TYPING while key input is fresher than
    the idle timeout and a draft exists; TYPING_AND_PAUSE additionally
    reports PAUSED once the timeout elapses with a non-empty draft.
    """
    variant = policy.effective(participant_id) if participant_id else policy.session_default
    if variant == IndicatorVariant.OFF or draft_len <= 0 or last_input_ts_ms is None:
        return TypingState.IDLE
    if now_ms - last_input_ts_ms < policy.idle_timeout_ms:
        return TypingState.TYPING
    if variant == IndicatorVariant.TYPING_AND_PAUSE:
        return TypingState.PAUSED
    return TypingState.IDLE


@dataclass
class RosterEntry:
    participant: Participant
    connected: bool = False
    draft_len: int = 0
    last_key_ts_ms: int | None = None      # server clock; drives indicator decay
    last_client_ts_ms: int | None = None   # monotonicity guard on the client stream
    join_client_ts_ms: int | None = None   # client clock at the latest join
    clock_offset_ms: int | None = None     # client_ts - server_ts at the latest join


@dataclass
class SessionState:
    config: SessionConfig
    policy: TypingIndicatorPolicy
    roster: dict[str, RosterEntry]
    typing_states: dict[str, TypingState]
    messages: list[Message] = field(default_factory=list)
    next_record_seq: int = 1
    closed: bool = False


class SessionEngine:
    """Owns one session's state, log, and frame fan-out."""

    def __init__(self) -> None:
        self.state: SessionState | None = None
        self.records: list[EventRecord] = []
        self.record_sink = None  # callable(EventRecord), e.g. the durable log
        self._last_server_ts = 0
        # engine-side indexes rebuilt deterministically from the log
        self._pending_events: dict[str, list[InputEvent]] = {}
        self._last_join_seq: dict[str, int] = {}
        self._message_record_seq: dict[str, int] = {}

    # -- construction -------------------------------------------------------

    @classmethod
    def create(
        cls,
        config: SessionConfig,
        participants: list[Participant],
        *,
        now_ms: int,
        record_sink=None,
    ) -> SessionEngine:
        errors = validate_session_config(config)
        for p in participants:
            errors.extend(validate_participant(p))
        ids = [p.participant_id for p in participants]
        if len(set(ids)) != len(ids):
            errors.append("participant ids must be unique")
        if errors:
            raise EngineError(INVALID_CONFIG, "; ".join(errors))
        engine = cls()
        engine.record_sink = record_sink
        engine._commit(
            RecordKind.SESSION_CREATED,
            {"config": config_to_obj(config),
             "participants": [participant_to_obj(p) for p in participants]},
            now_ms,
            session_id=config.session_id,
        )
        return engine

    @classmethod
    def from_records(cls, records: list[EventRecord], record_sink=None) -> SessionEngine:
        """Rebuild state by replaying an existing log."""
        if not records or records[0].kind != RecordKind.SESSION_CREATED:
            raise EngineError(CORRUPT_LOG, "log must start with SESSION_CREATED")
        engine = cls()
        for expected, record in enumerate(records, start=1):
            if record.record_seq != expected:
                raise EngineError(
                    CORRUPT_LOG,
                    f"record_seq {record.record_seq} where {expected} expected")
            try:
                engine._apply(record)
            except EngineError:
                raise
            except Exception as exc:
                raise EngineError(CORRUPT_LOG, f"replay failed at record {expected}: {exc}") from exc
            engine.records.append(record)
            engine._last_server_ts = record.server_ts_ms
        engine.record_sink = record_sink
        return engine

    # -- log append ---------------------------------------------------------

    def _commit(self, kind: RecordKind, payload: dict, now_ms: int, *, session_id: str | None = None) -> EventRecord:
        sid = session_id if session_id is not None else self.state.config.session_id
        seq = 1 if self.state is None else self.state.next_record_seq
        ts = max(int(now_ms), self._last_server_ts)  # wall clock, clamped monotone
        record = EventRecord(record_seq=seq, session_id=sid, kind=kind,
                             server_ts_ms=ts, payload=payload)
        self._apply(record)
        self.records.append(record)
        self._last_server_ts = ts
        if self.record_sink is not None:
            self.record_sink(record)
        return record

    # -- the single state fold ----------------------------------------------

    def _apply(self, record: EventRecord) -> None:
        kind = record.kind
        if kind == RecordKind.SESSION_CREATED:
            config = config_from_obj(record.payload["config"])
            participants = [participant_from_obj(o) for o in record.payload["participants"]]
            self.state = SessionState(
                config=config,
                policy=config.indicator_policy,
                roster={p.participant_id: RosterEntry(participant=p) for p in participants},
                typing_states={p.participant_id: TypingState.IDLE for p in participants},
            )
            self.state.next_record_seq = 2
            return

        state = self.state
        assert state is not None, "log must start with SESSION_CREATED"
        state.next_record_seq = record.record_seq + 1

        if kind == RecordKind.JOIN:
            pid = record.payload["participant_id"]
            client_ts = int(record.payload["client_ts_ms"])
            entry = state.roster[pid]
            entry.connected = True
            entry.join_client_ts_ms = client_ts
            entry.clock_offset_ms = client_ts - record.server_ts_ms
            self._last_join_seq[pid] = record.record_seq

        elif kind == RecordKind.LEAVE:
            pid = record.payload["participant_id"]
            entry = state.roster[pid]
            entry.connected = False
            entry.draft_len = 0
            state.typing_states[pid] = TypingState.IDLE
            self._pending_events[pid] = []

        elif kind == RecordKind.IDENTITY_SWITCH:
            pid = record.payload["participant_id"]
            index = int(record.payload["identity_index"])
            entry = state.roster[pid]
            entry.participant = entry.participant.with_identity_index(index)

        elif kind == RecordKind.INPUT_EVENT:
            pid = record.payload["participant_id"]
            event = input_event_from_obj(record.payload["event"])
            entry = state.roster[pid]
            entry.draft_len = event.draft_len_after
            entry.last_client_ts_ms = event.client_ts_ms
            if event.kind in (InputKind.KEY_DOWN, InputKind.KEY_ERASE):
                entry.last_key_ts_ms = record.server_ts_ms
            self._pending_events.setdefault(pid, []).append(event)

        elif kind == RecordKind.TYPING_STATE:
            pid = record.payload["participant_id"]
            state.typing_states[pid] = TypingState(record.payload["state"])

        elif kind == RecordKind.MESSAGE:
            message = message_from_obj(record.payload["message"])
            state.messages.append(message)
            entry = state.roster[message.author_participant_id]
            entry.draft_len = 0
            entry.last_client_ts_ms = message.submit_ts_client_ms
            self._pending_events[message.author_participant_id] = []
            self._message_record_seq[message.message_id] = record.record_seq

        elif kind == RecordKind.ANNOTATION:
            annotation = annotation_from_obj(record.payload["annotation"])
            for i, msg in enumerate(state.messages):
                if msg.message_id == annotation.target_message_id:
                    updated = replace(msg, annotations=msg.annotations + (annotation,))
                    if annotation.kind == AnnotationKind.EDIT:
                        updated = replace(updated, text_current=str(annotation.body))
                    state.messages[i] = updated
                    break
            else:
                raise KeyError(f"annotation targets unknown message {annotation.target_message_id}")

        elif kind == RecordKind.INDICATOR_CHANGED:
            state.policy = policy_from_obj(record.payload["policy"])
            for pid in state.roster:
                if state.policy.effective(pid) == IndicatorVariant.OFF:
                    state.typing_states[pid] = TypingState.IDLE

        elif kind == RecordKind.SESSION_CLOSED:
            state.closed = True
            for pid, entry in state.roster.items():
                entry.connected = False
                entry.draft_len = 0
                state.typing_states[pid] = TypingState.IDLE
                self._pending_events[pid] = []

        else:
            raise ValueError(f"unhandled record kind {kind!r}")

    # -- fan-out ------------------------------------------------------------

    def _deliveries(self, record: EventRecord, *, author_id: str | None = None,
                    message: Message | None = None) -> list[Delivery]:
        state = self.state
        author = state.roster[author_id].participant if author_id else None
        out: list[Delivery] = []
        for pid, entry in state.roster.items():
            if not entry.connected:
                continue
            frames = visibility_filter(
                state.config.mode, record, entry.participant,
                author=author, message=message, policy=state.policy)
            out.extend((pid, f) for f in frames)
        return out

    def _typing_transition(self, pid: str, now_ms: int) -> list[Delivery]:
        state = self.state
        entry = state.roster[pid]
        new = derive_typing_state(state.policy, entry.draft_len, entry.last_key_ts_ms,
                                  now_ms, participant_id=pid)
        if new == state.typing_states[pid]:
            return []
        if state.policy.effective(pid) == IndicatorVariant.OFF:
            return []  # OFF emits nothing, ever
        record = self._commit(RecordKind.TYPING_STATE,
                              {"participant_id": pid, "state": new.value}, now_ms)
        return self._deliveries(record, author_id=pid)

    # -- commands -----------------------------------------------------------

    def join(self, participant_id: str, token: str, client_ts_ms: int, now_ms: int) -> list[Delivery]:
        state = self.state
        if state.closed:
            raise EngineError(SESSION_CLOSED, "session is closed")
        entry = state.roster.get(participant_id)
        if entry is None or entry.participant.token_digest != token_digest(token):
            raise EngineError(AUTH_FAILED, "unknown participant or bad token")
        connected = sum(1 for e in state.roster.values() if e.connected)
        if not entry.connected and connected >= state.config.max_participants:
            raise EngineError(SESSION_FULL,
                              f"{connected} of {state.config.max_participants} slots in use")
        record = self._commit(RecordKind.JOIN,
                              {"participant_id": participant_id, "client_ts_ms": int(client_ts_ms)},
                              now_ms)
        return self._deliveries(record, author_id=participant_id)

    def leave(self, participant_id: str, now_ms: int) -> list[Delivery]:
        state = self.state
        entry = state.roster.get(participant_id)
        if entry is None or not entry.connected:
            return []
        record = self._commit(RecordKind.LEAVE, {"participant_id": participant_id}, now_ms)
        return self._deliveries(record, author_id=participant_id)

    def switch_identity(self, participant_id: str, identity_index: int, now_ms: int) -> list[Delivery]:
        entry = self._connected_entry(participant_id)
        p = entry.participant
        if p.kind not in (ParticipantKind.WIZARD, ParticipantKind.LEADER):
            raise EngineError(FORBIDDEN, f"{p.kind.value} may not switch identity")
        if not (0 <= identity_index < len(p.identities)):
            raise EngineError(INDEX_OUT_OF_RANGE,
                              f"identity_index {identity_index} out of range 0..{len(p.identities) - 1}")
        record = self._commit(RecordKind.IDENTITY_SWITCH,
                              {"participant_id": participant_id, "identity_index": identity_index},
                              now_ms)
        return self._deliveries(record, author_id=participant_id)  # always empty by design

    def ingest_input(self, participant_id: str, event: InputEvent, now_ms: int) -> list[Delivery]:
        state = self.state
        entry = self._connected_entry(participant_id)
        problems = validate_input_event(event)
        if problems:
            raise EngineError(MALFORMED_EVENT, "; ".join(problems))
        if entry.last_client_ts_ms is not None and event.client_ts_ms < entry.last_client_ts_ms:
            raise EngineError(MALFORMED_EVENT,
                              f"client_ts_ms regressed ({event.client_ts_ms} < {entry.last_client_ts_ms})")
        expected = entry.draft_len
        if event.kind == InputKind.KEY_DOWN:
            expected += event.char_count
        elif event.kind == InputKind.KEY_ERASE:
            if event.char_count > entry.draft_len:
                raise EngineError(MALFORMED_EVENT,
                                  f"erase of {event.char_count} underflows draft of {entry.draft_len}")
            expected -= event.char_count
        if event.draft_len_after != expected:
            raise EngineError(MALFORMED_EVENT,
                              f"draft_len_after {event.draft_len_after} inconsistent, expected {expected}")
        if state.config.mode == ChatMode.SYNC:
            if event.kind == InputKind.KEY_DOWN and event.chars is None:
                raise EngineError(MALFORMED_EVENT, "SYNC KEY_DOWN must carry the inserted characters")
        elif event.chars is not None:
            # drafts never leave the writer in quasi-sync; drop content defensively
            event = replace(event, chars=None)

        record = self._commit(RecordKind.INPUT_EVENT,
                              {"participant_id": participant_id, "event": input_event_to_obj(event)},
                              now_ms)
        deliveries = self._deliveries(record, author_id=participant_id)
        deliveries.extend(self._typing_transition(participant_id, now_ms))
        return deliveries

    def submit_message(self, participant_id: str, draft_text: str, client_ts_ms: int, now_ms: int) -> list[Delivery]:
        state = self.state
        entry = self._connected_entry(participant_id)
        text = draft_text.rstrip("\r\n")
        if not text:
            raise EngineError(EMPTY_MESSAGE, "message text is empty")
        # the submit timestamp joins the participant's monotone client stream
        submit_ts = int(client_ts_ms)
        if entry.last_client_ts_ms is not None:
            submit_ts = max(submit_ts, entry.last_client_ts_ms)

        window = self.build_window(participant_id, submit_ts)
        summary = telemetry.summarize(window, text)
        session_seq = len(state.messages) + 1
        message = Message(
            message_id=f"{state.config.session_id}-m{session_seq}",
            session_seq=session_seq,
            author_participant_id=participant_id,
            author_identity=entry.participant.active_identity,
            text_original=text,
            text_current=text,
            submit_ts_client_ms=submit_ts,
            submit_ts_server_ms=0,  # filled below from the record clock
            telemetry=summary,
        )
        ts = max(int(now_ms), self._last_server_ts)
        message = replace(message, submit_ts_server_ms=ts)
        record = self._commit(RecordKind.MESSAGE, {"message": message_to_obj(message)}, now_ms)
        deliveries = self._deliveries(record, author_id=participant_id, message=message)
        deliveries.extend(self._typing_transition(participant_id, now_ms))
        return deliveries

    def annotate(self, participant_id: str, kind: AnnotationKind, target_message_id: str,
                 body: str | int, now_ms: int, study_internal: bool | None = None) -> list[Delivery]:
        state = self.state
        entry = self._connected_entry(participant_id)
        target = next((m for m in state.messages if m.message_id == target_message_id), None)
        if target is None:
            raise EngineError(UNKNOWN_MESSAGE, f"no message {target_message_id!r}")
        privileged = entry.participant.kind in (ParticipantKind.WIZARD, ParticipantKind.LEADER)
        if kind == AnnotationKind.EDIT:
            if not privileged:
                raise EngineError(FORBIDDEN, "only wizards and leaders may edit")
            body = str(body)
        elif kind == AnnotationKind.RATING:
            try:
                body = int(body)
            except (TypeError, ValueError):
                raise EngineError(RATING_OUT_OF_RANGE, f"rating must be an integer, got {body!r}") from None
            if not (1 <= body <= state.config.rating_scale_max):
                raise EngineError(RATING_OUT_OF_RANGE,
                                  f"rating {body} outside 1..{state.config.rating_scale_max}")
        else:
            body = str(body)
        # Ratings and comments default to study-internal; only wizards and
        # leaders may override that. Edits are always visible: everyone must
        # keep seeing the same canonical text.
        internal = kind != AnnotationKind.EDIT
        if study_internal is not None and privileged and kind != AnnotationKind.EDIT:
            internal = study_internal

        ts = max(int(now_ms), self._last_server_ts)
        annotation = Annotation(
            annotation_id=f"{state.config.session_id}-a{state.next_record_seq}",
            kind=kind,
            author_participant_id=participant_id,
            target_message_id=target_message_id,
            ts_server_ms=ts,
            body=body,
            study_internal=internal,
        )
        record = self._commit(RecordKind.ANNOTATION, {"annotation": annotation_to_obj(annotation)}, now_ms)
        updated = next(m for m in state.messages if m.message_id == target_message_id)
        return self._deliveries(record, author_id=participant_id, message=updated)

    def set_policy(self, new_policy: TypingIndicatorPolicy, changed_by: str, now_ms: int) -> list[Delivery]:
        """Replace the whole indicator policy (leader/admin surface)."""
        from .model import validate_indicator_policy
        problems = validate_indicator_policy(new_policy)
        if problems:
            raise EngineError(INVALID_CONFIG, "; ".join(problems))
        record = self._commit(RecordKind.INDICATOR_CHANGED,
                              {"policy": policy_to_obj(new_policy), "changed_by": changed_by},
                              now_ms)
        return self._deliveries(record)

    def set_own_indicator(self, participant_id: str, variant: IndicatorVariant, now_ms: int) -> list[Delivery]:
        """A communicator configures the indicator for their own typing."""
        state = self.state
        self._connected_entry(participant_id)
        if state.policy.leader_locked:
            raise EngineError(FORBIDDEN, "indicator policy is locked by the study leader")
        overrides = dict(state.policy.per_participant_overrides)
        overrides[participant_id] = variant
        new_policy = replace(state.policy, per_participant_overrides=overrides)
        return self.set_policy(new_policy, participant_id, now_ms)

    def tick(self, now_ms: int) -> list[Delivery]:
        """Periodic re-evaluation so indicators decay without new input."""
        deliveries: list[Delivery] = []
        for pid, entry in self.state.roster.items():
            if entry.connected:
                deliveries.extend(self._typing_transition(pid, now_ms))
        return deliveries

    def close(self, now_ms: int) -> list[Delivery]:
        if self.state.closed:
            return []
        self._commit(RecordKind.SESSION_CLOSED, {}, now_ms)
        return []

    # -- views and derived data ---------------------------------------------

    def _connected_entry(self, participant_id: str) -> RosterEntry:
        entry = self.state.roster.get(participant_id)
        if entry is None or not entry.connected:
            raise EngineError(NOT_CONNECTED, f"participant {participant_id!r} is not connected")
        return entry

    def build_window(self, participant_id: str, submit_ts_ms: int) -> telemetry.EventWindow:
        """Reconstruct the telemetry window for a participant's next
        submission, entirely on that participant's client-clock axis.

        The window starts at the later of the participant's join and the
        last turn visible to them before their first keystroke (their own
        turns carry a native client timestamp; peers' turns are mapped
        through the clock offset estimated at join).
        """
        state = self.state
        entry = state.roster[participant_id]
        events = tuple(self._pending_events.get(participant_id, ()))
        key_ts = [ev.client_ts_ms for ev in events
                  if ev.kind in (InputKind.KEY_DOWN, InputKind.KEY_ERASE)]
        boundary = key_ts[0] if key_ts else submit_ts_ms

        start = entry.join_client_ts_ms if entry.join_client_ts_ms is not None else 0
        join_seq = self._last_join_seq.get(participant_id, 0)
        for msg in state.messages:
            if self._message_record_seq.get(msg.message_id, 0) <= join_seq:
                continue  # visible before (re)join; the join timestamp covers it
            if msg.author_participant_id == participant_id:
                ts = msg.submit_ts_client_ms
            elif entry.clock_offset_ms is not None:
                ts = msg.submit_ts_server_ms + entry.clock_offset_ms
            else:
                continue
            if ts <= boundary:
                start = max(start, ts)
        return telemetry.EventWindow(events=events, window_start_ts_ms=start,
                                     submit_ts_ms=submit_ts_ms)

    def welcome_body(self, participant_id: str) -> dict:
        """Snapshot handed to a participant on (re)join: config view, own
        account, peer identities, and full durable message history."""
        state = self.state
        entry = state.roster[participant_id]
        me = entry.participant
        peers = []
        for pid, other in state.roster.items():
            if pid == participant_id:
                continue
            peers.append({
                "identity": identity_to_obj(other.participant.active_identity),
                "connected": other.connected,
                "typing_state": state.typing_states[pid].value,
            })
        visible_messages = []
        for msg in state.messages:
            view = message_view(msg, me)
            visible_messages.append(view)
        return {
            "session": {
                "session_id": state.config.session_id,
                "title": state.config.title,
                "mode": state.config.mode.value,
                "rating_scale_max": state.config.rating_scale_max,
                "mouse_sample_interval_ms": state.config.mouse_sample_interval_ms,
                "indicator": policy_view(state.policy, participant_id),
            },
            "you": {
                "participant_id": me.participant_id,
                "kind": me.kind.value,
                "identities": [identity_to_obj(i) for i in me.identities],
                "active_identity_index": me.active_identity_index,
            },
            "peers": peers,
            "messages": visible_messages,
            "record_seq": len(self.records),
        }

    def snapshot(self) -> SessionState:
        return copy.deepcopy(self.state)


def replay_with_telemetry(records: list[EventRecord]):
    """Replay a log, recomputing every message's telemetry from the raw
    input events as of its submission (the window is built on the state
    just before the MESSAGE record applies).

    Returns (engine, {message_id: recomputed TelemetrySummary}).
    """
    if not records or records[0].kind != RecordKind.SESSION_CREATED:
        raise EngineError(CORRUPT_LOG, "log must start with SESSION_CREATED")
    engine = SessionEngine()
    recomputed = {}
    for expected, record in enumerate(records, start=1):
        if record.record_seq != expected:
            raise EngineError(CORRUPT_LOG,
                              f"record_seq {record.record_seq} where {expected} expected")
        if record.kind == RecordKind.MESSAGE:
            message = message_from_obj(record.payload["message"])
            window = engine.build_window(message.author_participant_id,
                                         message.submit_ts_client_ms)
            recomputed[message.message_id] = telemetry.summarize(window, message.text_original)
        try:
            engine._apply(record)
        except Exception as exc:
            raise EngineError(CORRUPT_LOG, f"replay failed at record {expected}: {exc}") from exc
        engine.records.append(record)
        engine._last_server_ts = record.server_ts_ms
    return engine, recomputed
