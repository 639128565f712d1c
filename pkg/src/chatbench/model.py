"""Shared domain types and their validation. Pure values, no I/O.

Everything here is immutable after construction; mutation happens by
replacing values (dataclasses.replace) inside the session engine.
Constructors stay permissive so that data arriving off the wire can be
represented first and validated explicitly second.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field, replace
from enum import Enum


class ChatMode(str, Enum):
    QUASI_SYNC = "QUASI_SYNC"  # only submitted turns are transmitted
    SYNC = "SYNC"              # every keystroke is relayed live


class IndicatorVariant(str, Enum):
    OFF = "OFF"
    TYPING_ONLY = "TYPING_ONLY"
    TYPING_AND_PAUSE = "TYPING_AND_PAUSE"


class ParticipantKind(str, Enum):
    SUBJECT = "SUBJECT"
    WIZARD = "WIZARD"
    LEADER = "LEADER"
    BOT = "BOT"


class InputKind(str, Enum):
    KEY_DOWN = "KEY_DOWN"
    KEY_ERASE = "KEY_ERASE"
    MOUSE_MOVE = "MOUSE_MOVE"
    FOCUS = "FOCUS"
    BLUR = "BLUR"


KEY_KINDS = (InputKind.KEY_DOWN, InputKind.KEY_ERASE)


class TypingState(str, Enum):
    IDLE = "IDLE"
    TYPING = "TYPING"
    PAUSED = "PAUSED"


class AnnotationKind(str, Enum):
    EDIT = "EDIT"
    RATING = "RATING"
    COMMENT = "COMMENT"


class RecordKind(str, Enum):
    SESSION_CREATED = "SESSION_CREATED"
    JOIN = "JOIN"
    LEAVE = "LEAVE"
    IDENTITY_SWITCH = "IDENTITY_SWITCH"
    INPUT_EVENT = "INPUT_EVENT"
    TYPING_STATE = "TYPING_STATE"
    MESSAGE = "MESSAGE"
    ANNOTATION = "ANNOTATION"
    INDICATOR_CHANGED = "INDICATOR_CHANGED"
    SESSION_CLOSED = "SESSION_CLOSED"


@dataclass(frozen=True)
class TypingIndicatorPolicy:
    session_default: IndicatorVariant = IndicatorVariant.TYPING_ONLY
    idle_timeout_ms: int = 3000
    per_participant_overrides: dict[str, IndicatorVariant] = field(default_factory=dict)
    leader_locked: bool = False

    def effective(self, participant_id: str) -> IndicatorVariant:
        """Variant in force for one participant's typing behaviour."""
        if self.leader_locked:
            return self.session_default
        return self.per_participant_overrides.get(participant_id, self.session_default)


@dataclass(frozen=True)
class SessionConfig:
    session_id: str
    mode: ChatMode
    indicator_policy: TypingIndicatorPolicy = field(default_factory=TypingIndicatorPolicy)
    max_participants: int = 8
    rating_scale_max: int = 5
    mouse_sample_interval_ms: int = 200
    title: str = ""


@dataclass(frozen=True)
class Identity:
    """The displayed persona: what peers see instead of the real account."""

    display_name: str
    role_label: str = ""
    presented_as_machine: bool = False


@dataclass(frozen=True)
class Participant:
    participant_id: str
    token_digest: str  # sha256 hex of the join token; plaintext never stored
    kind: ParticipantKind
    identities: tuple[Identity, ...]
    active_identity_index: int = 0

    @property
    def active_identity(self) -> Identity:
        return self.identities[self.active_identity_index]

    def with_identity_index(self, index: int) -> Participant:
        return replace(self, active_identity_index=index)


def token_digest(token: str) -> str:
    return hashlib.sha256(token.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class InputEvent:
    """One raw client-side event. Timestamps are the client's own clock.

    payload semantics by kind:
      KEY_DOWN   -- char_count inserted characters (>1 for paste); chars holds
                    the inserted text only when the session mode transmits it
      KEY_ERASE  -- char_count erased characters
      MOUSE_MOVE -- (x, y) pixel coordinates
      FOCUS/BLUR -- no payload
    """

    kind: InputKind
    client_ts_ms: int
    draft_len_after: int
    char_count: int = 0
    chars: str | None = None
    x: float = 0.0
    y: float = 0.0


@dataclass(frozen=True)
class TelemetrySummary:
    """Per-message typing/mouse performance metrics.

    The three iki_* aggregates are None when fewer than two key events
    were seen; iki_cv is additionally None when the mean interval is 0.
    """

    pause_before_ms: int
    typing_duration_ms: int
    char_count: int
    keystroke_count: int
    erase_count: int
    speed_cps: float
    iki_mean_ms: float | None
    iki_stddev_ms: float | None
    iki_cv: float | None
    iki_list_ms: tuple[int, ...]
    mouse_path_px: float
    mouse_event_count: int


@dataclass(frozen=True)
class Annotation:
    annotation_id: str
    kind: AnnotationKind
    author_participant_id: str
    target_message_id: str
    ts_server_ms: int
    body: str | int
    study_internal: bool = True


@dataclass(frozen=True)
class Message:
    message_id: str
    session_seq: int
    author_participant_id: str
    author_identity: Identity  # snapshot at submission; later switches don't rewrite it
    text_original: str
    text_current: str
    submit_ts_client_ms: int
    submit_ts_server_ms: int
    telemetry: TelemetrySummary
    annotations: tuple[Annotation, ...] = ()


@dataclass(frozen=True)
class EventRecord:
    """One append-only log entry; record_seq totally orders a session."""

    record_seq: int
    session_id: str
    kind: RecordKind
    server_ts_ms: int
    payload: dict


# ---------------------------------------------------------------------------
# validation

def validate_indicator_policy(policy: TypingIndicatorPolicy) -> list[str]:
    errors = []
    if policy.idle_timeout_ms <= 0:
        errors.append("indicator_policy.idle_timeout_ms must be > 0")
    if policy.leader_locked and policy.per_participant_overrides:
        errors.append("indicator_policy: leader_locked forbids per-participant overrides")
    return errors


def validate_session_config(cfg: SessionConfig) -> list[str]:
    """Empty list means the config is acceptable."""
    errors = []
    if not cfg.session_id:
        errors.append("session_id must be non-empty")
    if cfg.max_participants < 2:
        errors.append("max_participants must be >= 2")
    if cfg.rating_scale_max < 1:
        errors.append("rating_scale_max must be >= 1")
    if cfg.mouse_sample_interval_ms <= 0:
        errors.append("mouse_sample_interval_ms must be > 0")
    errors.extend(validate_indicator_policy(cfg.indicator_policy))
    return errors


def validate_participant(p: Participant) -> list[str]:
    errors = []
    if not p.identities:
        errors.append(f"{p.participant_id}: at least one identity required")
    elif not (0 <= p.active_identity_index < len(p.identities)):
        errors.append(f"{p.participant_id}: active_identity_index out of range")
    if p.kind == ParticipantKind.SUBJECT and len(p.identities) != 1:
        errors.append(f"{p.participant_id}: a SUBJECT has exactly one identity")
    for ident in p.identities:
        if not ident.display_name:
            errors.append(f"{p.participant_id}: identity display_name must be non-empty")
    return errors


def validate_input_event(ev: InputEvent) -> list[str]:
    """Intrinsic checks only; stream-level checks (timestamp monotonicity,
    draft arithmetic) live in the session engine where the stream is known."""
    errors = []
    if ev.client_ts_ms < 0:
        errors.append("client_ts_ms must be >= 0")
    if ev.draft_len_after < 0:
        errors.append("draft_len_after must be >= 0")
    if ev.kind == InputKind.KEY_DOWN:
        if ev.char_count < 1:
            errors.append("KEY_DOWN char_count must be >= 1")
        if ev.chars is not None and len(ev.chars) != ev.char_count:
            errors.append("KEY_DOWN chars length must equal char_count")
    elif ev.kind == InputKind.KEY_ERASE:
        if ev.char_count < 1:
            errors.append("KEY_ERASE char_count must be >= 1")
    return errors


def apply_edits(text_original: str, edits: list[Annotation] | tuple[Annotation, ...]) -> str:
    """Fold EDIT annotations over the original text.

    Edits are whole-text replacements, so the fold reduces to the body of
    the maximal edit under (ts_server_ms, annotation_id) ordering.
    """
    text = text_original
    for edit in sorted(edits, key=lambda a: (a.ts_server_ms, a.annotation_id)):
        if edit.kind != AnnotationKind.EDIT:
            raise ValueError(f"apply_edits given a {edit.kind.value} annotation")
        text = str(edit.body)
    return text


def latest_rating(annotations: tuple[Annotation, ...] | list[Annotation]) -> int | None:
    """Most recent rating after per-author replacement; None when unrated."""
    ratings = [a for a in annotations if a.kind == AnnotationKind.RATING]
    if not ratings:
        return None
    ratings.sort(key=lambda a: (a.ts_server_ms, a.annotation_id))
    return int(ratings[-1].body)


def derived_message(msg: Message) -> Message:
    """Recompute text_current from the annotation history."""
    edits = [a for a in msg.annotations if a.kind == AnnotationKind.EDIT]
    return replace(msg, text_current=apply_edits(msg.text_original, edits))
