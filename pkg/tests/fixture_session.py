"""A small fully scripted session with hand-checkable telemetry, used to
pin the export format byte-for-byte (tests/data/expected_session.csv).

Timeline (server clock left, client clocks right):
  alice joins with client epoch 0 at server 1100
  wanda joins with client epoch 0 at server 1200
  alice keys 'h' @500, 'i' @700 (iki 200), mouse (10,10)@720 (13,14)@740,
    submits "hi" @800 -> pause 500, duration 200, speed 2/0.2 = 10.0,
    mouse path 5.0
  wanda switches to her machine persona, keys 'o'@2000 'k'@2100 'x'@2200,
    erases @2300 (iki 100,100,100), submits "ok" @2400 ->
    window starts at alice's turn mapped onto wanda's clock:
    1900 (server) - 1200 (offset) = 700, so pause 1300;
    duration 300, speed 2/0.3
  wanda edits m1 to "hi!", rates it 4 then 2, comments "needs follow-up"
"""

from chatbench.engine import SessionEngine
from chatbench.model import (
    AnnotationKind,
    ChatMode,
    Identity,
    IndicatorVariant,
    InputEvent,
    InputKind,
    Participant,
    ParticipantKind,
    SessionConfig,
    TypingIndicatorPolicy,
    token_digest,
)

ALICE_TOKEN = "fixture-token-a"
WANDA_TOKEN = "fixture-token-w"


def build_fixture_engine() -> SessionEngine:
    config = SessionConfig(
        session_id="fixture-1",
        mode=ChatMode.QUASI_SYNC,
        indicator_policy=TypingIndicatorPolicy(
            session_default=IndicatorVariant.TYPING_ONLY, idle_timeout_ms=3000),
        max_participants=2,
        rating_scale_max=5,
        mouse_sample_interval_ms=200,
        title="fixture",
    )
    alice = Participant("alice", token_digest(ALICE_TOKEN), ParticipantKind.SUBJECT,
                        (Identity("Alice", "participant"),))
    wanda = Participant("wanda", token_digest(WANDA_TOKEN), ParticipantKind.WIZARD,
                        (Identity("Agent Ada", "insurance agent"),
                         Identity("UNIT-7", "computer", presented_as_machine=True)))
    engine = SessionEngine.create(config, [alice, wanda], now_ms=1000)
    engine.join("alice", ALICE_TOKEN, 0, 1100)
    engine.join("wanda", WANDA_TOKEN, 0, 1200)

    def key(pid, ts, draft, ch=None, server=None):
        engine.ingest_input(pid, InputEvent(InputKind.KEY_DOWN, ts, draft, 1, ch), server)

    key("alice", 500, 1, server=1600)
    key("alice", 700, 2, server=1800)
    engine.ingest_input("alice", InputEvent(InputKind.MOUSE_MOVE, 720, 2, 0, None, 10.0, 10.0), 1820)
    engine.ingest_input("alice", InputEvent(InputKind.MOUSE_MOVE, 740, 2, 0, None, 13.0, 14.0), 1840)
    engine.submit_message("alice", "hi", 800, 1900)

    engine.switch_identity("wanda", 1, 2000)
    key("wanda", 2000, 1, server=2500)
    key("wanda", 2100, 2, server=2600)
    key("wanda", 2200, 3, server=2700)
    engine.ingest_input("wanda", InputEvent(InputKind.KEY_ERASE, 2300, 2, 1), 2800)
    engine.submit_message("wanda", "ok", 2400, 2900)

    engine.annotate("wanda", AnnotationKind.EDIT, "fixture-1-m1", "hi!", 3000)
    engine.annotate("wanda", AnnotationKind.RATING, "fixture-1-m1", 4, 3100)
    engine.annotate("wanda", AnnotationKind.RATING, "fixture-1-m1", 2, 3200)
    engine.annotate("wanda", AnnotationKind.COMMENT, "fixture-1-m1", "needs follow-up", 3300)
    return engine
