"""Shared fixtures: deterministic engine sessions and live gateways."""

from __future__ import annotations

import secrets
from pathlib import Path

import pytest

from chatbench.engine import SessionEngine
from chatbench.gateway import GatewayConfig, ServerHandle
from chatbench.model import (
    ChatMode,
    Identity,
    IndicatorVariant,
    Participant,
    ParticipantKind,
    SessionConfig,
    TypingIndicatorPolicy,
    token_digest,
)


class ManualClock:
    """Millisecond clock the test advances by hand."""

    def __init__(self, start_ms: int = 1000):
        self.now = start_ms

    def advance(self, ms: int) -> int:
        self.now += ms
        return self.now

    def __call__(self) -> int:
        return self.now


TOKENS = {"p-alice": "tok-alice", "p-bob": "tok-bob", "p-wiz": "tok-wiz", "p-lead": "tok-lead"}


def standard_roster() -> list[Participant]:
    return [
        Participant("p-alice", token_digest(TOKENS["p-alice"]), ParticipantKind.SUBJECT,
                    (Identity("Alice", "participant"),)),
        Participant("p-bob", token_digest(TOKENS["p-bob"]), ParticipantKind.SUBJECT,
                    (Identity("Bob", "participant"),)),
        Participant("p-wiz", token_digest(TOKENS["p-wiz"]), ParticipantKind.WIZARD,
                    (Identity("Agent Ada", "insurance agent"),
                     Identity("UNIT-7", "computer", presented_as_machine=True))),
    ]


def make_engine(mode=ChatMode.QUASI_SYNC, variant=IndicatorVariant.TYPING_ONLY,
                idle_timeout_ms=3000, max_participants=8, clock: ManualClock | None = None,
                roster=None, **config_overrides) -> tuple[SessionEngine, ManualClock]:
    clock = clock or ManualClock()
    config = SessionConfig(
        session_id="test-session",
        mode=mode,
        indicator_policy=TypingIndicatorPolicy(session_default=variant,
                                               idle_timeout_ms=idle_timeout_ms),
        max_participants=max_participants,
        **config_overrides,
    )
    engine = SessionEngine.create(config, roster or standard_roster(), now_ms=clock())
    return engine, clock


def join_all(engine: SessionEngine, clock: ManualClock, pids=("p-alice", "p-bob", "p-wiz")):
    for pid in pids:
        engine.join(pid, TOKENS[pid], 0, clock.advance(10))


@pytest.fixture
def live_server(tmp_path):
    """A gateway on a random port with an isolated data dir."""
    admin_token = secrets.token_urlsafe(8)
    config = GatewayConfig(bind_address="127.0.0.1:0", data_dir=tmp_path / "data",
                           admin_token=admin_token, session_tick_ms=100)
    handle = ServerHandle(config).start()
    handle.admin_token = admin_token
    yield handle
    handle.stop()
