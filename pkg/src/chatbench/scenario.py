"""Declarative multi-client scenarios: one YAML document describes a
session (config + roster) and a script per participant, so conformance
cases double as protocol documentation.

A scenario runs against any live gateway; `run_scenario` creates the
session through the admin API, drives all clients concurrently from a
shared clock origin, and returns every transcript plus the ids needed
to fetch the log and exports afterwards.
"""

from __future__ import annotations

import asyncio
import time
from dataclasses import dataclass, field
from pathlib import Path

import httpx
import yaml

from .model import ChatMode
from .simclient import (
    SCRIPT_INVALID,
    ScriptedClient,
    ScriptStep,
    SimError,
    Transcript,
    validate_script,
)

_ACTION_KEYS = ("type", "erase", "mouse", "pause", "submit", "switch_identity",
                "annotate", "set_indicator", "disconnect", "reconnect")


@dataclass
class ClientSpec:
    name: str
    kind: str
    identities: list[dict]
    steps: list[ScriptStep]


@dataclass
class Scenario:
    session: dict                 # config part of the create-session request
    clients: list[ClientSpec]
    seed: int = 0
    jitter_ms: int = 0
    settle_ms: int = 500

    @property
    def mode(self) -> ChatMode:
        return ChatMode(self.session["mode"])


@dataclass
class ScenarioResult:
    session_id: str
    transcripts: dict[str, Transcript]
    tokens: dict[str, str]
    participant_ids: dict[str, str]
    errors: dict[str, list] = field(default_factory=dict)


def _parse_step(raw: dict, position: int) -> ScriptStep:
    if "at" not in raw:
        raise SimError(SCRIPT_INVALID, f"step {position}: missing 'at'")
    actions = [k for k in raw if k in _ACTION_KEYS]
    if len(actions) != 1:
        raise SimError(SCRIPT_INVALID,
                       f"step {position}: expected exactly one action, got {actions or 'none'}")
    action = actions[0]
    value = raw[action]
    params = {k: v for k, v in raw.items() if k not in ("at", action)}
    if action == "type":
        params["text"] = str(value)
    elif action == "erase":
        params["count"] = int(value)
    elif action == "mouse":
        params["points"] = value
    elif action == "pause":
        params["ms"] = int(value)
    elif action == "switch_identity":
        params["index"] = int(value)
    elif action == "annotate":
        if not isinstance(value, dict):
            raise SimError(SCRIPT_INVALID, f"step {position}: annotate needs a mapping")
        params.update(value)
    elif action == "set_indicator":
        params["variant"] = str(value)
    elif action == "submit" and isinstance(value, str):
        params["text"] = value
    return ScriptStep(at_ms=int(raw["at"]), action=action, params=params)


def load_scenario(source: str | Path) -> Scenario:
    """Parse a scenario document (YAML; JSON is valid YAML)."""
    if isinstance(source, Path) or "\n" not in str(source):
        text = Path(source).read_text(encoding="utf-8")
    else:
        text = str(source)
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict) or "session" not in doc or "clients" not in doc:
        raise SimError(SCRIPT_INVALID, "scenario needs 'session' and 'clients' sections")
    clients = []
    for i, c in enumerate(doc["clients"]):
        steps = [_parse_step(s, j) for j, s in enumerate(c.get("script", []))]
        spec = ClientSpec(
            name=c.get("name", f"client{i + 1}"),
            kind=c.get("kind", "SUBJECT"),
            identities=[ident if isinstance(ident, dict) else {"display_name": str(ident)}
                        for ident in c["identities"]],
            steps=steps,
        )
        problems = validate_script(spec.steps, spec.kind)
        if problems:
            raise SimError(SCRIPT_INVALID, f"client {spec.name}: " + "; ".join(problems))
        clients.append(spec)
    return Scenario(
        session=dict(doc["session"]),
        clients=clients,
        seed=int(doc.get("seed", 0)),
        jitter_ms=int(doc.get("jitter_ms", 0)),
        settle_ms=int(doc.get("settle_ms", 500)),
    )


async def create_session_http(base_url: str, admin_token: str, session: dict,
                              clients: list[ClientSpec]) -> dict:
    spec = {
        "config": session,
        "participants": [
            {"participant_id": c.name, "kind": c.kind, "identities": c.identities}
            for c in clients
        ],
    }
    try:
        async with httpx.AsyncClient() as http:
            resp = await http.post(f"{base_url}/api/sessions", json=spec,
                                   headers={"Authorization": f"Bearer {admin_token}"},
                                   timeout=30)
    except httpx.TransportError as exc:
        raise SimError("CONNECT_FAILED", f"{base_url}: {exc}") from exc
    if resp.status_code != 201:
        raise SimError("CREATE_FAILED", f"{resp.status_code}: {resp.text}")
    return resp.json()


async def run_scenario(scenario: Scenario, base_url: str, admin_token: str,
                       *, seed: int | None = None) -> ScenarioResult:
    """Create the session and drive every scripted client concurrently."""
    created = await create_session_http(base_url, admin_token, scenario.session, scenario.clients)
    session_id = created["session_id"]
    tokens = {p["participant_id"]: p["token"] for p in created["participants"]}
    ws_url = base_url.replace("http", "ws", 1) + "/ws"
    send_chars = scenario.mode == ChatMode.SYNC
    run_seed = scenario.seed if seed is None else seed

    clients = []
    for i, spec in enumerate(scenario.clients):
        clients.append(ScriptedClient(
            spec.name, ws_url, session_id, tokens[spec.name], spec.steps,
            kind=spec.kind, jitter_ms=scenario.jitter_ms,
            seed=run_seed * 1000 + i, settle_ms=scenario.settle_ms))

    for client in clients:  # connect serially so joins are deterministic
        await client.connect()
    t0 = time.monotonic() + 0.05
    transcripts = await asyncio.gather(*(c.run(t0, send_chars=send_chars) for c in clients))

    return ScenarioResult(
        session_id=session_id,
        transcripts={c.name: t for c, t in zip(clients, transcripts)},
        tokens=tokens,
        participant_ids={c.name: c.transcript.participant_id for c in clients},
        errors={c.name: [f.body for f in c.errors] for c in clients if c.errors},
    )


def run_scenario_sync(scenario: Scenario, base_url: str, admin_token: str,
                      *, seed: int | None = None) -> ScenarioResult:
    return asyncio.run(run_scenario(scenario, base_url, admin_token, seed=seed))
