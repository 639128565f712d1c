"""Gateway behaviour over real HTTP and WebSocket connections."""

import asyncio
import json
import time

import httpx
import pytest
from websockets.asyncio.client import connect as ws_connect
from websockets.exceptions import ConnectionClosed

from chatbench.export import export_session, export_session_csv
from chatbench.gateway import GatewayConfig, ServerHandle, load_gateway_config
from chatbench.protocol import ClientFrame, ClientKind, ServerKind, decode_frame, encode_frame
from chatbench.store import SessionLog


def session_spec(mode="QUASI_SYNC", session_id=None, indicator=None, **config):
    cfg = {"mode": mode, "max_participants": 4,
           "indicator": indicator or {"session_default": "TYPING_ONLY", "idle_timeout_ms": 3000}}
    if session_id:
        cfg["session_id"] = session_id
    cfg.update(config)
    return {
        "config": cfg,
        "participants": [
            {"participant_id": "sub", "kind": "SUBJECT",
             "identities": [{"display_name": "Subject One"}]},
            {"participant_id": "wiz", "kind": "WIZARD",
             "identities": [{"display_name": "Agent Ada"},
                            {"display_name": "UNIT-7", "presented_as_machine": True}]},
            {"participant_id": "lead", "kind": "LEADER",
             "identities": [{"display_name": "Dr. Lang"}]},
        ],
    }


def create_session(server, spec=None, token=None):
    resp = httpx.post(f"{server.base_url}/api/sessions", json=spec or session_spec(),
                      headers={"Authorization": f"Bearer {token or server.admin_token}"},
                      timeout=10)
    return resp


class Probe:
    """Minimal frame-level WebSocket client for protocol assertions."""

    def __init__(self, ws):
        self.ws = ws
        self.seq = 0

    @classmethod
    async def open(cls, server):
        return cls(await ws_connect(server.ws_url, open_timeout=5))

    async def send(self, kind, body=None, seq=None):
        if seq is None:
            self.seq += 1
            seq = self.seq
        else:
            self.seq = max(self.seq, seq)
        await self.ws.send(encode_frame(ClientFrame(kind, seq, body or {})).decode())

    async def hello(self, session_id, token, client_ts_ms=0):
        await self.send(ClientKind.HELLO, {"session_id": session_id, "token": token,
                                           "client_ts_ms": client_ts_ms})
        return await self.recv()

    async def recv(self, timeout=5):
        return decode_frame(await asyncio.wait_for(self.ws.recv(), timeout))

    async def recv_kind(self, kind, timeout=5):
        deadline = time.monotonic() + timeout
        while True:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise asyncio.TimeoutError(f"no {kind} frame within {timeout}s")
            frame = await self.recv(timeout=remaining)
            if frame.kind == kind:
                return frame

    async def type_key(self, ch, ts, draft_after, chars=False):
        await self.send(ClientKind.INPUT, {"event": {
            "kind": "KEY_DOWN", "client_ts_ms": ts, "draft_len_after": draft_after,
            "char_count": 1, "chars": ch if chars else None, "x": 0.0, "y": 0.0}})

    async def close(self):
        try:
            await self.ws.close()
        except ConnectionClosed:
            pass


class TestAdminApi:
    def test_create_session_returns_tokens_once(self, live_server):
        resp = create_session(live_server)
        assert resp.status_code == 201
        body = resp.json()
        assert len(body["participants"]) == 3
        assert all(p["token"] for p in body["participants"])
        status = httpx.get(f"{live_server.base_url}/api/sessions/{body['session_id']}",
                           headers={"Authorization": f"Bearer {live_server.admin_token}"})
        assert "token" not in json.dumps(status.json())

    def test_wrong_admin_token(self, live_server):
        resp = create_session(live_server, token="not-the-token")
        assert resp.status_code == 401
        assert resp.json()["error"] == "UNAUTHORIZED"

    def test_invalid_config_rejected(self, live_server):
        spec = session_spec()
        spec["config"]["max_participants"] = 1
        resp = create_session(live_server, spec)
        assert resp.status_code == 400
        assert resp.json()["error"] == "INVALID_CONFIG"

    def test_unknown_session_status(self, live_server):
        resp = httpx.get(f"{live_server.base_url}/api/sessions/ghost",
                         headers={"Authorization": f"Bearer {live_server.admin_token}"})
        assert resp.status_code == 404
        assert resp.json()["error"] == "UNKNOWN_SESSION"

    def test_leader_token_may_administer_own_session(self, live_server):
        body = create_session(live_server).json()
        leader_token = next(p["token"] for p in body["participants"]
                            if p["participant_id"] == "lead")
        resp = httpx.patch(
            f"{live_server.base_url}/api/sessions/{body['session_id']}/indicator",
            json={"session_default": "OFF"},
            headers={"Authorization": f"Bearer {leader_token}"})
        assert resp.status_code == 200
        # but not other sessions
        other = create_session(live_server).json()
        resp = httpx.patch(
            f"{live_server.base_url}/api/sessions/{other['session_id']}/indicator",
            json={"session_default": "OFF"},
            headers={"Authorization": f"Bearer {leader_token}"})
        assert resp.status_code == 401


class TestHandshake:
    def test_hello_yields_welcome_with_history(self, live_server):
        body = create_session(live_server).json()
        tokens = {p["participant_id"]: p["token"] for p in body["participants"]}
        sid = body["session_id"]

        async def flow():
            sub = await Probe.open(live_server)
            welcome = await sub.hello(sid, tokens["sub"])
            assert welcome.kind == ServerKind.WELCOME
            assert welcome.body["you"]["participant_id"] == "sub"
            assert welcome.body["session"]["mode"] == "QUASI_SYNC"
            assert welcome.body["messages"] == []
            await sub.send(ClientKind.SUBMIT, {"text": "first!", "client_ts_ms": 10})
            posted = await sub.recv_kind(ServerKind.MESSAGE_POSTED)
            assert posted.body["text"] == "first!"

            late = await Probe.open(live_server)
            welcome2 = await late.hello(sid, tokens["wiz"])
            assert [m["text"] for m in welcome2.body["messages"]] == ["first!"]
            await sub.close()
            await late.close()

        asyncio.run(flow())

    def test_bad_token_rejected(self, live_server):
        sid = create_session(live_server).json()["session_id"]

        async def flow():
            probe = await Probe.open(live_server)
            frame = await probe.hello(sid, "wrong")
            assert frame.kind == ServerKind.ERROR
            assert frame.body["code"] == "AUTH_FAILED"

        asyncio.run(flow())

    def test_first_frame_must_be_hello(self, live_server):
        async def flow():
            probe = await Probe.open(live_server)
            await probe.send(ClientKind.SUBMIT, {"text": "x", "client_ts_ms": 1})
            frame = await probe.recv()
            assert frame.kind == ServerKind.ERROR
            with pytest.raises((ConnectionClosed, asyncio.TimeoutError)):
                await probe.recv(timeout=2)

        asyncio.run(flow())

    def test_session_full(self, live_server):
        spec = session_spec(max_participants=2)
        body = create_session(live_server, spec).json()
        tokens = {p["participant_id"]: p["token"] for p in body["participants"]}
        sid = body["session_id"]

        async def flow():
            a = await Probe.open(live_server)
            assert (await a.hello(sid, tokens["sub"])).kind == ServerKind.WELCOME
            b = await Probe.open(live_server)
            assert (await b.hello(sid, tokens["wiz"])).kind == ServerKind.WELCOME
            c = await Probe.open(live_server)
            frame = await c.hello(sid, tokens["lead"])
            assert frame.kind == ServerKind.ERROR
            assert frame.body["code"] == "SESSION_FULL"
            await a.close(); await b.close()

        asyncio.run(flow())


class TestFrameDiscipline:
    def test_client_seq_regression_is_recoverable(self, live_server):
        body = create_session(live_server).json()
        tokens = {p["participant_id"]: p["token"] for p in body["participants"]}
        sid = body["session_id"]

        async def flow():
            probe = await Probe.open(live_server)
            await probe.hello(sid, tokens["sub"])
            await probe.type_key("a", 100, 1)          # seq 2
            await probe.send(ClientKind.INPUT, {"event": {
                "kind": "KEY_DOWN", "client_ts_ms": 150, "draft_len_after": 2,
                "char_count": 1, "chars": None, "x": 0.0, "y": 0.0}}, seq=2)  # regression
            err = await probe.recv_kind(ServerKind.ERROR)
            assert err.body["code"] == "SEQ_REGRESSION"
            # connection still usable
            await probe.type_key("b", 200, 2)
            await probe.send(ClientKind.SUBMIT, {"text": "ab", "client_ts_ms": 300})
            posted = await probe.recv_kind(ServerKind.MESSAGE_POSTED)
            assert posted.body["text"] == "ab"
            await probe.close()

        asyncio.run(flow())

    def test_engine_error_surfaces_as_error_frame(self, live_server):
        body = create_session(live_server).json()
        tokens = {p["participant_id"]: p["token"] for p in body["participants"]}
        sid = body["session_id"]

        async def flow():
            probe = await Probe.open(live_server)
            await probe.hello(sid, tokens["sub"])
            await probe.send(ClientKind.SUBMIT, {"text": "", "client_ts_ms": 10})
            err = await probe.recv_kind(ServerKind.ERROR)
            assert err.body["code"] == "EMPTY_MESSAGE"
            await probe.send(ClientKind.SWITCH_IDENTITY, {"identity_index": 0})
            err = await probe.recv_kind(ServerKind.ERROR)
            assert err.body["code"] == "FORBIDDEN"
            await probe.close()

        asyncio.run(flow())


class TestExportEndpoint:
    def _populate(self, live_server, sid="exp-1"):
        body = create_session(live_server, session_spec(session_id=sid)).json()
        tokens = {p["participant_id"]: p["token"] for p in body["participants"]}

        async def flow():
            probe = await Probe.open(live_server)
            await probe.hello(sid, tokens["sub"])
            await probe.type_key("h", 100, 1)
            await probe.type_key("i", 220, 2)
            await probe.send(ClientKind.SUBMIT, {"text": "hi", "client_ts_ms": 300})
            await probe.recv_kind(ServerKind.MESSAGE_POSTED)
            await probe.close()

        asyncio.run(flow())
        return sid

    def test_http_export_equals_offline_export(self, live_server):
        sid = self._populate(live_server)
        resp = httpx.get(f"{live_server.base_url}/api/sessions/{sid}/export?format=csv",
                         headers={"Authorization": f"Bearer {live_server.admin_token}"})
        assert resp.status_code == 200
        log = SessionLog.open(live_server.config.data_dir / f"{sid}.log")
        assert resp.content == export_session_csv(log.records)

    def test_csv_and_xlsx_same_rows(self, live_server):
        from test_store_export import read_xlsx_rows
        import csv as csv_mod
        sid = self._populate(live_server, "exp-2")
        headers = {"Authorization": f"Bearer {live_server.admin_token}"}
        csv_resp = httpx.get(
            f"{live_server.base_url}/api/sessions/{sid}/export?format=csv", headers=headers)
        xlsx_resp = httpx.get(
            f"{live_server.base_url}/api/sessions/{sid}/export?format=xlsx", headers=headers)
        csv_rows = list(csv_mod.reader(csv_resp.text.splitlines()))
        sheet_rows = read_xlsx_rows(xlsx_resp.content)
        assert sheet_rows[0] == csv_rows[0]
        for sheet_row, csv_row in zip(sheet_rows[1:], csv_rows[1:]):
            textual = [str(v) for v in sheet_row]
            assert textual == [v for v in csv_row if v != ""]

    def test_unauthorized_export(self, live_server):
        sid = self._populate(live_server, "exp-3")
        resp = httpx.get(f"{live_server.base_url}/api/sessions/{sid}/export?format=csv",
                         headers={"Authorization": "Bearer nope"})
        assert resp.status_code == 401


class TestIndicatorAdmin:
    def test_policy_change_broadcast_and_effective(self, live_server):
        body = create_session(live_server).json()
        tokens = {p["participant_id"]: p["token"] for p in body["participants"]}
        sid = body["session_id"]

        async def flow():
            sub = await Probe.open(live_server)
            wiz = await Probe.open(live_server)
            await sub.hello(sid, tokens["sub"])
            await wiz.hello(sid, tokens["wiz"])
            await sub.recv_kind(ServerKind.PEER_JOINED, timeout=2)

            resp = httpx.patch(
                f"{live_server.base_url}/api/sessions/{sid}/indicator",
                json={"session_default": "OFF"},
                headers={"Authorization": f"Bearer {live_server.admin_token}"})
            assert resp.status_code == 200
            changed = await wiz.recv_kind(ServerKind.INDICATOR_CHANGED)
            assert changed.body["your_variant"] == "OFF"

            await sub.type_key("a", 100, 1)
            await sub.type_key("b", 200, 2)
            await sub.send(ClientKind.SUBMIT, {"text": "ab", "client_ts_ms": 250})
            posted = await wiz.recv_kind(ServerKind.MESSAGE_POSTED)
            assert posted.body["text"] == "ab"
            # OFF: the peer saw the turn but never a typing indicator
            received = []
            try:
                while True:
                    received.append(await wiz.recv(timeout=0.3))
            except asyncio.TimeoutError:
                pass
            assert all(f.kind != ServerKind.TYPING_STATE
                       for f in received), received
            await sub.close(); await wiz.close()

        asyncio.run(flow())


class TestReconnection:
    def test_welcome_replays_missed_turns(self, live_server):
        body = create_session(live_server).json()
        tokens = {p["participant_id"]: p["token"] for p in body["participants"]}
        sid = body["session_id"]

        async def flow():
            sub = await Probe.open(live_server)
            await sub.hello(sid, tokens["sub"])
            await sub.send(ClientKind.SUBMIT, {"text": "one", "client_ts_ms": 10})
            await sub.recv_kind(ServerKind.MESSAGE_POSTED)
            await sub.close()

            wiz = await Probe.open(live_server)
            await wiz.hello(sid, tokens["wiz"])
            await wiz.send(ClientKind.SUBMIT, {"text": "two", "client_ts_ms": 10})
            await wiz.recv_kind(ServerKind.MESSAGE_POSTED)

            back = await Probe.open(live_server)
            welcome = await back.hello(sid, tokens["sub"], client_ts_ms=5000)
            assert [m["text"] for m in welcome.body["messages"]] == ["one", "two"]
            await back.close(); await wiz.close()

        asyncio.run(flow())

    def test_abrupt_drop_logs_leave(self, live_server):
        body = create_session(live_server).json()
        tokens = {p["participant_id"]: p["token"] for p in body["participants"]}
        sid = body["session_id"]

        async def flow():
            sub = await Probe.open(live_server)
            await sub.hello(sid, tokens["sub"])
            # abrupt transport close, no BYE
            await sub.ws.close(code=1001)

        asyncio.run(flow())
        deadline = time.monotonic() + 3
        while time.monotonic() < deadline:
            log = SessionLog.open(live_server.config.data_dir / f"{sid}.log")
            if any(r.kind.value == "LEAVE" for r in log.records):
                return
            time.sleep(0.05)
        pytest.fail("LEAVE was not logged after transport drop")


class TestRestartRecovery:
    def test_sessions_reload_from_data_dir(self, tmp_path):
        config = GatewayConfig(bind_address="127.0.0.1:0", data_dir=tmp_path / "d",
                               admin_token="adm", session_tick_ms=100)
        first = ServerHandle(config).start()
        first.admin_token = "adm"
        body = create_session(first, session_spec(session_id="persist-1")).json()
        tokens = {p["participant_id"]: p["token"] for p in body["participants"]}

        async def talk(server, token, text):
            probe = await Probe.open(server)
            welcome = await probe.hello("persist-1", token)
            await probe.send(ClientKind.SUBMIT, {"text": text, "client_ts_ms": 10})
            await probe.recv_kind(ServerKind.MESSAGE_POSTED)
            await probe.close()
            return welcome

        asyncio.run(talk(first, tokens["sub"], "before restart"))
        first.stop()

        config2 = GatewayConfig(bind_address="127.0.0.1:0", data_dir=tmp_path / "d",
                                admin_token="adm", session_tick_ms=100)
        second = ServerHandle(config2).start()
        second.admin_token = "adm"
        try:
            status = httpx.get(f"{second.base_url}/api/sessions/persist-1",
                               headers={"Authorization": "Bearer adm"}).json()
            assert status["message_count"] == 1
            assert all(not p["connected"] for p in status["participants"])
            welcome = asyncio.run(talk(second, tokens["sub"], "after restart"))
            assert [m["text"] for m in welcome.body["messages"]] == ["before restart"]
        finally:
            second.stop()


class TestConfigLoading:
    def test_file_and_env_overrides(self, tmp_path):
        cfg_file = tmp_path / "gw.conf"
        cfg_file.write_text(
            "# comment\nbind = 0.0.0.0:9000\ndata_dir = /tmp/x\n"
            "admin_token = file-token\nsession_tick_ms = 250\n")
        cfg = load_gateway_config(cfg_file, env={})
        assert cfg.bind_address == "0.0.0.0:9000"
        assert str(cfg.data_dir) == "/tmp/x"
        assert cfg.admin_token == "file-token"
        assert cfg.session_tick_ms == 250

        env = {"CBK_BIND": "127.0.0.1:7777", "CBK_ADMIN_TOKEN": "env-token",
               "CBK_DATA_DIR": "/tmp/y"}
        cfg = load_gateway_config(cfg_file, env=env)
        assert cfg.bind_address == "127.0.0.1:7777"
        assert cfg.admin_token == "env-token"
        assert str(cfg.data_dir) == "/tmp/y"

    def test_defaults_without_file(self):
        cfg = load_gateway_config(None, env={})
        assert cfg.port == 8600
        assert cfg.session_tick_ms == 500
