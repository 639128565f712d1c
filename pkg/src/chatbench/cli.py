"""Operator command line: run the gateway, create studies, export and
verify session logs, and drive scripted simulations."""

from __future__ import annotations

import asyncio
import json
import secrets
import sys
from pathlib import Path

import click
import httpx
import uvicorn

from .export import export_raw_events, export_session, verify_records
from .gateway import GatewayConfig, ServerHandle, create_app, load_gateway_config
from .scenario import load_scenario, run_scenario
from .simclient import SimError
from .store import SessionLog, StoreError, log_path


@click.group()
def main():
    """Research chat platform: server, study admin, export, simulation."""


def _load_config(config_path: str | None, data_dir: str | None) -> GatewayConfig:
    cfg = load_gateway_config(config_path)
    if data_dir:
        cfg.data_dir = Path(data_dir)
    return cfg


@main.command()
@click.option("--config", "config_path", type=click.Path(exists=True), help="Config file (key = value lines).")
@click.option("--data-dir", type=click.Path(), help="Session log directory (overrides config).")
@click.option("--bind", help="host:port to listen on (overrides config).")
def serve(config_path, data_dir, bind):
    """Start the gateway and serve until interrupted."""
    cfg = _load_config(config_path, data_dir)
    if bind:
        cfg.bind_address = bind
    if not cfg.admin_token:
        raise click.ClickException(
            "no admin token configured; set admin_token in the config file or CBK_ADMIN_TOKEN")
    app = create_app(cfg)
    click.echo(f"listening on {cfg.bind_address}, data dir {cfg.data_dir}")
    uvicorn.run(app, host=cfg.host, port=cfg.port, log_level="info",
                ssl_certfile=cfg.tls_cert, ssl_keyfile=cfg.tls_key)


@main.command("create-session")
@click.argument("spec_file", type=click.Path(exists=True))
@click.option("--server", required=True, help="Gateway base URL, e.g. http://127.0.0.1:8600")
@click.option("--admin-token", envvar="CBK_ADMIN_TOKEN", required=True)
def create_session(spec_file, server, admin_token):
    """Create a session from a JSON/YAML spec and print the join tokens."""
    import yaml
    spec = yaml.safe_load(Path(spec_file).read_text(encoding="utf-8"))
    try:
        resp = httpx.post(f"{server}/api/sessions", json=spec,
                          headers={"Authorization": f"Bearer {admin_token}"}, timeout=30)
    except httpx.TransportError as exc:
        click.echo(f"CONNECT_FAILED: {exc}", err=True)
        sys.exit(2)
    if resp.status_code != 201:
        click.echo(f"CREATE_FAILED: {resp.status_code} {resp.text}", err=True)
        sys.exit(1)
    result = resp.json()
    click.echo(f"session_id: {result['session_id']}")
    for p in result["participants"]:
        click.echo(f"  {p['participant_id']} ({p['kind']}): token {p['token']}")


@main.command()
@click.argument("session_id")
@click.option("--data-dir", required=True, type=click.Path(exists=True))
@click.option("--format", "fmt", type=click.Choice(["csv", "xlsx", "raw"]), default="csv")
@click.option("-o", "--output", type=click.Path(), help="Output file (default: <session_id>.<format>)")
def export(session_id, data_dir, fmt, output):
    """Export a session log offline to CSV, XLSX, or raw records."""
    path = log_path(data_dir, session_id)
    if not path.exists():
        click.echo(f"UNKNOWN_SESSION: no log at {path}", err=True)
        sys.exit(1)
    try:
        log = SessionLog.open(path)
        if fmt == "raw":
            data = export_raw_events(log.records)
            suffix = "records"
        else:
            data = export_session(log.records, fmt)
            suffix = fmt
    except StoreError as exc:
        click.echo(f"{exc}", err=True)
        sys.exit(1)
    out = Path(output) if output else Path(f"{session_id}.{suffix}")
    out.write_bytes(data)
    click.echo(f"wrote {out} ({len(data)} bytes)")


@main.command()
@click.argument("session_id")
@click.option("--data-dir", required=True, type=click.Path(exists=True))
def verify(session_id, data_dir):
    """Replay a log, recompute all derived data, and report violations."""
    path = log_path(data_dir, session_id)
    if not path.exists():
        click.echo(f"UNKNOWN_SESSION: no log at {path}", err=True)
        sys.exit(1)
    try:
        log = SessionLog.open(path)
    except StoreError as exc:
        click.echo(f"{exc}", err=True)
        sys.exit(1)
    problems = verify_records(log.records)
    if problems:
        for p in problems:
            click.echo(f"VIOLATION: {p}", err=True)
        sys.exit(1)
    click.echo(f"ok: {len(log.records)} records, all derivation checks passed")


@main.command()
@click.argument("scenario_file", type=click.Path(exists=True))
@click.option("--server", help="Run against this gateway; omit to spin up a private one.")
@click.option("--admin-token", envvar="CBK_ADMIN_TOKEN", help="Required with --server.")
@click.option("--data-dir", type=click.Path(), help="Data dir for the private gateway.")
@click.option("--seed", type=int, default=None, help="Override the scenario seed.")
@click.option("--out", type=click.Path(), default="transcripts", help="Transcript output directory.")
def simulate(scenario_file, server, admin_token, data_dir, seed, out):
    """Run every scripted client of a scenario and write their transcripts."""
    scenario = load_scenario(Path(scenario_file))
    handle = None
    try:
        if server is None:
            admin_token = admin_token or secrets.token_urlsafe(12)
            cfg = GatewayConfig(bind_address="127.0.0.1:0",
                                data_dir=Path(data_dir or "chatbench-data"),
                                admin_token=admin_token)
            handle = ServerHandle(cfg).start()
            server = handle.base_url
            click.echo(f"private gateway on {server}, logs in {cfg.data_dir}")
        elif not admin_token:
            raise click.ClickException("--admin-token is required with --server")
        try:
            result = asyncio.run(run_scenario(scenario, server, admin_token, seed=seed))
        except SimError as exc:
            click.echo(str(exc), err=True)
            sys.exit(2 if exc.code == "CONNECT_FAILED" else 1)
        out_dir = Path(out)
        out_dir.mkdir(parents=True, exist_ok=True)
        for name, transcript in result.transcripts.items():
            (out_dir / f"{name}.transcript.json").write_text(transcript.to_json(), encoding="utf-8")
        summary = {
            "session_id": result.session_id,
            "participants": result.participant_ids,
            "transcripts": sorted(result.transcripts),
            "server_errors": result.errors,
        }
        (out_dir / "summary.json").write_text(json.dumps(summary, indent=2), encoding="utf-8")
        click.echo(f"session {result.session_id}: {len(result.transcripts)} transcripts in {out_dir}")
        if result.errors:
            click.echo(f"server errors seen: {result.errors}", err=True)
            sys.exit(1)
    finally:
        if handle is not None:
            handle.stop()


if __name__ == "__main__":
    main()
