"""Command-line client covering every API operation, plus local serve modes.

Connection settings resolve from flags, then environment (TWIN_ENDPOINT,
TWIN_TOKEN, TWIN_OUTPUT), then ~/.config/twinforge/cli.json, in that order.
Exit codes: 0 success, 1 API or transport error (message on stderr), 2 usage
error. ``--output json`` prints the raw API response body byte for byte.
"""

from __future__ import annotations

import json
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Optional

import click

from .client import TwinClient
from .errors import TwinError

CONFIG_PATH = Path.home() / ".config" / "twinforge" / "cli.json"

# One subcommand per API endpoint; the coverage test checks this against the
# service route table. Local commands (serve, backend serve) appear with a
# null endpoint.
ENDPOINT_COMMANDS = [
    ("POST", "/api/v1/assets", "asset publish"),
    ("GET", "/api/v1/assets", "asset list"),
    ("GET", "/api/v1/assets/{id}", "asset get"),
    ("PUT", "/api/v1/assets/{id}", "asset update"),
    ("POST", "/api/v1/dts", "dt compose"),
    ("GET", "/api/v1/dts", "dt list"),
    ("GET", "/api/v1/dts/{id}", "dt show"),
    ("PATCH", "/api/v1/dts/{id}/config", "dt reconfigure"),
    ("POST", "/api/v1/dts/{id}/transition", "dt transition"),
    ("POST", "/api/v1/jobs", "job submit"),
    ("GET", "/api/v1/jobs", "job list"),
    ("GET", "/api/v1/jobs/{id}", "job status"),
    ("GET", "/api/v1/jobs/{id}/logs", "job logs"),
    ("DELETE", "/api/v1/jobs/{id}", "job terminate"),
    ("POST", "/api/v1/federation/links", "fed link"),
    ("GET", "/api/v1/federation/links", "fed links"),
    ("POST", "/api/v1/federation/sync/{id}", "fed sync"),
    ("POST", "/api/v1/federation/pull", "asset pull"),
    ("POST", "/api/v1/federation/push", "asset push"),
    ("POST", "/api/v1/federation/dts/{id}/peers", "dt peers"),
    ("POST", "/api/v1/trial", "trial run"),
    ("POST", "/api/v1/users", "user create"),
    ("POST", "/api/v1/metrics/{id}", "metric post"),
    ("GET", "/api/v1/metrics/{id}", "metric get"),
    ("POST", "/api/v1/config/validate", "dt validate"),
    ("GET", "/health", "health"),
]


def _file_config() -> dict:
    try:
        return json.loads(CONFIG_PATH.read_text())
    except (OSError, ValueError):
        return {}


class Ctx:
    def __init__(self, endpoint: Optional[str], token: Optional[str], output: str):
        self.endpoint = endpoint
        self.token = token
        self.output = output
        self._client: Optional[TwinClient] = None

    @property
    def client(self) -> TwinClient:
        if self._client is None:
            if not self.endpoint:
                raise click.UsageError(
                    "no endpoint: pass --endpoint, set TWIN_ENDPOINT, "
                    f"or write {CONFIG_PATH}"
                )
            self._client = TwinClient(self.endpoint, self.token)
        return self._client


@click.group()
@click.option("--endpoint", envvar="TWIN_ENDPOINT", default=None,
              help="Instance API base URL, e.g. http://127.0.0.1:8080")
@click.option("--token", envvar="TWIN_TOKEN", default=None, help="Bearer token.")
@click.option("--output", envvar="TWIN_OUTPUT", default=None,
              type=click.Choice(["human", "json"]), help="Output format.")
@click.pass_context
def main(ctx, endpoint, token, output):
    """Client for the digital-twin orchestration service."""
    conf = _file_config()
    ctx.obj = Ctx(
        endpoint=endpoint or conf.get("endpoint"),
        token=token or conf.get("token"),
        output=output or conf.get("output") or "human",
    )


def _run(ctx: Ctx, call, render=None):
    """Execute one API call honoring the output mode and exit-code contract."""
    try:
        doc = call()
    except TwinError as exc:
        click.echo(f"error: {exc.message}", err=True)
        sys.exit(1)
    if ctx.output == "json":
        out = click.get_binary_stream("stdout")
        out.write(ctx.client.last_raw)
        if not ctx.client.last_raw.endswith(b"\n"):
            out.write(b"\n")
        out.flush()
    elif render is not None:
        render(doc)
    else:
        click.echo(json.dumps(doc, indent=2, sort_keys=True))
    return doc


def _table(rows: list[dict], columns: list[str]) -> None:
    if not rows:
        click.echo("(none)")
        return
    widths = {c: max(len(c), *(len(str(r.get(c, ""))) for r in rows)) for c in columns}
    click.echo("  ".join(c.ljust(widths[c]) for c in columns))
    for r in rows:
        click.echo("  ".join(str(r.get(c, "")).ljust(widths[c]) for c in columns))


def _json_arg(value: str) -> dict:
    """Accept inline JSON or a path to a JSON file."""
    candidate = Path(value)
    if candidate.exists():
        value = candidate.read_text()
    try:
        doc = json.loads(value)
    except ValueError as exc:
        raise click.UsageError(f"not JSON and not a readable file: {exc}")
    if not isinstance(doc, dict):
        raise click.UsageError("expected a JSON object")
    return doc


def _parse_ref(value: str) -> dict:
    """asset_id[:version][@backend] -> ref document."""
    backend = None
    if "@" in value:
        value, backend = value.rsplit("@", 1)
    version = None
    if ":" in value:
        value, v = value.rsplit(":", 1)
        try:
            version = int(v)
        except ValueError:
            raise click.UsageError(f"ref version must be an integer, got {v!r}")
    ref: dict = {"asset_id": value}
    if version is not None:
        ref["pinned_version"] = version
    if backend:
        ref["backend"] = backend
    return ref


# -- asset ------------------------------------------------------------------------


@main.group()
def asset():
    """Publish, inspect, and move catalog assets."""


@asset.command("publish")
@click.option("--name", required=True)
@click.option("--kind", required=True,
              type=click.Choice(["model", "data", "function", "service", "solver"]))
@click.option("--visibility", default="private", type=click.Choice(["private", "common"]))
@click.option("--description", default="")
@click.option("--file", "payload_file", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_json", default=None, help="Extra manifest JSON.")
@click.pass_obj
def asset_publish(ctx, name, kind, visibility, description, payload_file, manifest_json):
    manifest = _json_arg(manifest_json) if manifest_json else {}
    manifest.setdefault("description", description)
    payload = Path(payload_file).read_bytes()
    _run(
        ctx,
        lambda: ctx.client.publish_asset(name, kind, payload, visibility, manifest),
        render=lambda d: click.echo(f"published {d['id']} ({d['name']} v{len(d['versions'])})"),
    )


@asset.command("list")
@click.option("--kind", default=None)
@click.option("--name", default=None, help="Glob pattern on asset names.")
@click.option("--remote", is_flag=True, help="Include assets from linked backends.")
@click.pass_obj
def asset_list(ctx, kind, name, remote):
    _run(
        ctx,
        lambda: ctx.client.list_assets(kind, name, remote),
        render=lambda d: _table(
            [
                {
                    "id": a["id"],
                    "name": a["name"],
                    "kind": a["kind"],
                    "visibility": a["visibility"],
                    "versions": len(a["versions"]),
                    "origin": "remote" if a.get("remote") else "local",
                }
                for a in d["assets"]
            ],
            ["id", "name", "kind", "visibility", "versions", "origin"],
        ),
    )


@asset.command("get")
@click.argument("asset_id")
@click.option("--version", type=int, default=None)
@click.option("--out", type=click.Path(), default=None, help="Write payload to file.")
@click.pass_obj
def asset_get(ctx, asset_id, version, out):
    def render(d):
        v = d["version"]
        click.echo(f"{d['id']}  {d['name']}  {d['kind']}  v{v['version']}  {v['content_hash'][:12]}")
        if out:
            import base64

            Path(out).write_bytes(base64.b64decode(d["payload_b64"]))
            click.echo(f"payload written to {out}")

    _run(ctx, lambda: ctx.client.get_asset(asset_id, version), render=render)


@asset.command("update")
@click.argument("asset_id")
@click.option("--file", "payload_file", required=True, type=click.Path(exists=True))
@click.option("--manifest", "manifest_json", required=True,
              help="Manifest JSON (inline or file path).")
@click.pass_obj
def asset_update(ctx, asset_id, payload_file, manifest_json):
    payload = Path(payload_file).read_bytes()
    manifest = _json_arg(manifest_json)
    _run(
        ctx,
        lambda: ctx.client.update_asset(asset_id, payload, manifest),
        render=lambda d: click.echo(f"updated {asset_id} to v{d['version']}"),
    )


@asset.command("pull")
@click.argument("asset_id")
@click.option("--backend", required=True)
@click.option("--version", type=int, default=None)
@click.pass_obj
def asset_pull(ctx, asset_id, backend, version):
    _run(
        ctx,
        lambda: ctx.client.pull_asset(backend, asset_id, version),
        render=lambda d: click.echo(
            f"pulled {d['asset_id']} from {d['backend']}: {d['bytes']} bytes cached"
        ),
    )


@asset.command("push")
@click.option("--backend", required=True)
@click.option("--owner", default=None, help="Push only this owner's assets.")
@click.pass_obj
def asset_push(ctx, backend, owner):
    _run(
        ctx,
        lambda: ctx.client.push_changes(backend, owner),
        render=lambda d: click.echo(
            f"pushed {d['pushed_versions']} version(s) across {d['pushed_assets']} asset(s)"
        ),
    )


# -- dt ---------------------------------------------------------------------------


@main.group()
def dt():
    """Compose and manage digital twins."""


@dt.command("compose")
@click.option("--name", required=True)
@click.option("--ref", "refs", multiple=True,
              help="asset_id[:version][@backend]; repeatable.")
@click.option("--config", "config_json", required=True,
              help="DT config JSON (inline or file path).")
@click.option("--lifecycle", "lifecycle_json", default=None,
              help="Lifecycle spec JSON (inline or file path).")
@click.pass_obj
def dt_compose(ctx, name, refs, config_json, lifecycle_json):
    config = _json_arg(config_json)
    lifecycle = _json_arg(lifecycle_json) if lifecycle_json else None
    _run(
        ctx,
        lambda: ctx.client.compose_dt(name, [_parse_ref(r) for r in refs], config, lifecycle),
        render=lambda d: click.echo(f"composed {d['dt_id']} ({d['name']}), phase {d['state']['current']}"),
    )


@dt.command("list")
@click.pass_obj
def dt_list(ctx):
    _run(
        ctx,
        lambda: ctx.client.list_dts(),
        render=lambda d: _table(
            [
                {
                    "dt_id": t["dt_id"],
                    "name": t["name"],
                    "owner": t["owner"],
                    "phase": t.get("state", {}).get("current", "-"),
                    "instance": t.get("managing_instance") or t.get("instance", ""),
                    "origin": "remote" if t.get("remote") else "local",
                }
                for t in d["dts"]
            ],
            ["dt_id", "name", "owner", "phase", "instance", "origin"],
        ),
    )


@dt.command("show")
@click.argument("dt_id")
@click.pass_obj
def dt_show(ctx, dt_id):
    def render(d):
        click.echo(f"{d['dt_id']}  {d['name']}  owner={d['owner']}")
        click.echo(f"phase: {d['state']['current']}  allowed: {', '.join(d['allowed_transitions']) or '-'}")
        click.echo(f"revision: {d['revision']}  peers: {', '.join(d['peers']) or '-'}")
        for ref in d["asset_refs"]:
            origin = f"@{ref['backend']}" if ref.get("backend") else ""
            click.echo(f"  ref {ref['asset_id']}:{ref['pinned_version']}{origin}")

    _run(ctx, lambda: ctx.client.show_dt(dt_id), render=render)


@dt.command("reconfigure")
@click.argument("dt_id")
@click.option("--config", "config_json", required=True)
@click.option("--ref", "refs", multiple=True)
@click.pass_obj
def dt_reconfigure(ctx, dt_id, config_json, refs):
    config = _json_arg(config_json)
    new_refs = [_parse_ref(r) for r in refs] if refs else None
    _run(
        ctx,
        lambda: ctx.client.reconfigure_dt(dt_id, config, new_refs),
        render=lambda d: click.echo(f"reconfigured {dt_id} to revision {d['revision']}"),
    )


@dt.command("transition")
@click.argument("dt_id")
@click.argument("target")
@click.pass_obj
def dt_transition(ctx, dt_id, target):
    _run(
        ctx,
        lambda: ctx.client.transition_dt(dt_id, target),
        render=lambda d: click.echo(f"{dt_id} now in phase {d['state']['current']}"),
    )


@dt.command("peers")
@click.argument("dt_id")
@click.argument("peers", nargs=-1)
@click.pass_obj
def dt_peers(ctx, dt_id, peers):
    _run(
        ctx,
        lambda: ctx.client.set_peers(dt_id, list(peers)),
        render=lambda d: click.echo(f"{dt_id} peers: {', '.join(d['peers']) or '-'}"),
    )


@dt.command("validate")
@click.option("--config", "config_json", required=True)
@click.option("--ref", "refs", multiple=True)
@click.pass_obj
def dt_validate(ctx, config_json, refs):
    config = _json_arg(config_json)

    def render(d):
        if d["valid"]:
            click.echo("config is valid")
        for diag in d["diagnostics"]:
            click.echo(f"error  {diag['path'] or '<root>'}: {diag['message']}")
        for warn in d["warnings"]:
            click.echo(f"warn   {warn['path'] or '<root>'}: {warn['message']}")

    doc = _run(
        ctx,
        lambda: ctx.client.validate_config(config, [_parse_ref(r) for r in refs] or None),
        render=render,
    )
    if not doc.get("valid", False):
        sys.exit(1)


# -- job --------------------------------------------------------------------------


@main.group()
def job():
    """Submit and control execution jobs."""


@job.command("submit")
@click.option("--dt", "dt_id", required=True)
@click.option("--mode", type=click.Choice(["oneoff", "continuous"]), default=None)
@click.option("--limit", "time_limit_s", type=float, default=None,
              help="One-off time limit in seconds.")
@click.option("--max-restarts", type=int, default=None)
@click.option("--trigger", default="api", type=click.Choice(["manual", "api", "commit"]))
@click.pass_obj
def job_submit(ctx, dt_id, mode, time_limit_s, max_restarts, trigger):
    restart = {"max_restarts": max_restarts} if max_restarts is not None else None
    _run(
        ctx,
        lambda: ctx.client.submit_job(dt_id, mode, time_limit_s, restart, trigger),
        render=lambda d: click.echo(f"submitted {d['job_id']} ({d['status']})"),
    )


@job.command("status")
@click.argument("job_id")
@click.pass_obj
def job_status(ctx, job_id):
    _run(
        ctx,
        lambda: ctx.client.job(job_id),
        render=lambda d: click.echo(
            f"{d['job_id']}  dt={d['dt_id']}  {d['status']}"
            f"  restarts={d['restart_count']}  exit={d['exit_code']}"
        ),
    )


@job.command("list")
@click.option("--dt", "dt_id", default=None)
@click.pass_obj
def job_list(ctx, dt_id):
    _run(
        ctx,
        lambda: ctx.client.jobs(dt_id),
        render=lambda d: _table(
            [
                {
                    "job_id": j["job_id"],
                    "dt_id": j["dt_id"],
                    "status": j["status"],
                    "restarts": j["restart_count"],
                    "trigger": j["trigger"],
                }
                for j in d["jobs"]
            ],
            ["job_id", "dt_id", "status", "restarts", "trigger"],
        ),
    )


@job.command("logs")
@click.argument("job_id")
@click.option("--follow", is_flag=True)
@click.pass_obj
def job_logs(ctx, job_id, follow):
    try:
        for line in ctx.client.job_logs(job_id, follow=follow):
            click.echo(line)
    except TwinError as exc:
        click.echo(f"error: {exc.message}", err=True)
        sys.exit(1)


@job.command("terminate")
@click.argument("job_id")
@click.option("--grace", "grace_s", type=float, default=None,
              help="Seconds to wait before force kill.")
@click.pass_obj
def job_terminate(ctx, job_id, grace_s):
    _run(
        ctx,
        lambda: ctx.client.terminate_job(job_id, grace_s),
        render=lambda d: click.echo(f"{d['job_id']} {d['status']}"),
    )


# -- fed --------------------------------------------------------------------------


@main.group()
def fed():
    """Backend links and catalog synchronization."""


@fed.command("link")
@click.argument("endpoint")
@click.option("--token", default=None)
@click.option("--interval", "sync_interval_s", type=float, default=0,
              help="Auto-sync interval in seconds; 0 = manual sync only.")
@click.pass_obj
def fed_link(ctx, endpoint, token, sync_interval_s):
    _run(
        ctx,
        lambda: ctx.client.link_backend(endpoint, token, sync_interval_s),
        render=lambda d: click.echo(f"linked {d['backend_id']} at {d['endpoint']}"),
    )


@fed.command("links")
@click.pass_obj
def fed_links(ctx):
    _run(
        ctx,
        lambda: ctx.client.links(),
        render=lambda d: _table(
            d["links"], ["backend_id", "endpoint", "cursor", "sync_interval_s"]
        ),
    )


@fed.command("sync")
@click.argument("backend_id")
@click.pass_obj
def fed_sync(ctx, backend_id):
    _run(
        ctx,
        lambda: ctx.client.sync_backend(backend_id),
        render=lambda d: click.echo(
            f"synced {d['backend_id']}: {d['absorbed']} record(s), cursor {d['cursor']}"
        ),
    )


# -- user / trial / metric ----------------------------------------------------------


@main.group()
def user():
    """User management (superuser only)."""


@user.command("create")
@click.argument("name")
@click.pass_obj
def user_create(ctx, name):
    _run(
        ctx,
        lambda: ctx.client.create_user(name),
        render=lambda d: click.echo(f"created {d['name']}, token {d['token']}"),
    )


@main.group()
def trial():
    """Workspace trial runs."""


@trial.command("run")
@click.option("--config", "config_json", required=True)
@click.pass_obj
def trial_run(ctx, config_json):
    config = _json_arg(config_json)
    _run(
        ctx,
        lambda: ctx.client.trial_run(config),
        render=lambda d: click.echo(f"trial job {d['job_id']} ({d['status']})"),
    )


@main.group()
def metric():
    """Time-series metrics per twin."""


@metric.command("post")
@click.argument("dt_id")
@click.option("--name", required=True)
@click.option("--value", required=True, type=float)
@click.option("--ts", type=float, default=None)
@click.pass_obj
def metric_post(ctx, dt_id, name, value, ts):
    _run(
        ctx,
        lambda: ctx.client.post_metric(dt_id, name, value, ts),
        render=lambda d: click.echo(f"recorded {d['name']}={d['value']} at {d['ts']}"),
    )


@metric.command("get")
@click.argument("dt_id")
@click.option("--name", default=None)
@click.option("--since", type=float, default=None)
@click.option("--limit", type=int, default=None)
@click.pass_obj
def metric_get(ctx, dt_id, name, since, limit):
    _run(
        ctx,
        lambda: ctx.client.get_metrics(dt_id, name, since, limit),
        render=lambda d: _table(d["metrics"], ["name", "value", "ts"]),
    )


# -- health / serve ------------------------------------------------------------------


@main.command("health")
@click.pass_obj
def health(ctx):
    _run(
        ctx,
        lambda: ctx.client.health(),
        render=lambda d: click.echo(
            f"{d['status']}  instance={d['instance_id']}  broker={d['broker']}"
        ),
    )


def _block_until_signal() -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    stop.wait()


@main.command("serve")
@click.option("--config", "config_json", default=None,
              help="Instance config JSON (inline or file path).")
@click.option("--port", type=int, default=None)
@click.option("--data-dir", default=None)
@click.option("--superuser-token", default=None)
@click.option("--instance-id", default=None)
@click.option("--broker-listen", default=None, help="host:port to run a broker on.")
@click.option("--broker-connect", default=None, help="host:port of a shared broker.")
@click.option("--backend", "backends", multiple=True, help="Backend endpoint URL; repeatable.")
def serve_cmd(config_json, port, data_dir, superuser_token, instance_id,
              broker_listen, broker_connect, backends):
    """Run an instance until interrupted."""
    config = _json_arg(config_json) if config_json else {}
    if port is not None:
        config["port"] = port
    if data_dir:
        config["data_dir"] = data_dir
    if superuser_token:
        config["superuser_token"] = superuser_token
    if instance_id:
        config["instance_id"] = instance_id
    if broker_listen:
        config["broker"] = {"listen": broker_listen}
    if broker_connect:
        config["broker"] = {"connect": broker_connect}
    if backends:
        config["backends"] = [{"endpoint": b} for b in backends]
    if "data_dir" not in config:
        raise click.UsageError("serve needs --data-dir or a config file with data_dir")

    from .service import serve

    try:
        svc = serve(config)
    except TwinError as exc:
        click.echo(f"error: {exc.message}", err=True)
        sys.exit(1)
    click.echo(f"instance {svc.instance.instance_id} listening on {svc.url}", err=True)
    sys.stderr.flush()
    _block_until_signal()
    svc.stop()


@main.group()
def backend():
    """Standalone catalog backend."""


@backend.command("serve")
@click.option("--port", type=int, default=0)
@click.option("--data-dir", required=True)
@click.option("--backend-id", default="backend")
@click.option("--token", default=None)
def backend_serve(port, data_dir, backend_id, token):
    """Run a catalog backend until interrupted."""
    from .backend import serve_backend

    try:
        server = serve_backend(data_dir, "127.0.0.1", port, backend_id, token)
    except TwinError as exc:
        click.echo(f"error: {exc.message}", err=True)
        sys.exit(1)
    click.echo(f"backend {backend_id} listening on {server.url}", err=True)
    sys.stderr.flush()
    _block_until_signal()
    server.stop()


if __name__ == "__main__":
    main()
