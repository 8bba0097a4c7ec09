"""HTTP/JSON API for one instance, everything under /api/v1.

Bearer auth on every route except health. Errors map a platform error's
http_status and serialize as ``{"error": {"code", "message", "detail"}}``.
Job log streaming uses a close-delimited plain-text response so clients can
follow a running job line by line without any framing on top of HTTP.
"""

from __future__ import annotations

import base64
import json
import re
import threading
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from typing import Optional
from urllib.parse import parse_qs, urlparse

from .blobstore import content_hash
from .composer import AssetRef, interface_warnings, validate_config
from .errors import (
    Forbidden,
    InvalidManifest,
    NotFound,
    TwinError,
    UnresolvedRef,
)
from .instance import TwinInstance
from .lifecycle import LifecycleSpec, Phase
from .registry import AssetKind, AssetQuery, Visibility

API = "/api/v1"


class _Stream:
    """Marker result: stream text lines over a close-delimited response."""

    def __init__(self, lines):
        self.lines = lines


class _Routes:
    """Route table mapping (method, path regex) to handler method names."""

    TABLE = [
        ("GET", rf"^(?:{API})?/health$", "health", False),
        ("POST", rf"^{API}/assets$", "asset_publish", True),
        ("GET", rf"^{API}/assets$", "asset_list", True),
        ("GET", rf"^{API}/assets/(?P<id>[^/]+)$", "asset_get", True),
        ("PUT", rf"^{API}/assets/(?P<id>[^/]+)$", "asset_update", True),
        ("POST", rf"^{API}/dts$", "dt_compose", True),
        ("GET", rf"^{API}/dts$", "dt_list", True),
        ("GET", rf"^{API}/dts/(?P<id>[^/]+)$", "dt_show", True),
        ("PATCH", rf"^{API}/dts/(?P<id>[^/]+)/config$", "dt_reconfigure", True),
        ("POST", rf"^{API}/dts/(?P<id>[^/]+)/transition$", "dt_transition", True),
        ("POST", rf"^{API}/jobs$", "job_submit", True),
        ("GET", rf"^{API}/jobs$", "job_list", True),
        ("GET", rf"^{API}/jobs/(?P<id>[^/]+)/logs$", "job_logs", True),
        ("GET", rf"^{API}/jobs/(?P<id>[^/]+)$", "job_get", True),
        ("DELETE", rf"^{API}/jobs/(?P<id>[^/]+)$", "job_terminate", True),
        ("POST", rf"^{API}/federation/links$", "fed_link", True),
        ("GET", rf"^{API}/federation/links$", "fed_links", True),
        ("POST", rf"^{API}/federation/sync/(?P<id>[^/]+)$", "fed_sync", True),
        ("POST", rf"^{API}/federation/pull$", "fed_pull", True),
        ("POST", rf"^{API}/federation/push$", "fed_push", True),
        ("POST", rf"^{API}/federation/dts/(?P<id>[^/]+)/peers$", "dt_peers", True),
        ("POST", rf"^{API}/trial$", "trial_run", True),
        ("POST", rf"^{API}/users$", "user_create", True),
        ("POST", rf"^{API}/metrics/(?P<id>[^/]+)$", "metric_post", True),
        ("GET", rf"^{API}/metrics/(?P<id>[^/]+)$", "metric_get", True),
        ("POST", rf"^{API}/config/validate$", "config_validate", True),
    ]

    COMPILED = [
        (method, re.compile(pattern), handler, needs_auth)
        for method, pattern, handler, needs_auth in TABLE
    ]


class _Handler(BaseHTTPRequestHandler):
    instance: TwinInstance = None  # type: ignore[assignment]
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):
        pass

    # -- dispatch -------------------------------------------------------------

    def _dispatch(self, method: str) -> None:
        url = urlparse(self.path)
        params = {k: v[0] for k, v in parse_qs(url.query).items()}
        for route_method, pattern, handler_name, needs_auth in _Routes.COMPILED:
            if route_method != method:
                continue
            m = pattern.match(url.path)
            if m is None:
                continue
            try:
                user = self._authenticate() if needs_auth else None
                body = self._read_body() if method in ("POST", "PUT", "PATCH") else {}
                result = getattr(self, handler_name)(m, params, body, user)
            except TwinError as exc:
                self._send_json(exc.http_status, {"error": exc.to_dict()})
                return
            except (KeyError, ValueError, TypeError) as exc:
                self._send_json(
                    400,
                    {"error": {"code": "bad_request", "message": f"{type(exc).__name__}: {exc}"}},
                )
                return
            if isinstance(result, _Stream):
                self._send_stream(result)
            else:
                status, doc = result
                self._send_json(status, doc)
            return
        self._send_json(
            404, {"error": {"code": "not_found", "message": f"no route for {method} {url.path}"}}
        )

    def do_GET(self):
        self._dispatch("GET")

    def do_POST(self):
        self._dispatch("POST")

    def do_PUT(self):
        self._dispatch("PUT")

    def do_PATCH(self):
        self._dispatch("PATCH")

    def do_DELETE(self):
        self._dispatch("DELETE")

    def _authenticate(self) -> str:
        header = self.headers.get("Authorization", "")
        token = header[7:] if header.startswith("Bearer ") else None
        return self.instance.authenticate(token)

    def _read_body(self) -> dict:
        length = int(self.headers.get("Content-Length", "0"))
        raw = self.rfile.read(length) if length else b""
        if not raw:
            return {}
        doc = json.loads(raw)
        if not isinstance(doc, dict):
            raise InvalidManifest("request body must be a JSON object")
        return doc

    def _send_json(self, status: int, doc: dict) -> None:
        body = json.dumps(doc).encode("utf-8")
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_stream(self, stream: _Stream) -> None:
        self.send_response(200)
        self.send_header("Content-Type", "text/plain; charset=utf-8")
        self.send_header("Connection", "close")
        self.end_headers()
        try:
            for line in stream.lines:
                self.wfile.write(line.encode("utf-8") + b"\n")
                self.wfile.flush()
        except (BrokenPipeError, ConnectionResetError):
            pass  # client went away mid-follow
        self.close_connection = True

    # -- handlers ---------------------------------------------------------------

    def health(self, m, params, body, user):
        return 200, self.instance.health()

    def asset_publish(self, m, params, body, user):
        manifest = dict(body.get("manifest") or {})
        manifest.setdefault("name", body.get("name", ""))
        manifest.setdefault("kind", body.get("kind", ""))
        manifest.setdefault("description", "")
        record = self.instance.registry.publish_asset(
            owner=user,
            name=manifest["name"],
            kind=AssetKind.parse(manifest["kind"]),
            visibility=Visibility.parse(body.get("visibility", "private")),
            payload=base64.b64decode(body["payload_b64"]),
            manifest=manifest,
        )
        return 201, record.to_dict()

    def asset_list(self, m, params, body, user):
        query = AssetQuery(
            kind_filter=AssetKind.parse(params["kind"]) if params.get("kind") else None,
            name_pattern=params.get("name"),
            include_remote=params.get("remote", "") in ("1", "true", "yes"),
        )
        remote_ids = {r.id for _, r in self.instance.federation.remote_records()}
        local_ids = {r.id for r in self.instance.registry.all_records()}
        out = []
        for record in self.instance.registry.list_assets(query, user):
            doc = record.to_dict()
            doc["remote"] = record.id in remote_ids and record.id not in local_ids
            out.append(doc)
        return 200, {"assets": out}

    def asset_get(self, m, params, body, user):
        asset_id = m.group("id")
        version = int(params["version"]) if params.get("version") else None
        try:
            record, entry, payload = self.instance.registry.get_asset(asset_id, version, user)
            remote = False
        except NotFound:
            backend_id = self.instance.federation.origin_of(asset_id)
            if backend_id is None:
                raise
            record = self.instance.federation.remote_lookup(backend_id, asset_id)
            entry = record.latest if version is None else record.version_entry(version)
            payload = self.instance.federation.pull_payload(backend_id, asset_id, entry.version)
            remote = True
        doc = record.to_dict()
        doc["remote"] = remote
        doc["version"] = entry.to_dict()
        doc["payload_b64"] = base64.b64encode(payload).decode("ascii")
        return 200, doc

    def asset_update(self, m, params, body, user):
        version = self.instance.registry.update_asset(
            owner=user,
            asset_id=m.group("id"),
            payload=base64.b64decode(body["payload_b64"]),
            manifest=body.get("manifest") or {},
        )
        return 200, version.to_dict()

    def _pin_refs(self, refs_body: list, user: str) -> list[AssetRef]:
        refs = []
        for raw in refs_body or []:
            ref = AssetRef.from_dict(raw)
            if ref.pinned_version == 0:
                # No explicit pin: freeze today's latest version into the ref.
                if ref.backend is None:
                    record = self.instance.registry.lookup(ref.asset_id)
                else:
                    record = self.instance.federation.remote_lookup(ref.backend, ref.asset_id)
                if record is None:
                    raise UnresolvedRef(f"asset {ref.asset_id} not found")
                ref = replace(ref, pinned_version=record.latest.version)
            refs.append(ref)
        return refs

    def dt_compose(self, m, params, body, user):
        refs = self._pin_refs(body.get("refs") or [], user)
        lifecycle = (
            LifecycleSpec.from_dict(body["lifecycle"])
            if body.get("lifecycle")
            else LifecycleSpec()
        )
        doc = self.instance.compose_dt(
            owner=user,
            name=body.get("name", ""),
            refs=refs,
            config=body.get("config") or {},
            lifecycle=lifecycle,
        )
        return 201, doc

    def dt_list(self, m, params, body, user):
        return 200, {"dts": self.instance.list_dts()}

    def dt_show(self, m, params, body, user):
        self.instance.ensure_manager(m.group("id"))
        return 200, self.instance.describe_dt(m.group("id"))

    def dt_reconfigure(self, m, params, body, user):
        refs = self._pin_refs(body["refs"], user) if body.get("refs") else None
        doc = self.instance.reconfigure_dt(
            m.group("id"), body.get("config") or {}, user, new_refs=refs
        )
        return 200, doc

    def dt_transition(self, m, params, body, user):
        target = Phase.parse(body.get("target", ""))
        doc = self.instance.transition_dt(m.group("id"), target, user)
        return 200, doc

    def dt_peers(self, m, params, body, user):
        doc = self.instance.set_peers(m.group("id"), list(body.get("peers") or []), user)
        return 200, doc

    def job_submit(self, m, params, body, user):
        override = {
            key: body[key] for key in ("mode", "time_limit_s", "restart") if key in body
        }
        doc = self.instance.submit_job(
            body["dt_id"],
            requester=user,
            trigger=body.get("trigger", "api"),
            mode_override=override or None,
        )
        return 201, doc

    def _visible_job(self, job_id: str, user: str):
        job = self.instance.jobs.get_job(job_id)
        if job.trial and job.owner != user:
            raise NotFound(f"job {job_id} not found")  # workspace privacy
        return job

    def job_get(self, m, params, body, user):
        return 200, self._visible_job(m.group("id"), user).to_dict()

    def job_list(self, m, params, body, user):
        jobs = self.instance.jobs.list_jobs(dt_id=params.get("dt_id"))
        visible = [j.to_dict() for j in jobs if not j.trial or j.owner == user]
        return 200, {"jobs": visible}

    def job_logs(self, m, params, body, user):
        job = self._visible_job(m.group("id"), user)
        follow = params.get("follow", "") in ("1", "true", "yes")
        return _Stream(self.instance.jobs.fetch_logs(job.job_id, follow=follow))

    def job_terminate(self, m, params, body, user):
        job = self._visible_job(m.group("id"), user)
        if job.owner not in (None, user) and user != "admin":
            raise Forbidden(f"job {job.job_id} belongs to {job.owner}")
        grace = float(params.get("grace_s", 5.0))
        return 200, self.instance.jobs.terminate_job(job.job_id, grace_s=grace).to_dict()

    def fed_link(self, m, params, body, user):
        link = self.instance.federation.link_backend(
            body["endpoint"],
            token=body.get("token"),
            sync_interval_s=float(body.get("sync_interval_s", 0) or 0),
        )
        return 201, link.to_dict()

    def fed_links(self, m, params, body, user):
        links = [l.to_dict() for l in self.instance.federation.links.values()]
        return 200, {"links": sorted(links, key=lambda d: d["backend_id"])}

    def fed_sync(self, m, params, body, user):
        return 200, self.instance.federation.sync_catalog(m.group("id"))

    def fed_pull(self, m, params, body, user):
        payload = self.instance.federation.pull_payload(
            body["backend"],
            body["asset_id"],
            int(body["version"]) if body.get("version") else None,
        )
        return 200, {
            "asset_id": body["asset_id"],
            "backend": body["backend"],
            "bytes": len(payload),
            "content_hash": content_hash(payload),
        }

    def fed_push(self, m, params, body, user):
        return 200, self.instance.federation.push_changes(
            body["backend"], owner=body.get("owner")
        )

    def trial_run(self, m, params, body, user):
        return 201, self.instance.trial_run(user, body.get("config") or {})

    def user_create(self, m, params, body, user):
        return 201, self.instance.create_user(user, body.get("name", ""))

    def metric_post(self, m, params, body, user):
        doc = self.instance.post_metric(
            m.group("id"),
            body["name"],
            body["value"],
            ts=body.get("ts"),
            labels=body.get("labels"),
        )
        return 201, doc

    def metric_get(self, m, params, body, user):
        metrics = self.instance.get_metrics(
            m.group("id"),
            name=params.get("name"),
            limit=int(params.get("limit", 500)),
        )
        if params.get("since"):
            since = float(params["since"])
            metrics = [mt for mt in metrics if mt["ts"] >= since]
        return 200, {"metrics": metrics}

    def config_validate(self, m, params, body, user):
        config = body.get("config")
        if config is None:
            config = body
        diags = [d.to_dict() for d in validate_config(config)]
        warnings = []
        manifests = []
        for raw in body.get("refs") or []:
            record = self.instance.registry.lookup(raw.get("asset_id", ""))
            if record is not None:
                manifests.append(record.latest.manifest)
        if manifests:
            warnings = [d.to_dict() for d in interface_warnings(manifests)]
        return 200, {"valid": not diags, "diagnostics": diags, "warnings": warnings}


class TwinService:
    """Binds one instance to an HTTP listener."""

    def __init__(self, instance: TwinInstance, host: str = "127.0.0.1", port: int = 0):
        handler = type("BoundHandler", (_Handler,), {"instance": instance})
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._httpd.daemon_threads = True
        self.instance = instance
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, daemon=True, name="api-http"
        )

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> "TwinService":
        self.instance.start()
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self.instance.stop()


def serve(config: dict, host: str = "127.0.0.1") -> TwinService:
    instance = TwinInstance(config)
    return TwinService(instance, host, int(config.get("port", 0))).start()
