"""Standalone catalog backend: a shared asset directory instances sync against.

HTTP surface (JSON unless noted):

    GET  /info                    service banner and protocol number
    GET  /catalog/delta?cursor=T  records touched after cursor T (common only)
    GET  /blob/<digest>           raw payload bytes by content hash
    POST /catalog/append          compare-and-append one asset version

Append carries ``{"asset_id", "base_version", "manifest", "payload_b64"}``
plus an ``owner`` field for first-time records. It succeeds with
``201 {"version": base_version+1}`` only when ``base_version`` equals the
version count the backend currently holds for that asset; anything else is a
409, which is how two instances racing to advance the same asset get
serialized. The delta cursor is an opaque token; internally it is the journal
sequence number of the last entry the caller saw.
"""

from __future__ import annotations

import base64
import json
import re
import threading
import time
import uuid
from dataclasses import replace
from http.server import BaseHTTPRequestHandler, ThreadingHTTPServer
from pathlib import Path
from typing import Optional
from urllib.parse import parse_qs, urlparse

from .blobstore import BlobStore, content_hash
from .errors import Conflict, InvalidManifest, NotFound, TwinError, Unauthorized
from .recordlog import RecordLog
from .registry import (
    AssetKind,
    AssetRecord,
    AssetVersion,
    Registry,
    Visibility,
    validate_manifest,
)

PROTOCOL_VERSION = 1
SERVICE_NAME = "twinforge-backend"

_BLOB_RE = re.compile(r"^/blob/([0-9a-f]{64})$")


class Backend:
    """Catalog state plus the journal the delta endpoint walks."""

    def __init__(self, data_dir: str | Path, backend_id: str = "backend",
                 token: Optional[str] = None):
        self.data_dir = Path(data_dir)
        self.backend_id = backend_id
        self.token = token
        self._lock = threading.RLock()
        self.blobs = BlobStore(self.data_dir)
        self._log = RecordLog(self.data_dir / "catalog.log")
        self._journal: list[dict] = []  # {"seq": n, "asset_id": id}
        self.registry = Registry(self.blobs)
        for rec in self._log.replay():
            if rec.get("event") == "record":
                record = AssetRecord.from_dict(rec["record"])
                self.registry.install(record)
                self._journal.append({"seq": rec["seq"], "asset_id": record.id})

    @property
    def cursor(self) -> str:
        with self._lock:
            return str(self._journal[-1]["seq"]) if self._journal else "0"

    def append(self, asset_id: str, base_version: int, manifest: dict,
               payload: bytes, owner: str = "remote") -> int:
        """Compare-and-append one version; returns the new version number."""
        with self._lock:
            record = self.registry.lookup(asset_id)
            current = len(record.versions) if record is not None else 0
            if base_version != current:
                raise Conflict(
                    f"asset {asset_id} is at version {current}, append based on {base_version}"
                )
            if record is None:
                kind = AssetKind.parse(manifest.get("kind", ""))
                validate_manifest(manifest, kind)
                digest = self.blobs.put(payload)
                record = AssetRecord(
                    id=asset_id,
                    name=manifest["name"],
                    kind=kind,
                    owner=owner,
                    visibility=Visibility.COMMON,
                    versions=(
                        AssetVersion(
                            version=1,
                            content_hash=digest,
                            manifest=manifest,
                            payload_ref=self.blobs.storage_key(digest),
                        ),
                    ),
                    created_at=time.time(),
                )
            else:
                validate_manifest(manifest, record.kind)
                digest = self.blobs.put(payload)
                record = replace(
                    record,
                    versions=record.versions
                    + (
                        AssetVersion(
                            version=current + 1,
                            content_hash=digest,
                            manifest=manifest,
                            payload_ref=self.blobs.storage_key(digest),
                        ),
                    ),
                )
            self.registry.install(record)
            seq = (self._journal[-1]["seq"] + 1) if self._journal else 1
            self._journal.append({"seq": seq, "asset_id": record.id})
            self._log.append({"event": "record", "seq": seq, "record": record.to_dict()})
            return len(record.versions)

    def publish(self, manifest: dict, payload: bytes, owner: str = "backend",
                asset_id: Optional[str] = None,
                visibility: Visibility = Visibility.COMMON) -> AssetRecord:
        """In-process seeding helper; the wire equivalent is a base-0 append.

        Private records never travel the wire (append only creates common
        ones); they exist through administrative seeding like this, and they
        share the journal so delta filtering stays observable.
        """
        asset_id = asset_id or ("ast-" + uuid.uuid4().hex[:12])
        if visibility is Visibility.COMMON:
            self.append(asset_id, 0, manifest, payload, owner=owner)
            return self.registry.lookup(asset_id)
        with self._lock:
            kind = AssetKind.parse(manifest.get("kind", ""))
            validate_manifest(manifest, kind)
            digest = self.blobs.put(payload)
            record = AssetRecord(
                id=asset_id,
                name=manifest["name"],
                kind=kind,
                owner=owner,
                visibility=visibility,
                versions=(
                    AssetVersion(
                        version=1,
                        content_hash=digest,
                        manifest=manifest,
                        payload_ref=self.blobs.storage_key(digest),
                    ),
                ),
                created_at=time.time(),
            )
            self.registry.install(record)
            seq = (self._journal[-1]["seq"] + 1) if self._journal else 1
            self._journal.append({"seq": seq, "asset_id": record.id})
            self._log.append({"event": "record", "seq": seq, "record": record.to_dict()})
            return record

    def delta(self, cursor: str) -> dict:
        try:
            seen = int(cursor or "0")
        except ValueError:
            raise InvalidManifest(f"cursor {cursor!r} is not a token this backend issued")
        with self._lock:
            touched: list[str] = []
            for entry in self._journal:
                if entry["seq"] > seen and entry["asset_id"] not in touched:
                    touched.append(entry["asset_id"])
            entries = []
            for asset_id in touched:
                record = self.registry.lookup(asset_id)
                if record is not None and record.visibility is Visibility.COMMON:
                    entries.append(record.to_dict())
            return {"entries": entries, "cursor": self.cursor}

    def blob(self, digest: str) -> bytes:
        try:
            return self.blobs.get(digest)
        except KeyError:
            raise NotFound(f"blob {digest[:12]} not stored here")

    def info(self) -> dict:
        return {
            "service": SERVICE_NAME,
            "protocol": PROTOCOL_VERSION,
            "backend_id": self.backend_id,
            "cursor": self.cursor,
        }

    def reset(self) -> None:
        """Drop all catalog state. Exists for test fixtures that reuse one server."""
        with self._lock:
            self._journal.clear()
            self.registry = Registry(self.blobs)
            self._log.close()
            self._log.path.unlink(missing_ok=True)
            self._log = RecordLog(self._log.path)

    def close(self) -> None:
        self._log.close()


class _Handler(BaseHTTPRequestHandler):
    backend: Backend = None  # type: ignore[assignment]
    protocol_version = "HTTP/1.1"

    def log_message(self, fmt, *args):  # quiet by default
        pass

    def _send(self, status: int, body: bytes, content_type: str = "application/json") -> None:
        self.send_response(status)
        self.send_header("Content-Type", content_type)
        self.send_header("Content-Length", str(len(body)))
        self.end_headers()
        self.wfile.write(body)

    def _send_json(self, status: int, doc: dict) -> None:
        self._send(status, json.dumps(doc).encode("utf-8"))

    def _send_error(self, exc: TwinError) -> None:
        self._send_json(exc.http_status, {"error": exc.to_dict()})

    def _authorized(self) -> bool:
        if self.backend.token is None:
            return True
        header = self.headers.get("Authorization", "")
        return header == f"Bearer {self.backend.token}"

    def do_GET(self) -> None:
        url = urlparse(self.path)
        try:
            if url.path == "/info":
                self._send_json(200, self.backend.info())
                return
            if not self._authorized():
                raise Unauthorized("missing or invalid backend token")
            if url.path == "/catalog/delta":
                params = parse_qs(url.query)
                cursor = params.get("cursor", ["0"])[0]
                self._send_json(200, self.backend.delta(cursor))
                return
            m = _BLOB_RE.match(url.path)
            if m:
                data = self.backend.blob(m.group(1))
                self._send(200, data, content_type="application/octet-stream")
                return
            raise NotFound(f"no route for GET {url.path}")
        except TwinError as exc:
            self._send_error(exc)
        except (ValueError, json.JSONDecodeError) as exc:
            self._send_json(400, {"error": {"code": "bad_request", "message": str(exc)}})

    def do_POST(self) -> None:
        url = urlparse(self.path)
        try:
            if not self._authorized():
                raise Unauthorized("missing or invalid backend token")
            length = int(self.headers.get("Content-Length", "0"))
            body = json.loads(self.rfile.read(length) if length else b"{}")
            if url.path == "/catalog/append":
                version = self.backend.append(
                    body["asset_id"],
                    int(body["base_version"]),
                    body["manifest"],
                    base64.b64decode(body["payload_b64"]),
                    owner=body.get("owner", "remote"),
                )
                self._send_json(201, {"version": version})
                return
            raise NotFound(f"no route for POST {url.path}")
        except TwinError as exc:
            self._send_error(exc)
        except (KeyError, ValueError, json.JSONDecodeError) as exc:
            self._send_json(400, {"error": {"code": "bad_request", "message": str(exc)}})


class BackendServer:
    def __init__(self, backend: Backend, host: str = "127.0.0.1", port: int = 0):
        handler = type("BoundHandler", (_Handler,), {"backend": backend})
        self._httpd = ThreadingHTTPServer((host, port), handler)
        self._httpd.daemon_threads = True
        self.backend = backend
        self.port = self._httpd.server_address[1]
        self._thread = threading.Thread(
            target=self._httpd.serve_forever, daemon=True, name="backend-http"
        )

    @property
    def url(self) -> str:
        return f"http://127.0.0.1:{self.port}"

    def start(self) -> "BackendServer":
        self._thread.start()
        return self

    def stop(self) -> None:
        self._httpd.shutdown()
        self._httpd.server_close()
        self.backend.close()


def serve_backend(data_dir: str | Path, host: str = "127.0.0.1", port: int = 0,
                  backend_id: str = "backend", token: Optional[str] = None) -> BackendServer:
    return BackendServer(Backend(data_dir, backend_id, token), host, port).start()
