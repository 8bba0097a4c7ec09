"""Versioned, visibility-scoped asset registry backed by the blob store.

Assets are append-only: publishing creates version 1, updates append version
N+1, and every historical payload stays byte-identical and retrievable.
Visibility is two-valued: common assets are discoverable by everyone, private
assets only by their owner. Reads of someone else's private asset answer
NotFound so existence never leaks.
"""

from __future__ import annotations

import fnmatch
import threading
import time
import uuid
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Optional

from .blobstore import BlobStore, content_hash
from .errors import (
    CorruptPayload,
    DuplicateName,
    InvalidManifest,
    Forbidden,
    NotFound,
)
from .recordlog import RecordLog


class AssetKind(str, Enum):
    MODEL = "model"
    DATA = "data"
    FUNCTION = "function"
    SERVICE = "service"
    SOLVER = "solver"

    @classmethod
    def parse(cls, value: str) -> "AssetKind":
        try:
            return cls(value)
        except ValueError:
            raise InvalidManifest(f"unknown asset kind {value!r}")


class Visibility(str, Enum):
    PRIVATE = "private"
    COMMON = "common"

    @classmethod
    def parse(cls, value: str) -> "Visibility":
        try:
            return cls(value)
        except ValueError:
            raise InvalidManifest(f"unknown visibility {value!r}")


@dataclass(frozen=True)
class AssetVersion:
    version: int
    content_hash: str
    manifest: dict
    payload_ref: str

    def to_dict(self) -> dict:
        return {
            "version": self.version,
            "content_hash": self.content_hash,
            "manifest": self.manifest,
            "payload_ref": self.payload_ref,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AssetVersion":
        return cls(
            version=int(data["version"]),
            content_hash=data["content_hash"],
            manifest=data["manifest"],
            payload_ref=data["payload_ref"],
        )


@dataclass(frozen=True)
class AssetRecord:
    id: str
    name: str
    kind: AssetKind
    owner: str
    visibility: Visibility
    versions: tuple[AssetVersion, ...]
    created_at: float

    @property
    def latest(self) -> AssetVersion:
        return self.versions[-1]

    def version_entry(self, version: int) -> AssetVersion:
        for v in self.versions:
            if v.version == version:
                return v
        raise NotFound(f"asset {self.id} has no version {version}")

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "name": self.name,
            "kind": self.kind.value,
            "owner": self.owner,
            "visibility": self.visibility.value,
            "versions": [v.to_dict() for v in self.versions],
            "created_at": self.created_at,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AssetRecord":
        return cls(
            id=data["id"],
            name=data["name"],
            kind=AssetKind.parse(data["kind"]),
            owner=data["owner"],
            visibility=Visibility.parse(data["visibility"]),
            versions=tuple(AssetVersion.from_dict(v) for v in data["versions"]),
            created_at=float(data["created_at"]),
        )


@dataclass
class AssetQuery:
    kind_filter: Optional[AssetKind] = None
    name_pattern: Optional[str] = None
    owner_filter: Optional[str] = None
    include_remote: bool = False

    def matches(self, record: AssetRecord) -> bool:
        if self.kind_filter is not None and record.kind != self.kind_filter:
            return False
        if self.name_pattern is not None and not fnmatch.fnmatchcase(
            record.name, self.name_pattern
        ):
            return False
        if self.owner_filter is not None and record.owner != self.owner_filter:
            return False
        return True


def visible(record: AssetRecord, user: str) -> bool:
    return record.visibility == Visibility.COMMON or record.owner == user


MANIFEST_KINDS = {k.value for k in AssetKind}


def validate_manifest(manifest, kind: Optional[AssetKind] = None) -> dict:
    """Check a manifest document against the manifest schema; return it."""
    if not isinstance(manifest, dict):
        raise InvalidManifest("manifest must be a JSON object")
    for key in ("name", "kind", "description"):
        if key not in manifest:
            raise InvalidManifest(f"manifest missing required key {key!r}")
    if not isinstance(manifest["name"], str) or not manifest["name"]:
        raise InvalidManifest("manifest name must be a non-empty string")
    if manifest["kind"] not in MANIFEST_KINDS:
        raise InvalidManifest(f"manifest kind {manifest['kind']!r} not one of {sorted(MANIFEST_KINDS)}")
    if not isinstance(manifest["description"], str):
        raise InvalidManifest("manifest description must be a string")
    if kind is not None and manifest["kind"] != kind.value:
        raise InvalidManifest(
            f"manifest kind {manifest['kind']!r} does not match asset kind {kind.value!r}"
        )
    iface = manifest.get("interface")
    if iface is not None:
        if not isinstance(iface, dict):
            raise InvalidManifest("manifest interface must be an object")
        for side in ("inputs", "outputs"):
            if side in iface and not isinstance(iface[side], list):
                raise InvalidManifest(f"manifest interface.{side} must be a list")
    if "deprecated" in manifest and not isinstance(manifest["deprecated"], bool):
        raise InvalidManifest("manifest deprecated must be a boolean")
    return manifest


def new_asset_id() -> str:
    return "ast-" + uuid.uuid4().hex[:12]


class Registry:
    """Catalog of asset records; one per backend/instance.

    Safe for concurrent readers and writers. Per-asset writes serialize on a
    per-asset lock; returned records are immutable snapshots.
    """

    def __init__(
        self,
        blobs: BlobStore,
        log: Optional[RecordLog] = None,
        remote_provider: Optional[Callable[[], list[AssetRecord]]] = None,
    ):
        self.blobs = blobs
        self.log = log
        self.remote_provider = remote_provider
        self._records: dict[str, AssetRecord] = {}
        self._by_name: dict[tuple[str, AssetKind, str], str] = {}
        self._lock = threading.RLock()
        self._asset_locks: dict[str, threading.Lock] = {}
        self._hooks: list[Callable[[str, AssetRecord], None]] = []
        if log is not None:
            self._replay()

    def _replay(self) -> None:
        for rec in self.log.replay():
            if rec["event"] == "publish":
                record = AssetRecord.from_dict(rec["record"])
                self._records[record.id] = record
                self._by_name[(record.owner, record.kind, record.name)] = record.id
            elif rec["event"] == "update":
                record = self._records[rec["asset_id"]]
                version = AssetVersion.from_dict(rec["version"])
                self._records[record.id] = replace(
                    record, versions=record.versions + (version,)
                )

    def add_hook(self, fn: Callable[[str, AssetRecord], None]) -> None:
        """Register a callback fired as fn(event, record) after publish/update."""
        self._hooks.append(fn)

    def _fire(self, event: str, record: AssetRecord) -> None:
        for fn in self._hooks:
            try:
                fn(event, record)
            except Exception:
                pass  # hooks must not break registry writes

    def _asset_lock(self, asset_id: str) -> threading.Lock:
        with self._lock:
            return self._asset_locks.setdefault(asset_id, threading.Lock())

    # -- operations ---------------------------------------------------------

    def publish_asset(
        self,
        owner: str,
        name: str,
        kind: AssetKind,
        visibility: Visibility,
        payload: bytes,
        manifest: dict,
        asset_id: Optional[str] = None,
    ) -> AssetRecord:
        if not name:
            raise InvalidManifest("asset name must be non-empty")
        validate_manifest(manifest, kind)
        digest = self.blobs.put(payload)
        with self._lock:
            key = (owner, kind, name)
            if key in self._by_name:
                raise DuplicateName(
                    f"{owner} already has a {kind.value} asset named {name!r}"
                )
            record = AssetRecord(
                id=asset_id or new_asset_id(),
                name=name,
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
            self._records[record.id] = record
            self._by_name[key] = record.id
        if self.log is not None:
            self.log.append({"event": "publish", "record": record.to_dict()})
        self._fire("publish", record)
        return record

    def update_asset(
        self, owner: str, asset_id: str, payload: bytes, manifest: dict
    ) -> AssetVersion:
        with self._lock:
            record = self._records.get(asset_id)
        if record is None:
            raise NotFound(f"asset {asset_id} not found")
        if record.owner != owner:
            raise Forbidden(f"{owner} does not own asset {asset_id}")
        # Partial manifests inherit the rest from the latest version.
        merged = {**record.latest.manifest, **(manifest or {})}
        validate_manifest(merged, record.kind)
        with self._asset_lock(asset_id):
            digest = self.blobs.put(payload)
            with self._lock:
                record = self._records[asset_id]
                version = AssetVersion(
                    version=record.latest.version + 1,
                    content_hash=digest,
                    manifest=merged,
                    payload_ref=self.blobs.storage_key(digest),
                )
                updated = replace(record, versions=record.versions + (version,))
                self._records[asset_id] = updated
        if self.log is not None:
            self.log.append(
                {"event": "update", "asset_id": asset_id, "version": version.to_dict()}
            )
        self._fire("update", updated)
        return version

    def list_assets(self, query: AssetQuery, requester: str) -> list[AssetRecord]:
        with self._lock:
            records = list(self._records.values())
        out = [r for r in records if visible(r, requester) and query.matches(r)]
        if query.include_remote and self.remote_provider is not None:
            seen = {r.id for r in out}
            for r in self.remote_provider():
                if r.id not in seen and query.matches(r):
                    out.append(r)
        out.sort(key=lambda r: (r.name, r.id))
        return out

    def get_asset(
        self, asset_id: str, version: Optional[int], requester: str
    ) -> tuple[AssetRecord, AssetVersion, bytes]:
        with self._lock:
            record = self._records.get(asset_id)
        # Private assets of other users answer NotFound: existence must not leak.
        if record is None or not visible(record, requester):
            raise NotFound(f"asset {asset_id} not found")
        entry = record.latest if version is None else record.version_entry(version)
        try:
            payload = self.blobs.get(entry.content_hash)
        except KeyError:
            raise CorruptPayload(f"payload for asset {asset_id} v{entry.version} missing")
        if content_hash(payload) != entry.content_hash:
            raise CorruptPayload(
                f"payload digest mismatch for asset {asset_id} v{entry.version}"
            )
        return record, entry, payload

    # -- internal (instance-side) lookups, no visibility filtering ----------

    def lookup(self, asset_id: str) -> Optional[AssetRecord]:
        with self._lock:
            return self._records.get(asset_id)

    def install(self, record: AssetRecord) -> None:
        """Insert or replace a whole record, bypassing ownership checks.

        For absorbing records authored elsewhere (catalog replication); the
        surrounding journal, not this method, is the authority on content.
        """
        with self._lock:
            self._records[record.id] = record
            self._by_name[(record.owner, record.kind, record.name)] = record.id

    def all_records(self) -> list[AssetRecord]:
        with self._lock:
            return list(self._records.values())
