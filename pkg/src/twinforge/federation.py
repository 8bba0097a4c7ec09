"""Backend links, catalog sync, and cross-instance twin coordination.

An instance can link any number of catalog backends. Sync walks each
backend's journal from the last seen cursor and absorbs common-visibility
records into a local shadow table; payloads are pulled lazily, by content
hash, and verified against that hash before they enter the local blob store,
so a cached asset keeps working after its source backend goes away. Push is
the inverse: each new local version travels as a compare-and-append on
``(asset_id, base_version)``, so two instances racing to advance the same
asset get one winner and one conflict instead of a silent overwrite.

Sync, pull, and push on one link are serialized by a per-link lock;
different links proceed concurrently.

Instances that share a message broker also exchange twin announcements on a
well-known topic. The resulting shadow table records which instance manages
which twin, so a management request landing on the wrong instance is refused
instead of acted on.
"""

from __future__ import annotations

import base64
import json
import threading
import time
from typing import Optional

import requests

from .blobstore import BlobStore, content_hash
from .composer import AssetRef
from .errors import (
    BrokerUnreachable,
    DuplicateLink,
    NotFound,
    PeerUnknown,
    ProtocolMismatch,
    TwinError,
    Unreachable,
    error_from_code,
)
from .registry import AssetRecord, Registry, Visibility

ANNOUNCE_TOPIC = "fed.announce"
BACKEND_PROTOCOL = 1
BACKEND_SERVICE = "twinforge-backend"
DEFAULT_SYNC_INTERVAL_S = 5.0
HTTP_TIMEOUT_S = 5.0


class BackendLink:
    def __init__(self, backend_id: str, endpoint: str, token: Optional[str] = None,
                 sync_interval_s: float = DEFAULT_SYNC_INTERVAL_S):
        self.backend_id = backend_id
        self.endpoint = endpoint.rstrip("/")
        self.token = token
        self.sync_interval_s = sync_interval_s
        self.cursor = "0"
        self.linked_at = time.time()
        self.last_sync: Optional[float] = None
        self.lock = threading.RLock()  # serializes sync/pull/push on this link

    def to_dict(self) -> dict:
        return {
            "backend_id": self.backend_id,
            "endpoint": self.endpoint,
            "sync_interval_s": self.sync_interval_s,
            "cursor": self.cursor,
            "linked_at": self.linked_at,
            "last_sync": self.last_sync,
        }


class RemoteAsset:
    """Shadow of a common asset that lives on a linked backend."""

    def __init__(self, backend_id: str, record: AssetRecord, synced_at: float):
        self.backend_id = backend_id
        self.record = record
        self.synced_at = synced_at


class TwinShadow:
    """Where a federated twin actually runs, as heard over the broker."""

    def __init__(self, dt_id: str, name: str, owner: str, instance: str,
                 peers: tuple[str, ...]):
        self.dt_id = dt_id
        self.name = name
        self.owner = owner
        self.instance = instance
        self.peers = peers

    def to_dict(self) -> dict:
        return {
            "dt_id": self.dt_id,
            "name": self.name,
            "owner": self.owner,
            "instance": self.instance,
            "peers": list(self.peers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TwinShadow":
        return cls(d["dt_id"], d["name"], d["owner"], d["instance"], tuple(d["peers"]))


class Federation:
    def __init__(self, registry: Registry, blobs: BlobStore, instance_id: str,
                 log=None, broker_client=None):
        self.registry = registry
        self.blobs = blobs
        self.instance_id = instance_id
        self.log = log
        self.broker_client = broker_client
        self.links: dict[str, BackendLink] = {}
        self._remote: dict[tuple[str, str], RemoteAsset] = {}  # (backend_id, asset_id)
        self.twins: dict[str, TwinShadow] = {}
        self._lock = threading.RLock()
        self._stopping = threading.Event()
        self._announce_sub = None
        if log is not None:
            self._replay()

    # -- persistence -----------------------------------------------------------

    def _replay(self) -> None:
        for rec in self.log.replay():
            event = rec["event"]
            if event == "linked":
                link = BackendLink(
                    rec["backend_id"],
                    rec["endpoint"],
                    rec.get("token"),
                    rec.get("sync_interval_s", DEFAULT_SYNC_INTERVAL_S),
                )
                self.links[link.backend_id] = link
            elif event == "synced":
                link = self.links.get(rec["backend_id"])
                if link is not None:
                    link.cursor = rec["cursor"]
                    link.last_sync = rec.get("ts")
                for record_dict in rec.get("records", []):
                    self._absorb(rec["backend_id"], record_dict)
            elif event == "pushed":
                for record_dict in rec.get("records", []):
                    self._absorb(rec["backend_id"], record_dict)
            elif event == "twin":
                shadow = TwinShadow.from_dict(rec["shadow"])
                self.twins[shadow.dt_id] = shadow

    # -- HTTP plumbing ----------------------------------------------------------

    @staticmethod
    def _headers(link: BackendLink) -> dict:
        if link.token:
            return {"Authorization": f"Bearer {link.token}"}
        return {}

    def _get(self, link: BackendLink, path: str, **kwargs):
        try:
            return requests.get(link.endpoint + path, headers=self._headers(link),
                                timeout=HTTP_TIMEOUT_S, **kwargs)
        except requests.RequestException as exc:
            raise Unreachable(f"backend {link.backend_id} at {link.endpoint}: {exc}")

    def _post(self, link: BackendLink, path: str, body: dict):
        try:
            return requests.post(link.endpoint + path, json=body,
                                 headers=self._headers(link), timeout=HTTP_TIMEOUT_S)
        except requests.RequestException as exc:
            raise Unreachable(f"backend {link.backend_id} at {link.endpoint}: {exc}")

    @staticmethod
    def _raise_remote_error(response) -> None:
        try:
            detail = response.json()["error"]
        except (ValueError, KeyError):
            raise ProtocolMismatch(
                f"backend answered {response.status_code} without an error document"
            )
        raise error_from_code(detail.get("code", ""), detail.get("message", ""))

    # -- linking ------------------------------------------------------------------

    def link_backend(self, endpoint: str, token: Optional[str] = None,
                     sync_interval_s: float = DEFAULT_SYNC_INTERVAL_S) -> BackendLink:
        probe = BackendLink("?", endpoint, token, sync_interval_s)
        response = self._get(probe, "/info")
        try:
            info = response.json()
        except ValueError:
            raise ProtocolMismatch(f"{endpoint} did not answer with a service banner")
        if info.get("service") != BACKEND_SERVICE:
            raise ProtocolMismatch(
                f"{endpoint} is not a catalog backend: {info.get('service')!r}"
            )
        if info.get("protocol") != BACKEND_PROTOCOL:
            raise ProtocolMismatch(
                f"backend speaks protocol {info.get('protocol')}, "
                f"this instance speaks {BACKEND_PROTOCOL}"
            )
        backend_id = info.get("backend_id") or endpoint
        link = BackendLink(backend_id, endpoint, token, sync_interval_s)
        with self._lock:
            if backend_id in self.links:
                raise DuplicateLink(f"backend {backend_id!r} already linked")
            self.links[backend_id] = link
        if self.log is not None:
            self.log.append(
                {
                    "event": "linked",
                    "backend_id": backend_id,
                    "endpoint": link.endpoint,
                    "token": token,
                    "sync_interval_s": sync_interval_s,
                }
            )
        return link

    def _link(self, backend_id: str) -> BackendLink:
        with self._lock:
            link = self.links.get(backend_id)
        if link is None:
            raise NotFound(f"no linked backend named {backend_id!r}")
        return link

    # -- sync -----------------------------------------------------------------------

    def _absorb(self, backend_id: str, record_dict: dict) -> None:
        record = AssetRecord.from_dict(record_dict)
        if record.visibility is not Visibility.COMMON:
            return  # private records never cross the wire; belt and braces
        with self._lock:
            existing = self._remote.get((backend_id, record.id))
            if existing is not None and len(existing.record.versions) >= len(record.versions):
                existing.synced_at = time.time()
                return
            self._remote[(backend_id, record.id)] = RemoteAsset(
                backend_id, record, time.time()
            )

    def sync_catalog(self, backend_id: str) -> dict:
        link = self._link(backend_id)
        with link.lock:
            response = self._get(link, "/catalog/delta", params={"cursor": link.cursor})
            if response.status_code != 200:
                self._raise_remote_error(response)
            try:
                delta = response.json()
                records = delta["entries"]
                new_cursor = delta["cursor"]
            except (ValueError, KeyError):
                raise ProtocolMismatch(f"backend {backend_id} returned a malformed delta")
            for record_dict in records:
                self._absorb(backend_id, record_dict)
            link.cursor = new_cursor
            link.last_sync = time.time()
            if self.log is not None:
                self.log.append(
                    {
                        "event": "synced",
                        "backend_id": backend_id,
                        "cursor": new_cursor,
                        "records": records,
                        "ts": link.last_sync,
                    }
                )
            return {"backend_id": backend_id, "cursor": new_cursor, "absorbed": len(records)}

    def sync_all(self) -> list[dict]:
        return [self.sync_catalog(backend_id) for backend_id in sorted(self.links)]

    # -- remote asset access -------------------------------------------------------

    def remote_lookup(self, backend_id: str, asset_id: str) -> Optional[AssetRecord]:
        with self._lock:
            entry = self._remote.get((backend_id, asset_id))
        return entry.record if entry else None

    def remote_records(self) -> list[tuple[str, AssetRecord]]:
        with self._lock:
            return [(e.backend_id, e.record) for e in self._remote.values()]

    def origin_of(self, asset_id: str) -> Optional[str]:
        with self._lock:
            for (backend_id, aid), _ in self._remote.items():
                if aid == asset_id:
                    return backend_id
        return None

    def pull_payload(self, backend_id: str, asset_id: str,
                     version: Optional[int] = None) -> bytes:
        record = self.remote_lookup(backend_id, asset_id)
        if record is None:
            raise NotFound(f"asset {asset_id} is not in the shadow catalog of {backend_id}")
        entry = record.latest if version is None else record.version_entry(version)
        digest = entry.content_hash
        if digest in self.blobs:
            return self.blobs.get(digest)
        link = self._link(backend_id)
        with link.lock:
            response = self._get(link, f"/blob/{digest}")
            if response.status_code != 200:
                self._raise_remote_error(response)
            payload = response.content
        if content_hash(payload) != digest:
            raise ProtocolMismatch(
                f"backend {backend_id} served a payload that does not match hash {digest[:12]}"
            )
        self.blobs.put(payload)
        return payload

    def remote_payload(self, ref: AssetRef) -> bytes:
        return self.pull_payload(ref.backend, ref.asset_id, ref.pinned_version)

    # -- push ----------------------------------------------------------------------

    def push_changes(self, backend_id: str, owner: Optional[str] = None) -> dict:
        """Send local common-asset versions the backend has not seen yet."""
        link = self._link(backend_id)
        with link.lock:
            with self._lock:
                known = {
                    asset_id: len(entry.record.versions)
                    for (bid, asset_id), entry in self._remote.items()
                    if bid == backend_id
                }
            pushed_versions = 0
            pushed_records: list[dict] = []
            for record in self.registry.all_records():
                if record.visibility is not Visibility.COMMON:
                    continue
                if owner is not None and record.owner != owner:
                    continue
                base = known.get(record.id, 0)
                if base >= len(record.versions):
                    continue
                for entry in record.versions[base:]:
                    payload = self.blobs.get(entry.content_hash)
                    response = self._post(
                        link,
                        "/catalog/append",
                        {
                            "asset_id": record.id,
                            "base_version": entry.version - 1,
                            "manifest": entry.manifest,
                            "payload_b64": base64.b64encode(payload).decode("ascii"),
                            "owner": record.owner,
                        },
                    )
                    if response.status_code != 201:
                        self._raise_remote_error(response)
                    pushed_versions += 1
                pushed_records.append(record.to_dict())
            # Pushed records become their own shadows, so re-push is a no-op.
            for record_dict in pushed_records:
                self._absorb(backend_id, record_dict)
            if self.log is not None and pushed_records:
                self.log.append(
                    {"event": "pushed", "backend_id": backend_id, "records": pushed_records}
                )
            return {
                "backend_id": backend_id,
                "pushed_assets": len(pushed_records),
                "pushed_versions": pushed_versions,
            }

    # -- federated twins over the broker ----------------------------------------------

    def attach_broker(self, broker_client) -> None:
        self.broker_client = broker_client
        if broker_client is None:
            return
        sub = broker_client.subscribe(ANNOUNCE_TOPIC)
        self._announce_sub = sub

        def pump():
            while not self._stopping.is_set():
                message = sub.get(timeout=0.2)
                if message is None:
                    continue
                try:
                    doc = json.loads(message.payload.decode("utf-8"))
                    shadow = TwinShadow.from_dict(doc)
                except (ValueError, KeyError, UnicodeDecodeError):
                    continue
                if shadow.instance == self.instance_id:
                    continue  # own announcements round-trip; ignore them
                with self._lock:
                    self.twins[shadow.dt_id] = shadow
                if self.log is not None:
                    self.log.append({"event": "twin", "shadow": shadow.to_dict()})

        threading.Thread(target=pump, daemon=True, name="fed-announce").start()

    def announce_twin(self, definition, peers: tuple[str, ...] = ()) -> TwinShadow:
        shadow = TwinShadow(
            dt_id=definition.dt_id,
            name=definition.name,
            owner=definition.owner,
            instance=self.instance_id,
            peers=peers,
        )
        with self._lock:
            self.twins[shadow.dt_id] = shadow
        if self.log is not None:
            self.log.append({"event": "twin", "shadow": shadow.to_dict()})
        if self.broker_client is None:
            raise BrokerUnreachable("no broker attached; federated twins need a shared broker")
        try:
            self.broker_client.publish(
                ANNOUNCE_TOPIC, json.dumps(shadow.to_dict()).encode("utf-8")
            )
        except (TwinError, OSError) as exc:
            raise BrokerUnreachable(f"announce failed: {exc}")
        return shadow

    def check_peers(self, peers: tuple[str, ...], local_dt_ids: set[str]) -> None:
        with self._lock:
            known = set(self.twins) | local_dt_ids
        for peer in peers:
            if peer not in known:
                raise PeerUnknown(f"peer twin {peer!r} is not announced anywhere")

    def managing_instance(self, dt_id: str) -> Optional[str]:
        with self._lock:
            shadow = self.twins.get(dt_id)
        return shadow.instance if shadow else None

    # -- background sync --------------------------------------------------------------

    def start_auto_sync(self) -> None:
        """One polling thread per link, at that link's configured interval."""
        with self._lock:
            links = list(self.links.values())
        for link in links:
            if not link.sync_interval_s:
                continue

            def run(link=link):
                while not self._stopping.wait(link.sync_interval_s):
                    try:
                        self.sync_catalog(link.backend_id)
                    except TwinError:
                        pass  # transient; next round retries

            threading.Thread(target=run, daemon=True, name=f"fed-sync-{link.backend_id}").start()

    def close(self) -> None:
        self._stopping.set()
        if self._announce_sub is not None and self.broker_client is not None:
            try:
                self.broker_client.unsubscribe(self._announce_sub)
            except (TwinError, OSError):
                pass
