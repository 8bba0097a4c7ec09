"""Content-addressed payload store: ``store/<first-2-hex>/<full-hash>``.

Payloads are opaque byte blobs keyed by their sha256 digest. Writes are
idempotent (same bytes, same key); nothing is ever deleted.
"""

from __future__ import annotations

import hashlib
import os
import threading
from pathlib import Path


def content_hash(payload: bytes) -> str:
    return hashlib.sha256(payload).hexdigest()


class BlobStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = threading.Lock()

    def _path(self, digest: str) -> Path:
        return self.root / digest[:2] / digest

    def storage_key(self, digest: str) -> str:
        return f"store/{digest[:2]}/{digest}"

    def put(self, payload: bytes) -> str:
        """Store payload, return its hex digest."""
        digest = content_hash(payload)
        path = self._path(digest)
        if path.exists():
            return digest
        with self._lock:
            path.parent.mkdir(parents=True, exist_ok=True)
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(payload)
            os.replace(tmp, path)
        return digest

    def get(self, digest: str) -> bytes:
        path = self._path(digest)
        if not path.exists():
            raise KeyError(digest)
        return path.read_bytes()

    def __contains__(self, digest: str) -> bool:
        return self._path(digest).exists()
