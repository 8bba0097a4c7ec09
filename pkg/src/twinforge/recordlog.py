"""Append-only line-delimited JSON record logs, replayable at startup.

One log file per module; every state mutation appends one record. Recovery is
a linear replay. A line that fails to parse aborts replay with its line
number so operators see exactly where the store is damaged.
"""

from __future__ import annotations

import json
import os
import threading
from pathlib import Path
from typing import Iterator

from .errors import RecordLogCorrupt


class RecordLog:
    def __init__(self, path: str | Path, fsync: bool = True):
        self.path = Path(path)
        self.fsync = fsync
        self._lock = threading.Lock()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self._fh = open(self.path, "ab")

    def append(self, record: dict) -> None:
        line = json.dumps(record, separators=(",", ":"), ensure_ascii=False)
        data = line.encode("utf-8") + b"\n"
        with self._lock:
            self._fh.write(data)
            self._fh.flush()
            if self.fsync:
                os.fsync(self._fh.fileno())

    def replay(self) -> Iterator[dict]:
        """Yield every record in append order. Raises RecordLogCorrupt on a bad line."""
        with self._lock:
            if not self._fh.closed:
                self._fh.flush()
        if not self.path.exists():
            return
        with open(self.path, "rb") as fh:
            for line_no, raw in enumerate(fh, start=1):
                raw = raw.rstrip(b"\n")
                if not raw:
                    continue
                try:
                    record = json.loads(raw.decode("utf-8"))
                except (ValueError, UnicodeDecodeError) as exc:
                    raise RecordLogCorrupt(str(self.path), line_no, str(exc))
                if not isinstance(record, dict):
                    raise RecordLogCorrupt(str(self.path), line_no, "record is not an object")
                yield record

    def close(self) -> None:
        with self._lock:
            if not self._fh.closed:
                self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
