"""Content-addressed on-disk cache for rewrite and score results.

Keys are sha256 digests over a canonical JSON encoding of the request
components, so any change to the client, instruction, input text, or decode
parameters lands in a different slot. Values are stored one JSON file per
entry with an embedded value checksum so `verify` can spot corruption.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def content_key(*components) -> str:
    """Digest of the ordered request components."""
    return hashlib.sha256(canonical_json(list(components)).encode("utf-8")).hexdigest()


def _value_checksum(value: str) -> str:
    return hashlib.sha256(value.encode("utf-8")).hexdigest()


@dataclass
class CacheStats:
    hits: int = 0
    misses: int = 0
    writes: int = 0


@dataclass
class DiskCache:
    """Persistent key -> text store with in-process request coalescing.

    `get_or_compute` guarantees at most one in-flight computation per key:
    concurrent callers for the same key block until the first one has
    written the entry, then read it back from disk.
    """

    root: Path
    stats: CacheStats = field(default_factory=CacheStats)

    def __post_init__(self) -> None:
        self.root = Path(self.root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._guard = threading.Lock()
        self._in_flight: dict[str, threading.Lock] = {}

    def _path_for(self, key: str) -> Path:
        return self.root / key[:2] / f"{key}.json"

    def get(self, key: str) -> str | None:
        path = self._path_for(key)
        try:
            entry = json.loads(path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError):
            self.stats.misses += 1
            return None
        self.stats.hits += 1
        return entry["value"]

    def put(self, key: str, value: str) -> None:
        path = self._path_for(key)
        path.parent.mkdir(parents=True, exist_ok=True)
        entry = {"key": key, "value": value, "value_sha256": _value_checksum(value)}
        tmp = path.with_suffix(".tmp")
        tmp.write_text(json.dumps(entry, ensure_ascii=False), encoding="utf-8")
        os.replace(tmp, path)
        self.stats.writes += 1

    def get_or_compute(self, key: str, compute: Callable[[], str]) -> str:
        cached = self.get(key)
        if cached is not None:
            return cached
        with self._guard:
            lock = self._in_flight.setdefault(key, threading.Lock())
        with lock:
            # another thread may have finished while we waited on the lock
            cached = self.get(key)
            if cached is not None:
                return cached
            value = compute()
            self.put(key, value)
        with self._guard:
            self._in_flight.pop(key, None)
        return value

    def _entry_paths(self) -> list[Path]:
        return sorted(self.root.glob("??/*.json"))

    def entry_count(self) -> int:
        return len(self._entry_paths())

    def size_bytes(self) -> int:
        return sum(p.stat().st_size for p in self._entry_paths())

    def clear(self) -> int:
        """Delete every entry; returns the number removed."""
        paths = self._entry_paths()
        for p in paths:
            p.unlink()
        return len(paths)

    def verify(self) -> list[str]:
        """Re-hash all entries; returns keys whose stored bytes are corrupt."""
        bad: list[str] = []
        for p in self._entry_paths():
            key = p.stem
            try:
                entry = json.loads(p.read_text(encoding="utf-8"))
                ok = (
                    entry.get("key") == key
                    and _value_checksum(entry["value"]) == entry.get("value_sha256")
                )
            except (OSError, json.JSONDecodeError, KeyError, TypeError):
                ok = False
            if not ok:
                bad.append(key)
        return bad
