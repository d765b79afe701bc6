"""On-disk response cache: one JSON file per key, written via temp file + rename."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any

log = logging.getLogger(__name__)


def make_key(identity: Any) -> str:
    """sha256 over the canonical JSON encoding of ``identity``."""
    canonical = json.dumps(identity, sort_keys=True, ensure_ascii=True, separators=(",", ":"), allow_nan=False)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ResponseCache:
    def __init__(self, directory: str | os.PathLike):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)

    def path_for(self, key: str) -> Path:
        return self.directory / f"{key}.json"

    def get(self, key: str, required: tuple[str, ...] = ()) -> dict | None:
        """Return the stored payload, or None on a miss.

        Unreadable entries, or entries lacking any ``required`` field, are deleted and
        treated as misses.
        """
        path = self.path_for(key)
        try:
            raw = path.read_bytes()
        except FileNotFoundError:
            return None
        try:
            payload = json.loads(raw.decode("utf-8"))
            if not isinstance(payload, dict) or payload.get("key") != key:
                raise ValueError("key mismatch")
            missing = [f for f in required if f not in payload]
            if missing:
                raise ValueError(f"missing fields {missing}")
        except (ValueError, UnicodeDecodeError) as exc:
            log.warning("discarding corrupt cache entry %s (%s)", path.name, exc)
            try:
                path.unlink()
            except FileNotFoundError:
                pass
            return None
        return payload

    def put(self, key: str, payload: dict) -> None:
        body = dict(payload, key=key)
        data = json.dumps(body, sort_keys=True, ensure_ascii=False, allow_nan=False).encode("utf-8")
        fd, tmp = tempfile.mkstemp(dir=self.directory, prefix=f".{key[:16]}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
            os.replace(tmp, self.path_for(key))
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def __len__(self) -> int:
        return sum(1 for _ in self.directory.glob("*.json"))
