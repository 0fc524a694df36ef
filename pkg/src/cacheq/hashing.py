"""Canonical hashing for configs and artifacts.

Artifacts embed the hash of the configuration that produced them, and
downstream commands compare hashes to refuse mismatched inputs (for example
corrections fitted under a different schedule). Hashes are computed over a
canonical JSON encoding so key order and whitespace never matter.
"""

from __future__ import annotations

import hashlib
import json

__all__ = ["canonical_json", "digest", "digest_bytes", "digest_file"]


def canonical_json(payload) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def digest(payload) -> str:
    """Hex digest of a JSON-serializable payload, ignoring key order."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def digest_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def digest_file(path) -> str:
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()
