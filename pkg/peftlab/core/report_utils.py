"""Serialization helpers for run reports.

Sanitizes numeric values for JSON, computes canonical fingerprints and writes
report files with a stable layout.
"""
from __future__ import annotations

import hashlib
import json
import math
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable, Optional


def safe_number(value: Any, default: Optional[float] = None) -> Optional[float]:
    """Coerce any numeric-ish input into a finite float or return default."""
    if value is None:
        return default

    if isinstance(value, bool):  # treat booleans separately to avoid bool -> int
        return float(value)

    if isinstance(value, (int, float, Decimal)):
        result = float(value)
        if math.isnan(result) or math.isinf(result):
            return default
        return result

    try:
        result = float(str(value).strip())
        if math.isnan(result) or math.isinf(result):
            return default
        return result
    except (ValueError, TypeError):
        return default


def canonical_json(payload: Any) -> str:
    return json.dumps(payload, sort_keys=True, separators=(",", ":"), default=str)


def fingerprint(payload: Any) -> str:
    """SHA-256 of the canonical JSON form; insensitive to key order."""
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()


def sequence_fingerprint(batches: Iterable[Iterable[int]]) -> str:
    """Digest over an ordered list of example-id batches."""
    digest = hashlib.sha256()
    for batch in batches:
        digest.update(canonical_json(list(batch)).encode("utf-8"))
        digest.update(b";")
    return digest.hexdigest()


def write_json(path: Path, payload: Any) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path
