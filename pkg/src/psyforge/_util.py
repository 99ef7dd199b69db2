from __future__ import annotations

import hashlib
import json
from typing import Any


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def stable_hash(*parts: Any, length: int = 16) -> str:
    """Hex digest over the canonical JSON of ``parts``; independent of PYTHONHASHSEED."""
    return hashlib.sha256(canonical_json(list(parts)).encode("utf-8")).hexdigest()[:length]


def derive_seed(*parts: Any) -> int:
    return int(stable_hash(*parts, length=16), 16)
