"""Append-only JSONL stores with per-line checksums, plus run manifests."""

from __future__ import annotations

import hashlib
import json
import os
import time
import uuid
from collections.abc import Iterable, Iterator, Mapping
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from ._util import canonical_json

CHECKSUM_FIELD = "_checksum"


class StoreCorruptError(ValueError):
    def __init__(self, path: str | Path, line_no: int, problem: str):
        super().__init__(f"{path}: line {line_no}: {problem}")
        self.path = str(path)
        self.line_no = line_no


def _checksum(record: Mapping[str, Any]) -> str:
    return hashlib.sha256(canonical_json(record).encode("utf-8")).hexdigest()[:16]


def encode_record(record: Mapping[str, Any]) -> str:
    if CHECKSUM_FIELD in record:
        raise ValueError(f"records may not carry a {CHECKSUM_FIELD!r} field")
    body = dict(record)
    body[CHECKSUM_FIELD] = _checksum(record)
    return canonical_json(body)


def store_append(path: str | Path, records: Iterable[Mapping[str, Any]]) -> int:
    """Append records, one canonical JSON object per line. Returns the count written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [encode_record(r) + "\n" for r in records]
    if not lines:
        path.touch()
        return 0
    with open(path, "a", encoding="utf-8") as fh:
        fh.writelines(lines)
        fh.flush()
        os.fsync(fh.fileno())
    return len(lines)


def store_iter(path: str | Path) -> Iterator[dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        return
    with open(path, encoding="utf-8", newline="") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.endswith("\n"):
                raise StoreCorruptError(path, line_no, "truncated final line (no newline)")
            if not line.strip():
                raise StoreCorruptError(path, line_no, "blank line")
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise StoreCorruptError(path, line_no, f"invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or CHECKSUM_FIELD not in obj:
                raise StoreCorruptError(path, line_no, "missing checksum")
            stored = obj.pop(CHECKSUM_FIELD)
            if stored != _checksum(obj):
                raise StoreCorruptError(path, line_no, "checksum mismatch")
            yield obj


def store_scan(path: str | Path) -> list[dict[str, Any]]:
    """All records of a store; a missing or empty file scans to []."""
    return list(store_iter(path))


def store_ids(path: str | Path, key: str = "id") -> set[str]:
    return {r[key] for r in store_iter(path) if key in r}


def write_json(path: str | Path, obj: Any) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


# --------------------------------------------------------------------- manifests


@dataclass
class RunManifest:
    run_id: str
    stage: str
    config_hash: str
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)  # store name -> content digest
    outputs: dict[str, int] = field(default_factory=dict)  # store name -> records written
    quarantined: int = 0
    skipped: int = 0
    started: float = 0.0
    finished: float = 0.0

    @classmethod
    def start(cls, stage: str, config_hash: str, seed: int, inputs: Mapping[str, str] | None = None) -> "RunManifest":
        return cls(uuid.uuid4().hex[:12], stage, config_hash, seed, dict(inputs or {}), started=time.time())

    def finish(self) -> "RunManifest":
        self.finished = time.time()
        return self

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "RunManifest":
        return cls(**dict(d))


def file_digest(path: str | Path) -> str:
    """Content hash of a store (or "absent")."""
    path = Path(path)
    if not path.exists():
        return "absent"
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()[:16]


def append_manifest(path: str | Path, manifest: RunManifest) -> None:
    store_append(path, [manifest.to_dict()])


def read_manifests(path: str | Path) -> list[RunManifest]:
    return [RunManifest.from_dict(d) for d in store_scan(path)]
