"""Parsing of JSON checklist verdicts returned by judge-style prompts."""

from __future__ import annotations

import json
import re
from collections.abc import Mapping, Sequence
from typing import Any

VALID_SCORES = (-1, 0, 1)

_FENCE = re.compile(r"^```(?:json)?\s*\n(.*)\n```$", re.S)
_NUMBERING = re.compile(r"^\s*(?:\d+[.)]|[-*•])\s*")


class VerdictFormatError(ValueError):
    pass


def parse_results(text: str) -> list[dict[str, Any]]:
    """Return the ``results`` array of a verdict object.

    The object must be the whole response; a single surrounding code fence
    is tolerated because some providers add one despite instructions.
    """
    body = text.strip()
    fenced = _FENCE.match(body)
    if fenced:
        body = fenced.group(1).strip()
    try:
        obj = json.loads(body)
    except json.JSONDecodeError as exc:
        raise VerdictFormatError(f"response is not JSON: {exc}") from exc
    if not isinstance(obj, dict) or not isinstance(obj.get("results"), list):
        raise VerdictFormatError("response lacks a 'results' array")
    results = obj["results"]
    if not all(isinstance(r, dict) for r in results):
        raise VerdictFormatError("results entries must be objects")
    return results


def normalize_criterion(text: str) -> str:
    text = _NUMBERING.sub("", text.strip())
    return re.sub(r"\s+", " ", text).strip().rstrip(".?!").lower()


def render_checklist(texts: Sequence[str]) -> str:
    return "\n".join(f"{i}. {t}" for i, t in enumerate(texts, 1))


def match_results(results: Sequence[Mapping[str, Any]], texts: Sequence[str]) -> dict[int, Mapping[str, Any]]:
    """Map item positions to result entries by criterion text.

    Entries whose criterion does not match any item fall back to their
    position, but only when the response has exactly one entry per item.
    """
    index: dict[str, list[int]] = {}
    for i, t in enumerate(texts):
        index.setdefault(normalize_criterion(t), []).append(i)
    out: dict[int, Mapping[str, Any]] = {}
    unmatched: list[tuple[int, Mapping[str, Any]]] = []
    for pos, r in enumerate(results):
        key = normalize_criterion(str(r.get("criterion", "")))
        slots = [i for i in index.get(key, []) if i not in out]
        if slots:
            out[slots[0]] = r
        else:
            unmatched.append((pos, r))
    if unmatched and len(results) == len(texts):
        for pos, r in unmatched:
            if pos not in out:
                out[pos] = r
    return out


def valid_score(entry: Mapping[str, Any]) -> int | None:
    """The entry's score if it is exactly -1, 0 or 1 (bools rejected), else None."""
    s = entry.get("score")
    if isinstance(s, bool):
        return None
    if isinstance(s, int) and s in VALID_SCORES:
        return s
    if isinstance(s, float) and s.is_integer() and int(s) in VALID_SCORES:
        return int(s)
    if isinstance(s, str) and s.strip() in {"-1", "0", "1", "+1"}:
        return int(s.strip())
    return None


def entry_reason(entry: Mapping[str, Any]) -> str:
    r = entry.get("reason")
    return r.strip() if isinstance(r, str) else ""
