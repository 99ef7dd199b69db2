"""Pattern-level and scenario-level behavioral checklists."""

from __future__ import annotations

import logging
import re
from collections.abc import Collection, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

from .dialogue import Conversation, serialize_conversation
from .gateway import JUDGE_TEMPERATURE, SYNTHESIS_TEMPERATURE, ChatRequest, Gateway, GatewayError
from .patterns import Pattern
from .prompts import get_template
from .scenarios import Scenario
from .verdicts import VerdictFormatError, entry_reason, match_results, parse_results, render_checklist, valid_score

logger = logging.getLogger(__name__)

TARGET_ITEMS = 15
MIN_ACCEPTED_ITEMS = 10
VALIDATION_SAMPLES = 5

PATTERN_LEVEL = "pattern"
SCENARIO_LEVEL = "scenario"


class ChecklistError(ValueError):
    pass


@dataclass(frozen=True)
class ChecklistItem:
    id: str
    text: str
    level: str
    pattern_id: str = ""
    scenario_id: str = ""
    character: str = ""

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"id": self.id, "text": self.text, "level": self.level}
        if self.level == PATTERN_LEVEL:
            d["pattern_id"] = self.pattern_id
        else:
            d["scenario_id"] = self.scenario_id
            d["character"] = self.character
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "ChecklistItem":
        return cls(
            d["id"], d["text"], d["level"], d.get("pattern_id", ""), d.get("scenario_id", ""), d.get("character", "")
        )


@dataclass(frozen=True)
class Provenance:
    generated_count: int = 0
    removed_count: int = 0
    generalized_count: int = 0
    validated: bool = True

    def to_dict(self) -> dict[str, Any]:
        return {
            "generated_count": self.generated_count,
            "removed_count": self.removed_count,
            "generalized_count": self.generalized_count,
            "validated": self.validated,
        }


@dataclass(frozen=True)
class PatternChecklist:
    pattern_id: str
    items: tuple[ChecklistItem, ...]
    provenance: Provenance = field(default_factory=Provenance)

    @property
    def texts(self) -> list[str]:
        return [i.text for i in self.items]

    def to_dict(self) -> dict[str, Any]:
        return {
            "level": PATTERN_LEVEL,
            "pattern_id": self.pattern_id,
            "items": [i.to_dict() for i in self.items],
            "provenance": self.provenance.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PatternChecklist":
        return cls(d["pattern_id"], tuple(ChecklistItem.from_dict(i) for i in d["items"]), Provenance(**d["provenance"]))


def pattern_item_id(pattern_id: str, ordinal: int) -> str:
    return f"{pattern_id}#{ordinal:02d}"


def scenario_item_id(scenario_id: str, character: str, ordinal: int) -> str:
    return f"{scenario_id}#{character}#{ordinal:02d}"


# --------------------------------------------------------------------- text helpers

_NUMBERED = re.compile(r"^\s*(?:\d+\s*[.)]|[-*•])\s*(.+?)\s*$")
_QUESTION_START = re.compile(
    r"^(?:does|do|is|are|was|were|has|have|had|can|could|will|would|should|did)\s+"
    r"(?:the|this|that|they|he|she|it|someone|a|an)\b",
    re.I,
)
_IRREGULAR = {"is": "is", "has": "have", "does": "do", "goes": "go"}
_ALLOWED_CAPS = {"I"}


def _base_verb(word: str) -> str:
    low = word.lower()
    if low in _IRREGULAR:
        return _IRREGULAR[low]
    if re.search(r"[^aeiou]ies$", low):
        return low[:-3] + "y"
    if re.search(r"(?:ss|sh|ch|x|z|o)es$", low):
        return low[:-2]
    if low.endswith("s") and not low.endswith("ss"):
        return low[:-1]
    return low


def normalize_question(text: str) -> str:
    """Phrase an item as a yes/no question ending in "?".

    Questions pass through (a trailing "?" is added when missing). A
    declarative such as "Overestimates others' attention" becomes
    "Does the subject overestimate others' attention?".
    """
    t = re.sub(r"\s+", " ", text.strip()).rstrip(" .;")
    if not t:
        raise ChecklistError("empty checklist item")
    if t.endswith("?"):
        return t
    if _QUESTION_START.match(t) or re.search(r",\s*(?:does|do|is|are|has|can|will)\s+the subject\b", t, re.I):
        return t + "?"
    t = re.sub(r"^the subject\s+", "", t, flags=re.I)
    first, _, rest = t.partition(" ")
    if first.lower() == "is":
        return f"Is the subject {rest}?".replace("  ", " ")
    verb = _base_verb(first)
    return f"Does the subject {verb} {rest}?".rstrip(" ?") + "?" if rest else f"Does the subject {verb}?"


def proper_nouns(text: str, known_names: Collection[str] = ()) -> list[str]:
    """Tokens that look like names of people, places or organizations.

    Any of ``known_names`` appearing as a whole word counts, as does a
    capitalised word that is not sentence-initial. All-caps acronyms and
    "I" are ignored.
    """
    found: list[str] = []
    for name in known_names:
        if name and re.search(rf"(?<!\w){re.escape(name)}(?!\w)", text):
            found.append(name)
    for sentence in re.split(r"(?<=[.?!])\s+", text):
        words = re.findall(r"[A-Za-z][\w'\-]*", sentence)
        for w in words[1:]:
            if w[0].isupper() and not w.isupper() and w not in _ALLOWED_CAPS and w not in found:
                found.append(w)
    return found


def parse_numbered_items(text: str) -> list[str]:
    items = []
    for line in text.splitlines():
        m = _NUMBERED.match(line)
        if m:
            items.append(m.group(1))
    return items


# --------------------------------------------------------------------- pattern-level build


@dataclass(frozen=True)
class SampleDialogue:
    """A conversation used to audit candidate items, with the character to watch."""

    conversation: Conversation
    protagonist: str


def _generate_candidates(pattern: Pattern, gateway: Gateway, item_count: int) -> list[str]:
    system, user = get_template("checklist_generate").render(
        item_count=item_count, pattern_name=pattern.name, pattern_structure=pattern.structure_text()
    )
    response = gateway.complete(ChatRequest(system, user, SYNTHESIS_TEMPERATURE, tag="checklist_generate"))
    raw = parse_numbered_items(response.text)
    out: list[str] = []
    seen = set()
    for item in raw:
        q = normalize_question(item)
        if q.lower() not in seen:
            seen.add(q.lower())
            out.append(q)
    return out


def _audit(pattern: Pattern, candidates: Sequence[str], sample: SampleDialogue, gateway: Gateway) -> dict[int, tuple[int, bool]]:
    """Score every candidate against one sample; returns position -> (score, observable)."""
    system, user = get_template("checklist_validate").render(
        pattern_name=pattern.name,
        protagonist=sample.protagonist,
        conversation=serialize_conversation(sample.conversation),
        checklist=render_checklist(candidates),
    )
    response = gateway.complete(ChatRequest(system, user, JUDGE_TEMPERATURE, tag="checklist_validate"))
    try:
        results = parse_results(response.text)
    except VerdictFormatError as exc:
        logger.warning("checklist audit for %s unparseable: %s", pattern.id, exc)
        return {}
    out = {}
    for pos, entry in match_results(results, candidates).items():
        score = valid_score(entry)
        observable = entry.get("observable", True)
        if score is not None and isinstance(observable, bool):
            out[pos] = (score, observable)
    return out


def _generalize(pattern: Pattern, item: str, gateway: Gateway) -> str:
    system, user = get_template("checklist_generalize").render(pattern_name=pattern.name, item=item)
    response = gateway.complete(ChatRequest(system, user, SYNTHESIS_TEMPERATURE, tag="checklist_generalize"))
    lines = [ln for ln in (parse_numbered_items(response.text) or response.text.strip().splitlines()) if ln.strip()]
    return normalize_question(lines[0]) if lines else item


def build_pattern_checklist(
    pattern: Pattern,
    samples: Sequence[SampleDialogue],
    gateway: Gateway,
    known_names: Collection[str] = (),
    target: int = TARGET_ITEMS,
) -> PatternChecklist:
    """Generate, audit and generalize the universal indicators for one pattern.

    Step 1 asks for ``target`` candidates from the pattern structure. Step 2
    audits them against up to five sample dialogues and drops an item only
    when every audit scored it 0 and called it unobservable. Step 3 rewrites
    items that mention names (``known_names`` or other capitalised tokens);
    a rewrite that still mentions one is dropped. With no samples, step 2 is
    skipped and the checklist is marked unvalidated.
    """
    candidates = _generate_candidates(pattern, gateway, target)
    generated = len(candidates)
    removed = 0

    validated = bool(samples)
    if validated:
        audits = [_audit(pattern, candidates, s, gateway) for s in samples[:VALIDATION_SAMPLES]]
        keep = []
        for pos, text in enumerate(candidates):
            verdicts = [a.get(pos) for a in audits]
            never = all(v is not None and v[0] == 0 and not v[1] for v in verdicts)
            if never:
                removed += 1
                logger.info("dropping unobservable item for %s: %s", pattern.id, text)
            else:
                keep.append(text)
        candidates = keep
    else:
        logger.info("no sample dialogues for %s; checklist left unvalidated", pattern.id)

    generalized = 0
    final: list[str] = []
    for text in candidates:
        if proper_nouns(text, known_names):
            rewritten = _generalize(pattern, text, gateway)
            if proper_nouns(rewritten, known_names):
                removed += 1
                logger.info("dropping item that stays scenario-specific for %s: %s", pattern.id, rewritten)
                continue
            generalized += 1
            text = rewritten
        if text not in final:
            final.append(text)

    if not final:
        raise ChecklistError(f"no checklist items survived for {pattern.id}")
    if len(final) > target:
        removed += len(final) - target
        final = final[:target]
    if len(final) < MIN_ACCEPTED_ITEMS:
        logger.warning("pattern %s has only %d checklist items", pattern.id, len(final))
    items = tuple(
        ChecklistItem(pattern_item_id(pattern.id, i), text, PATTERN_LEVEL, pattern_id=pattern.id)
        for i, text in enumerate(final, 1)
    )
    return PatternChecklist(pattern.id, items, Provenance(generated, removed, generalized, validated))


# --------------------------------------------------------------------- scenario-level extraction


def extract_scenario_checklist(scenario: Scenario) -> list[ChecklistItem]:
    """One item per expected tendency of each pattern-bearing character; no provider call."""
    items: list[ChecklistItem] = []
    for c in scenario.characters:
        if not c.assigned_patterns:
            continue
        tendencies = scenario.tendencies.get(c.name)
        if not tendencies:
            raise ChecklistError(f"scenario {scenario.id}: no tendencies for pattern-bearing {c.name}")
        items.extend(
            ChecklistItem(scenario_item_id(scenario.id, c.name, i), t, SCENARIO_LEVEL, scenario_id=scenario.id, character=c.name)
            for i, t in enumerate(tendencies, 1)
        )
    return items


def items_for_character(items: Iterable[ChecklistItem], scenario_id: str, character: str) -> list[ChecklistItem]:
    return [i for i in items if i.scenario_id == scenario_id and i.character == character]
