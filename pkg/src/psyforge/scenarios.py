"""Scenario and conversation synthesis from validated pattern combinations."""

from __future__ import annotations

import enum
import logging
import random
import re
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any

from ._util import derive_seed, stable_hash
from .dialogue import (
    Conversation,
    DialogueParseError,
    parse_conversation,
    validate_conversation,
)
from .gateway import SYNTHESIS_TEMPERATURE, ChatRequest, Gateway
from .patterns import MAX_COMBO, MIN_COMBO, Registry
from .prompts import get_template

logger = logging.getLogger(__name__)

MIN_CHARACTERS, MAX_CHARACTERS = 2, 6
MIN_TENDENCIES, MAX_TENDENCIES = 2, 6
NAMES_PER_GENDER = 5
VARIANTS_PER_COMBO = 3


class Diamonds(str, enum.Enum):
    DUTY = "Duty"
    INTELLECT = "Intellect"
    ADVERSITY = "Adversity"
    MATING = "Mating"
    POSITIVITY = "Positivity"
    NEGATIVITY = "Negativity"
    DECEPTION = "Deception"
    SOCIALITY = "Sociality"


SITUATIONS: dict[Diamonds, str] = {
    Diamonds.DUTY: "A situation in which work has to be done and someone must fulfil tasks or obligations.",
    Diamonds.INTELLECT: "A situation that offers intellectual engagement and a chance to show cleverness or depth.",
    Diamonds.ADVERSITY: "A situation involving threats, criticism, blame, or being under attack.",
    Diamonds.MATING: "A situation with potential romantic or sexual partners and the question of attractiveness.",
    Diamonds.POSITIVITY: "A situation that is pleasant, playful, and easy to enjoy.",
    Diamonds.NEGATIVITY: "A situation that stirs frustration, anxiety, or other negative feelings.",
    Diamonds.DECEPTION: "A situation in which someone may be lying, hiding something, or cannot be trusted.",
    Diamonds.SOCIALITY: "A situation centred on social interaction, belonging, and forming or testing relationships.",
}
OPEN_SITUATION = "Open: no specific situational dimension is imposed; choose any realistic everyday setting."


class ScenarioParseError(ValueError):
    def __init__(self, reason: str, detail: str = ""):
        super().__init__(f"{reason}: {detail}" if detail else reason)
        self.reason = reason


class SynthesisRejected(Exception):
    """An item failed validation twice and goes to quarantine."""

    def __init__(self, stage: str, reason: str, raw_text: str = "", item_id: str = ""):
        super().__init__(f"{stage} rejected ({reason})")
        self.stage = stage
        self.reason = reason
        self.raw_text = raw_text
        self.item_id = item_id

    def quarantine_record(self) -> dict[str, str]:
        return {"stage": self.stage, "reason": self.reason, "raw_text": self.raw_text, "item_id": self.item_id}


# --------------------------------------------------------------------- variants & names


@dataclass(frozen=True)
class VariantSpec:
    combo: tuple[str, ...]
    variant: Diamonds | None
    index: int

    @property
    def situation(self) -> str:
        if self.variant is None:
            return OPEN_SITUATION
        return f"{self.variant.value}: {SITUATIONS[self.variant]}"


def normalize_combo(combo: Iterable[str]) -> tuple[str, ...]:
    combo = tuple(sorted(combo))
    if not MIN_COMBO <= len(combo) <= MAX_COMBO:
        raise ValueError(f"combination size must be {MIN_COMBO}-{MAX_COMBO}, got {len(combo)}")
    if len(set(combo)) != len(combo):
        raise ValueError(f"combination repeats a pattern: {combo}")
    return combo


def plan_variants(combo: Iterable[str], seed: int = 0) -> list[VariantSpec]:
    """Two specs with independently drawn DIAMONDS dimensions plus one open spec.

    The draw depends only on (seed, combo), not on the order combos are processed.
    """
    combo = normalize_combo(combo)
    rng = random.Random(derive_seed("variants", seed, combo))
    dims = list(Diamonds)
    return [
        VariantSpec(combo, rng.choice(dims), 0),
        VariantSpec(combo, rng.choice(dims), 1),
        VariantSpec(combo, None, 2),
    ]


@dataclass(frozen=True)
class NamePool:
    male: tuple[str, ...]
    female: tuple[str, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "male", tuple(dict.fromkeys(n.strip() for n in self.male if n.strip())))
        object.__setattr__(self, "female", tuple(dict.fromkeys(n.strip() for n in self.female if n.strip())))

    @classmethod
    def from_files(cls, male: str | Path, female: str | Path) -> "NamePool":
        def read(p: str | Path) -> list[str]:
            return [line.split(",")[0] for line in Path(p).read_text(encoding="utf-8").splitlines()]
        return cls(tuple(read(male)), tuple(read(female)))


@dataclass(frozen=True)
class NameSample:
    male: tuple[str, ...]
    female: tuple[str, ...]

    @property
    def candidates(self) -> tuple[str, ...]:
        return self.male + self.female

    def render(self) -> str:
        return ", ".join(self.candidates)


def sample_names(pool: NamePool, seed: int, k: int = NAMES_PER_GENDER) -> NameSample:
    """Draw k male and k female names without replacement; no name appears twice."""
    if len(pool.male) < k or len(pool.female) < k:
        raise ValueError(f"name pool too small: {len(pool.male)} male / {len(pool.female)} female, need {k} each")
    rng = random.Random(seed)
    male = tuple(rng.sample(pool.male, k))
    taken = set(male)
    female_pool = [n for n in pool.female if n not in taken]
    if len(female_pool) < k:
        raise ValueError("name pool too small once names shared between genders are excluded")
    female = tuple(rng.sample(female_pool, k))
    return NameSample(male, female)


# --------------------------------------------------------------------- scenario model


@dataclass(frozen=True)
class Catalyst:
    detail: str
    function: str = ""


@dataclass(frozen=True)
class CharacterProfile:
    name: str
    role: str  # "protagonist" | "supporting"
    about_self: str
    about_others: Mapping[str, str]
    assigned_patterns: tuple[str, ...] = ()

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "role": self.role,
            "about_self": self.about_self,
            "about_others": dict(self.about_others),
            "assigned_patterns": list(self.assigned_patterns),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "CharacterProfile":
        return cls(d["name"], d["role"], d["about_self"], dict(d["about_others"]), tuple(d.get("assigned_patterns", ())))


@dataclass(frozen=True)
class Scenario:
    id: str
    combo: tuple[str, ...]
    variant: Diamonds | None
    background: str
    characters: tuple[CharacterProfile, ...]
    tendencies: Mapping[str, tuple[str, ...]]
    rationale: str = ""
    catalysts: tuple[Catalyst, ...] = ()
    name_seed: int = 0

    @property
    def protagonist(self) -> CharacterProfile:
        return next(c for c in self.characters if c.role == "protagonist")

    @property
    def protagonist_name(self) -> str:
        return self.protagonist.name

    @property
    def character_names(self) -> list[str]:
        return [c.name for c in self.characters]

    @property
    def supporting_names(self) -> list[str]:
        return [c.name for c in self.characters if c.role != "protagonist"]

    def character(self, name: str) -> CharacterProfile:
        for c in self.characters:
            if c.name == name:
                return c
        raise KeyError(f"no character {name!r} in scenario {self.id}")

    @property
    def bearers(self) -> list[CharacterProfile]:
        return [c for c in self.characters if c.assigned_patterns]

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "combo": list(self.combo),
            "variant": self.variant.value if self.variant else None,
            "background": self.background,
            "characters": [c.to_dict() for c in self.characters],
            "tendencies": {k: list(v) for k, v in self.tendencies.items()},
            "rationale": self.rationale,
            "catalysts": [{"detail": c.detail, "function": c.function} for c in self.catalysts],
            "name_seed": self.name_seed,
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any], check: bool = True) -> "Scenario":
        sc = cls(
            id=d["id"],
            combo=tuple(d["combo"]),
            variant=Diamonds(d["variant"]) if d.get("variant") else None,
            background=d["background"],
            characters=tuple(CharacterProfile.from_dict(c) for c in d["characters"]),
            tendencies={k: tuple(v) for k, v in d["tendencies"].items()},
            rationale=d.get("rationale", ""),
            catalysts=tuple(Catalyst(c["detail"], c.get("function", "")) for c in d.get("catalysts", ())),
            name_seed=int(d.get("name_seed", 0)),
        )
        if check:
            problems = scenario_violations(sc)
            if problems:
                raise ValueError(f"scenario {sc.id} violates invariants: {problems}")
        return sc


def scenario_id(combo: Sequence[str], variant: Diamonds | None, name_seed: int) -> str:
    return "sc-" + stable_hash(list(combo), variant.value if variant else None, name_seed)


def scenario_violations(sc: Scenario, candidates: Iterable[str] | None = None) -> list[str]:
    """All broken scenario invariants, as short reason codes."""
    v: list[str] = []
    if not MIN_COMBO <= len(sc.combo) <= MAX_COMBO:
        v.append(f"combo_size({len(sc.combo)})")
    n = len(sc.characters)
    if not MIN_CHARACTERS <= n <= MAX_CHARACTERS:
        v.append(f"character_count({n})")
    names = [c.name for c in sc.characters]
    if len(set(names)) != len(names):
        v.append("duplicate_character")
    protagonists = [c for c in sc.characters if c.role == "protagonist"]
    if len(protagonists) != 1:
        v.append(f"protagonist_count({len(protagonists)})")
    if candidates is not None:
        allowed = set(candidates)
        for name in names:
            if name not in allowed:
                v.append(f"invented_name({name})")
    for c in sc.characters:
        others = set(names) - {c.name}
        if set(c.about_others) != others:
            v.append(f"about_others_mismatch({c.name})")
    assigned = {p for c in sc.characters for p in c.assigned_patterns}
    for pid in sc.combo:
        if pid not in assigned:
            v.append(f"unassigned_pattern({pid})")
    for pid in assigned - set(sc.combo):
        v.append(f"foreign_pattern({pid})")
    for c in sc.characters:
        items = sc.tendencies.get(c.name)
        if c.assigned_patterns:
            if not items:
                v.append(f"missing_tendencies({c.name})")
            elif not MIN_TENDENCIES <= len(items) <= MAX_TENDENCIES:
                v.append(f"tendency_count({c.name}={len(items)})")
        elif items:
            v.append(f"tendencies_without_pattern({c.name})")
    for name in sc.tendencies:
        if name not in names:
            v.append(f"tendency_for_unknown_character({name})")
    if len(protagonists) == 1 and not protagonists[0].assigned_patterns:
        v.append("protagonist_without_pattern")
    return v


# --------------------------------------------------------------------- prompt I/O


def pattern_information(registry: Registry, combo: Sequence[str]) -> str:
    return "\n\n" + "\n\n".join(registry[pid].structure_text() for pid in combo)


def scenario_request(spec: VariantSpec, names: NameSample, registry: Registry, attempt: int = 0) -> ChatRequest:
    system, user = get_template("scenario").render(
        pattern_information=pattern_information(registry, spec.combo),
        situation=spec.situation,
        candidate_names=names.render(),
    )
    return ChatRequest(system, user, temperature=SYNTHESIS_TEMPERATURE, seed=attempt or None, tag="scenario")


_PART = re.compile(r"^\s*(?:#{1,4}\s*|\*\*)?\s*Part\s*([12])\b.*$", re.I | re.M)
_LABELS_P1 = ("design rationale", "catalyst details", "expected character tendencies")
_LABELS_P2 = ("story background", "characters' profiles", "character profiles", "characters’ profiles")
_LABEL_RE = re.compile(
    r"^\s*(?:#{1,4}\s*)?(?:\d+\.\s*)?\**\s*(" + "|".join(re.escape(x) for x in _LABELS_P1 + _LABELS_P2)
    + r")\s*\**\s*:?\s*\**\s*(.*)$",
    re.I,
)
_TENDENCY = re.compile(r"^\s*@\s*\[?\s*([^\]:]+?)\s*\]?\s*:\s*(.*)$")
_ITEM_SPLIT = re.compile(r";\s*(?=\d+[.)]\s)")
_ITEM_NUM = re.compile(r"^(\d+)[.)]\s*(.*)$", re.S)
_PROFILE_HEAD = re.compile(
    r"^\s*#{2,4}\s*(Protagonist|Supporting Character(?:\s*\d+)?)\s*:\s*(.+?)\s*$", re.I
)
_BULLET = re.compile(r"^\s*[\*\-•]\s+(.*)$")
_SPEECH_VERBS = (
    r"said|says|say|asks|asked|replies|replied|shouts|shouted|whispers|whispered|mutters|muttered|"
    r"exclaims|exclaimed|tells|told|yells|yelled|snaps|snapped|announces|announced|calls out|called out"
)
_QUOTE = r"(?:\"[^\"]{2,}\"|“[^”]{2,}”|``[^']{2,}'')"
_DIALOGUE_NEAR_VERB = re.compile(
    rf"(?:\b(?:{_SPEECH_VERBS})\b[^.\"“`]{{0,20}}{_QUOTE})|(?:{_QUOTE}\s*,?\s*(?:\w+\s+){{0,2}}\b(?:{_SPEECH_VERBS})\b)",
    re.I,
)


def _clean_name(s: str) -> str:
    return s.strip().strip("*_[]").strip()


def _split_labeled(block: str) -> dict[str, str]:
    out: dict[str, list[str]] = {}
    current = None
    for line in block.splitlines():
        m = _LABEL_RE.match(line)
        if m:
            current = m.group(1).lower().replace("’", "'")
            if current == "character profiles":
                current = "characters' profiles"
            out[current] = [m.group(2)] if m.group(2).strip() else []
            continue
        if current is not None:
            out[current].append(line)
    return {k: "\n".join(v).strip() for k, v in out.items()}


def parse_tendency_line(line: str) -> tuple[str, list[str]]:
    """``@ [Name]: 1. a; 2. b`` -> ("Name", ["a", "b"])."""
    m = _TENDENCY.match(line)
    if not m:
        raise ScenarioParseError("tendency_format", line.strip()[:80])
    name, rest = _clean_name(m.group(1)), m.group(2).strip()
    parts = _ITEM_SPLIT.split(rest)
    items = []
    for i, part in enumerate(parts, 1):
        num = _ITEM_NUM.match(part.strip())
        if not num or int(num.group(1)) != i:
            raise ScenarioParseError("tendency_format", line.strip()[:80])
        text = num.group(2).strip().rstrip(";").strip()
        if text.startswith("[") and text.endswith("]"):
            text = text[1:-1].strip()
        if not text:
            raise ScenarioParseError("tendency_format", line.strip()[:80])
        items.append(text)
    return name, items


def _parse_catalysts(block: str) -> list[Catalyst]:
    out = []
    for line in block.splitlines():
        m = _BULLET.match(line)
        if not m:
            continue
        body = m.group(1).strip()
        if ":" in body:
            detail, function = body.split(":", 1)
        else:
            detail, function = body, ""
        out.append(Catalyst(detail.strip().strip("*[]").strip(), function.strip().strip("[]").strip()))
    return out


def _parse_profiles(block: str) -> list[dict[str, Any]]:
    profiles: list[dict[str, Any]] = []
    cur: dict[str, Any] | None = None
    mode = None
    last_other = None
    for line in block.splitlines():
        head = _PROFILE_HEAD.match(line)
        if head:
            role = "protagonist" if head.group(1).lower().startswith("protagonist") else "supporting"
            cur = {"name": _clean_name(head.group(2)), "role": role, "self": [], "others": {}, "dup": []}
            profiles.append(cur)
            mode = None
            continue
        if cur is None or not line.strip():
            continue
        stripped = re.sub(r"^\s*[\*\-•]\s*", "", line).strip()
        label = stripped.strip("*").lower()
        if label.startswith("about self"):
            mode = "self"
            rest = stripped.split(":", 1)[1].strip().strip("*").strip() if ":" in stripped else ""
            if rest:
                cur["self"].append(rest)
            continue
        if label.startswith("about others"):
            mode = "others"
            continue
        if mode == "self":
            cur["self"].append(stripped)
        elif mode == "others":
            bullet = _BULLET.match(line)
            if bullet and ":" in bullet.group(1):
                name, text = bullet.group(1).split(":", 1)
                name = _clean_name(name)
                if name in cur["others"]:
                    cur["dup"].append(name)
                cur["others"][name] = text.strip()
                last_other = name
            elif last_other is not None:
                cur["others"][last_other] += " " + stripped
    return profiles


def background_has_dialogue(background: str, names: Iterable[str]) -> bool:
    for line in background.splitlines():
        for name in names:
            if re.match(rf"^\s*\**{re.escape(name)}\**\s*:", line):
                return True
    return bool(_DIALOGUE_NEAR_VERB.search(background))


def _sentences(text: str) -> list[str]:
    return [s for s in re.split(r"(?<=[.!?])\s+|\n+", text) if s.strip()]


def attribute_patterns(
    rationale: str,
    combo: Sequence[str],
    registry: Registry,
    names: Sequence[str],
    protagonist: str,
) -> dict[str, list[str]]:
    """Map each character to the patterns the design rationale ties to them.

    A pattern is attributed to every character named (or referred to as "the
    protagonist") in a rationale sentence that mentions the pattern. Patterns
    the rationale never ties to anyone go to the protagonist.
    """
    out: dict[str, list[str]] = {n: [] for n in names}
    sentences = _sentences(rationale)
    for pid in combo:
        pname = registry[pid].name.lower() if pid in registry else pid.replace("-", " ")
        holders: list[str] = []
        for s in sentences:
            low = s.lower()
            if pname not in low and pid not in low:
                continue
            for n in names:
                if re.search(rf"\b{re.escape(n)}\b", s) and n not in holders:
                    holders.append(n)
            if "protagonist" in low and protagonist not in holders:
                holders.append(protagonist)
        for h in holders or [protagonist]:
            out[h].append(pid)
    return out


def parse_scenario_response(
    text: str,
    spec: VariantSpec,
    registry: Registry,
    name_seed: int = 0,
) -> Scenario:
    """Parse a two-part scenario response. Structural failures raise ScenarioParseError."""
    parts = list(_PART.finditer(text))
    p1 = next((m for m in parts if m.group(1) == "1"), None)
    p2 = next((m for m in parts if m.group(1) == "2"), None)
    if p1 is None or p2 is None or p2.start() < p1.end():
        raise ScenarioParseError("unparseable_part_boundary")
    part1 = _split_labeled(text[p1.end():p2.start()])
    part2 = _split_labeled(text[p2.end():])

    tendencies: dict[str, tuple[str, ...]] = {}
    for line in part1.get("expected character tendencies", "").splitlines():
        if line.strip().startswith("@"):
            name, items = parse_tendency_line(line)
            tendencies[name] = tuple(items)
    if not tendencies:
        raise ScenarioParseError("tendency_format", "no '@ [Name]:' lines")

    background = part2.get("story background", "")
    profiles = _parse_profiles(part2.get("characters' profiles", ""))
    if not background or not profiles:
        raise ScenarioParseError("unparseable_part2", "missing story background or character profiles")
    names = [p["name"] for p in profiles]
    for p in profiles:
        if p["dup"]:
            raise ScenarioParseError("about_others_duplicate", f"{p['name']}: {p['dup']}")
    if background_has_dialogue(background, names):
        raise ScenarioParseError("dialogue_in_background")

    protagonist = next((p["name"] for p in profiles if p["role"] == "protagonist"), names[0])
    assigned = attribute_patterns(part1.get("design rationale", ""), spec.combo, registry, names, protagonist)
    dropped = [n for n in tendencies if n in assigned and not assigned[n]]
    if dropped:
        logger.debug("dropping tendencies of pattern-free characters %s", dropped)
    kept = {n: t for n, t in tendencies.items() if n not in assigned or assigned[n]}

    characters = tuple(
        CharacterProfile(
            name=p["name"],
            role=p["role"],
            about_self="\n".join(p["self"]).strip(),
            about_others=p["others"],
            assigned_patterns=tuple(assigned[p["name"]]),
        )
        for p in profiles
    )
    return Scenario(
        id=scenario_id(spec.combo, spec.variant, name_seed),
        combo=spec.combo,
        variant=spec.variant,
        background=background,
        characters=characters,
        tendencies=kept,
        rationale=part1.get("design rationale", ""),
        catalysts=tuple(_parse_catalysts(part1.get("catalyst details", ""))),
        name_seed=name_seed,
    )


def generate_scenario(
    spec: VariantSpec,
    names: NameSample,
    registry: Registry,
    gateway: Gateway,
    name_seed: int = 0,
) -> Scenario:
    """Generate, parse and validate one scenario; one regeneration, then rejection."""
    last_reason, last_text = "", ""
    for attempt in range(2):
        response = gateway.complete(scenario_request(spec, names, registry, attempt))
        last_text = response.text
        try:
            sc = parse_scenario_response(response.text, spec, registry, name_seed)
        except ScenarioParseError as exc:
            last_reason = exc.reason
            logger.info("scenario attempt %d rejected: %s", attempt + 1, exc)
            continue
        problems = scenario_violations(sc, names.candidates)
        if not problems:
            return sc
        last_reason = ";".join(problems)
        logger.info("scenario attempt %d rejected: %s", attempt + 1, last_reason)
    raise SynthesisRejected("scenario", last_reason, last_text, scenario_id(spec.combo, spec.variant, name_seed))


# --------------------------------------------------------------------- conversation


def render_profiles(sc: Scenario) -> str:
    lines = []
    n_support = 0
    for c in sc.characters:
        if c.role == "protagonist":
            lines.append(f"### Protagonist: {c.name}")
        else:
            n_support += 1
            lines.append(f"### Supporting Character {n_support}: {c.name}")
        lines.append(f"* About Self:\n  {c.about_self}")
        lines.append("* About Others:")
        lines.extend(f"  * {other}: {text}" for other, text in c.about_others.items())
        lines.append("")
    return "\n".join(lines).rstrip()


def render_scenario(sc: Scenario) -> str:
    return f"Story Background:\n{sc.background}\n\nCharacters' Profiles:\n\n{render_profiles(sc)}"


def render_analysis(sc: Scenario) -> str:
    lines = ["Design Rationale:", sc.rationale, "", "Catalyst Details:"]
    lines += [f"* {c.detail}: {c.function}".rstrip(": ") for c in sc.catalysts]
    lines += ["", "Expected Character Tendencies:"]
    for name, items in sc.tendencies.items():
        lines.append(f"@ [{name}]: " + "; ".join(f"{i}. {t}" for i, t in enumerate(items, 1)))
    return "\n".join(lines)


def conversation_request(sc: Scenario, registry: Registry, attempt: int = 0) -> ChatRequest:
    system, user = get_template("conversation").render(
        pattern_information=pattern_information(registry, sc.combo),
        scenario=render_scenario(sc),
        protagonist=sc.protagonist_name,
        supporting_characters=", ".join(sc.supporting_names),
        analysis=render_analysis(sc),
    )
    return ChatRequest(system, user, temperature=SYNTHESIS_TEMPERATURE, seed=attempt or None, tag="conversation")


def generate_conversation(sc: Scenario, registry: Registry, gateway: Gateway) -> Conversation:
    """Generate and validate a conversation; one retry, then rejection with the report attached."""
    last_reason, last_text = "", ""
    for attempt in range(2):
        response = gateway.complete(conversation_request(sc, registry, attempt))
        last_text = response.text
        try:
            conv = parse_conversation(response.text, sc.character_names, sc.id, strict_speakers=True)
        except DialogueParseError as exc:
            last_reason = f"parse_error({exc})"
            logger.info("conversation attempt %d for %s unparseable: %s", attempt + 1, sc.id, exc)
            continue
        report = validate_conversation(conv, sc)
        if report.ok:
            return conv
        last_reason = ";".join(report.violations)
        logger.info("conversation attempt %d for %s invalid: %s", attempt + 1, sc.id, last_reason)
    raise SynthesisRejected("conversation", last_reason, last_text, sc.id)


def with_patterns(sc: Scenario, assignment: Mapping[str, Sequence[str]]) -> Scenario:
    """Copy of ``sc`` with character pattern assignments replaced (used by fixtures)."""
    chars = tuple(replace(c, assigned_patterns=tuple(assignment.get(c.name, ()))) for c in sc.characters)
    return replace(sc, characters=chars)
