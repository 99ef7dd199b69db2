"""OOD selection, four-way splits, SFT export, mixtures and corpus statistics."""

from __future__ import annotations

import csv
import enum
import json
import logging
import math
import random
import statistics
from collections import Counter
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Protocol

from ._util import derive_seed
from .dialogue import Conversation, Turn, parse_turn, serialize_turn
from .patterns import Registry
from .prompts import get_template
from .scenarios import Scenario
from .taxonomy import Dimension

logger = logging.getLogger(__name__)

OOD_SOCIAL = 4
OOD_TRAITS = 4
DEFAULT_ID_EVAL_SIZE = 50
OPENING_CUE = "Begin the scene."
SOURCES = ("humanllm", "general", "roleplay")


class DatasetError(ValueError):
    pass


# --------------------------------------------------------------------- OOD selection


@dataclass(frozen=True)
class OODSet:
    social: tuple[str, ...] = ()
    traits: tuple[str, ...] = ()

    @property
    def ids(self) -> frozenset[str]:
        return frozenset(self.social) | frozenset(self.traits)

    def to_dict(self) -> dict[str, list[str]]:
        return {"social": list(self.social), "traits": list(self.traits)}

    @classmethod
    def from_dict(cls, d: Mapping[str, Sequence[str]]) -> "OODSet":
        return cls(tuple(d.get("social", ())), tuple(d.get("traits", ())))


def pattern_frequency(scenarios: Iterable[Any]) -> Counter:
    """How many scenarios each pattern id appears in."""
    freq: Counter = Counter()
    for s in scenarios:
        freq.update(set(s.combo))
    return freq


def select_ood_patterns(
    registry: Registry,
    frequency: Mapping[str, int],
    n_social: int = OOD_SOCIAL,
    n_traits: int = OOD_TRAITS,
) -> OODSet:
    """Least-frequent social-cognitive patterns plus least-frequent traits.

    Social-cognitive: ascending (frequency, id). Traits: the rarest pattern
    of each Big Five dimension (either pole), then the ``n_traits`` rarest of
    those. Missing frequencies count as zero.
    """
    def key(pid: str) -> tuple[int, str]:
        return (int(frequency.get(pid, 0)), pid)

    social = sorted((p.id for p in registry.social_cognitive()), key=key)[:n_social]
    per_dim = []
    for dim in Dimension:
        ids = [p.id for p in registry.by_dimension(dim)]
        if not ids:
            raise DatasetError(f"registry has no traits for dimension {dim.value}")
        per_dim.append(min(ids, key=key))
    traits = sorted(per_dim, key=key)[:n_traits]
    return OODSet(tuple(social), tuple(traits))


# --------------------------------------------------------------------- splits


class Split(str, enum.Enum):
    TRAIN = "train"
    ID_EVAL = "id_eval"
    OOD_EVAL = "ood_eval"
    MIXED_EVAL = "mixed_eval"


class HasCombo(Protocol):
    @property
    def id(self) -> str: ...

    @property
    def combo(self) -> tuple[str, ...]: ...


@dataclass(frozen=True)
class SplitAssignment:
    scenario_id: str
    split: Split


def classify_combo(combo: Iterable[str], ood: frozenset[str]) -> str:
    """"ood" when every pattern is OOD, "mixed" when some are, else "in"."""
    flags = [p in ood for p in combo]
    if flags and all(flags):
        return "ood"
    if any(flags):
        return "mixed"
    return "in"


def split_scenarios(
    scenarios: Iterable[HasCombo],
    ood_set: OODSet,
    id_eval_size: int = DEFAULT_ID_EVAL_SIZE,
    seed: int = 0,
) -> list[SplitAssignment]:
    """Assign every scenario to exactly one split; output sorted by scenario id."""
    ood = ood_set.ids
    by_id: dict[str, str] = {}
    for s in scenarios:
        if s.id in by_id:
            raise DatasetError(f"duplicate scenario id {s.id}")
        by_id[s.id] = classify_combo(s.combo, ood)
    pool = sorted(i for i, c in by_id.items() if c == "in")
    if len(pool) < id_eval_size:
        raise DatasetError(f"in-domain pool has {len(pool)} scenarios, need {id_eval_size} for id_eval")
    held = set(random.Random(derive_seed("id_eval", seed)).sample(pool, id_eval_size))
    out = []
    for sid in sorted(by_id):
        c = by_id[sid]
        if c == "ood":
            split = Split.OOD_EVAL
        elif c == "mixed":
            split = Split.MIXED_EVAL
        elif sid in held:
            split = Split.ID_EVAL
        else:
            split = Split.TRAIN
        out.append(SplitAssignment(sid, split))
    return out


def split_sizes(assignments: Iterable[SplitAssignment]) -> dict[Split, int]:
    counts = Counter(a.split for a in assignments)
    return {s: counts.get(s, 0) for s in Split}


def write_split_csv(assignments: Iterable[SplitAssignment], path: str | Path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["scenario_id", "split"])
        for a in assignments:
            w.writerow([a.scenario_id, a.split.value])


def read_split_csv(path: str | Path) -> list[SplitAssignment]:
    with open(path, newline="", encoding="utf-8") as fh:
        return [SplitAssignment(r["scenario_id"], Split(r["split"])) for r in csv.DictReader(fh)]


# --------------------------------------------------------------------- SFT export


@dataclass(frozen=True)
class SftSample:
    id: str
    system: str
    messages: tuple[tuple[str, str], ...]  # (role, text), role in {"user", "assistant"}
    source: str
    scenario_id: str = ""
    character: str = ""

    _WIRE = {"user": "human", "assistant": "gpt"}
    _FROM_WIRE = {"human": "user", "user": "user", "gpt": "assistant", "assistant": "assistant", "model": "assistant"}

    def to_sharegpt(self) -> dict[str, Any]:
        meta: dict[str, Any] = {"id": self.id}
        if self.scenario_id:
            meta["scenario_id"] = self.scenario_id
            meta["character"] = self.character
        return {
            "system": self.system,
            "conversations": [{"from": self._WIRE[r], "value": t} for r, t in self.messages],
            "source": self.source,
            "meta": meta,
        }

    @classmethod
    def from_sharegpt(cls, d: Mapping[str, Any]) -> "SftSample":
        meta = d.get("meta", {})
        return cls(
            id=meta.get("id", ""),
            system=d.get("system", ""),
            messages=tuple((cls._FROM_WIRE[m["from"]], m["value"]) for m in d["conversations"]),
            source=d["source"],
            scenario_id=meta.get("scenario_id", ""),
            character=meta.get("character", ""),
        )


def render_about_others(scenario: Scenario, character: str) -> str:
    return "\n".join(f"{k}: {v}" for k, v in scenario.character(character).about_others.items())


def roleplay_system_prompt(scenario: Scenario, character: str) -> str:
    profile = scenario.character(character)
    system, _ = get_template("roleplay").render(
        protagonist_name=character,
        about_self=profile.about_self,
        about_others=render_about_others(scenario, character),
        story_background=scenario.background,
        history="",
    )
    return system


def conversation_messages(conv: Conversation, target: str) -> list[tuple[str, str]]:
    """Alternating user/assistant messages from the target character's viewpoint.

    Runs of other characters' turns become one user message of ``Name: body``
    lines; runs of the target's turns become one assistant message of bare
    bodies. A leading assistant run gets an opening cue; a trailing user run
    is dropped.
    """
    messages: list[tuple[str, str]] = []
    for turn in conv.turns:
        role = "assistant" if turn.speaker == target else "user"
        text = turn.body() if role == "assistant" else serialize_turn(turn)
        if messages and messages[-1][0] == role:
            messages[-1] = (role, messages[-1][1] + "\n" + text)
        else:
            messages.append((role, text))
    if messages and messages[0][0] == "assistant":
        messages.insert(0, ("user", OPENING_CUE))
    if messages and messages[-1][0] == "user":
        messages.pop()
    return messages


def export_sft(
    scenarios: Iterable[Scenario],
    conversations: Mapping[str, Conversation],
    skip_missing: bool = False,
) -> list[SftSample]:
    """One sample per pattern-bearing character with at least one turn."""
    out = []
    for sc in sorted(scenarios, key=lambda s: s.id):
        conv = conversations.get(sc.id)
        if conv is None:
            if skip_missing:
                logger.warning("scenario %s has no conversation; skipped", sc.id)
                continue
            raise DatasetError(f"scenario {sc.id} has no conversation")
        for c in sc.bearers:
            messages = conversation_messages(conv, c.name)
            if not any(r == "assistant" for r, _ in messages):
                logger.warning("character %s has no turns in %s; sample skipped", c.name, sc.id)
                continue
            out.append(
                SftSample(
                    id=f"{sc.id}::{c.name}",
                    system=roleplay_system_prompt(sc, c.name),
                    messages=tuple(messages),
                    source="humanllm",
                    scenario_id=sc.id,
                    character=c.name,
                )
            )
    return out


def assistant_turns(sample: SftSample) -> list[Turn]:
    """Re-parse a humanllm sample's assistant messages into the character's turns."""
    turns = []
    for role, text in sample.messages:
        if role == "assistant":
            turns.extend(parse_turn(f"{sample.character}: {line}", [sample.character]) for line in text.split("\n"))
    return turns


def write_sft_jsonl(samples: Iterable[SftSample], path: str | Path) -> int:
    n = 0
    with open(path, "w", encoding="utf-8") as fh:
        for s in samples:
            fh.write(json.dumps(s.to_sharegpt(), ensure_ascii=False, sort_keys=True) + "\n")
            n += 1
    return n


def read_sft_jsonl(path: str | Path) -> list[SftSample]:
    with open(path, encoding="utf-8") as fh:
        return [SftSample.from_sharegpt(json.loads(line)) for line in fh if line.strip()]


def load_external_pool(path: str | Path, source: str) -> list[SftSample]:
    """Normalize an external instruction or role-play JSONL drop to SftSamples.

    Accepts ShareGPT records (``conversations`` with ``from``/``value``) and
    chat records (``messages`` with ``role``/``content``); a system turn
    inside the list moves to ``system``.
    """
    if source not in SOURCES:
        raise DatasetError(f"unknown source {source!r}")
    role_map = SftSample._FROM_WIRE | {"system": "system"}
    out = []
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            if "conversations" in rec:
                pairs = [(m["from"], m["value"]) for m in rec["conversations"]]
            elif "messages" in rec:
                pairs = [(m["role"], m["content"]) for m in rec["messages"]]
            else:
                raise DatasetError(f"{path}:{line_no}: record has neither 'conversations' nor 'messages'")
            system = rec.get("system", "")
            messages = []
            for who, text in pairs:
                role = role_map.get(who)
                if role is None:
                    raise DatasetError(f"{path}:{line_no}: unknown speaker role {who!r}")
                if role == "system":
                    system = text
                else:
                    messages.append((role, text))
            sid = str(rec.get("id") or rec.get("meta", {}).get("id") or f"{source}-{line_no}")
            out.append(SftSample(sid, system, tuple(messages), source))
    return out


# --------------------------------------------------------------------- mixture


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


@dataclass(frozen=True)
class MixtureSpec:
    ratio: tuple[int, int, int] = (4, 4, 2)
    anchor: str | None = "humanllm"

    def __post_init__(self) -> None:
        if len(self.ratio) != len(SOURCES) or any(r < 0 for r in self.ratio) or sum(self.ratio) == 0:
            raise DatasetError(f"ratio must be three non-negative integers with a positive sum, got {self.ratio}")
        if self.anchor is not None:
            if self.anchor not in SOURCES:
                raise DatasetError(f"unknown anchor {self.anchor!r}")
            if self.ratio[SOURCES.index(self.anchor)] == 0:
                raise DatasetError("anchor bucket has a zero ratio")


def resolve_mixture(spec: MixtureSpec, pool_sizes: Sequence[int]) -> tuple[int, int, int]:
    """Per-bucket sample counts.

    Anchored: the anchor pool is used whole and the other buckets scale to
    it. Unanchored: the largest scale every pool can supply. Counts are
    rounded half up; a bucket needing more than its pool raises.
    """
    ratio = spec.ratio
    if spec.anchor is not None:
        i = SOURCES.index(spec.anchor)
        unit = Fraction(pool_sizes[i], ratio[i])
    else:
        unit = min(Fraction(pool_sizes[i], ratio[i]) for i in range(3) if ratio[i] > 0)
    counts = tuple(_round_half_up(r * unit) for r in ratio)
    for src, need, have in zip(SOURCES, counts, pool_sizes):
        if need > have:
            raise DatasetError(f"pool underflow: {src} needs {need} samples but has {have}")
    return counts  # type: ignore[return-value]


@dataclass(frozen=True)
class MixtureManifest:
    ratio: tuple[int, int, int]
    pool_sizes: tuple[int, int, int]
    counts: tuple[int, int, int]
    entries: tuple[tuple[str, str], ...]  # (source, sample_id)
    seed: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts)

    def to_dict(self) -> dict[str, Any]:
        return {
            "ratio": list(self.ratio),
            "pool_sizes": list(self.pool_sizes),
            "counts": dict(zip(SOURCES, self.counts)),
            "total": self.total,
            "seed": self.seed,
            "entries": [list(e) for e in self.entries],
        }


def build_mixture(
    pools: Mapping[str, Sequence[SftSample]],
    spec: MixtureSpec,
    seed: int = 0,
) -> tuple[MixtureManifest, list[SftSample]]:
    """Seeded sampling without replacement from each pool; pool order is preserved."""
    sizes = tuple(len(pools.get(s, ())) for s in SOURCES)
    counts = resolve_mixture(spec, sizes)
    chosen: list[SftSample] = []
    for src, k in zip(SOURCES, counts):
        pool = list(pools.get(src, ()))
        if k == len(pool):
            idx = range(len(pool))
        else:
            idx = sorted(random.Random(derive_seed("mixture", seed, src)).sample(range(len(pool)), k))
        chosen.extend(pool[i] for i in idx)
    manifest = MixtureManifest(spec.ratio, sizes, counts, tuple((s.source, s.id) for s in chosen), seed)  # type: ignore[arg-type]
    return manifest, chosen


# --------------------------------------------------------------------- statistics


@dataclass(frozen=True)
class Summary:
    count: int = 0
    mean: float = 0.0
    minimum: int = 0
    maximum: int = 0

    @classmethod
    def of(cls, values: Sequence[int]) -> "Summary":
        if not values:
            return cls()
        return cls(len(values), statistics.fmean(values), min(values), max(values))

    def to_dict(self) -> dict[str, Any]:
        return {"count": self.count, "mean": self.mean, "min": self.minimum, "max": self.maximum}


@dataclass(frozen=True)
class StatReport:
    scenarios: int = 0
    conversations: int = 0
    unique_combos: int = 0
    patterns_per_scenario: Summary = field(default_factory=Summary)
    characters_per_scenario: Summary = field(default_factory=Summary)
    bearers_per_scenario: Summary = field(default_factory=Summary)
    turns_per_conversation: Summary = field(default_factory=Summary)
    histograms: Mapping[str, Mapping[int, int]] = field(default_factory=dict)

    def to_dict(self) -> dict[str, Any]:
        return {
            "scenarios": self.scenarios,
            "conversations": self.conversations,
            "unique_combos": self.unique_combos,
            "patterns_per_scenario": self.patterns_per_scenario.to_dict(),
            "characters_per_scenario": self.characters_per_scenario.to_dict(),
            "bearers_per_scenario": self.bearers_per_scenario.to_dict(),
            "turns_per_conversation": self.turns_per_conversation.to_dict(),
            "histograms": {k: {str(v): c for v, c in sorted(h.items())} for k, h in self.histograms.items()},
        }

    def write_histograms_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["metric", "value", "count"])
            for metric in sorted(self.histograms):
                for value, count in sorted(self.histograms[metric].items()):
                    w.writerow([metric, value, count])


def corpus_stats(scenarios: Sequence[Scenario], conversations: Iterable[Conversation]) -> StatReport:
    convs = list(conversations)
    patterns = [len(s.combo) for s in scenarios]
    characters = [len(s.characters) for s in scenarios]
    bearers = [len(s.bearers) for s in scenarios]
    turns = [len(c.turns) for c in convs]
    return StatReport(
        scenarios=len(scenarios),
        conversations=len(convs),
        unique_combos=len({s.combo for s in scenarios}),
        patterns_per_scenario=Summary.of(patterns),
        characters_per_scenario=Summary.of(characters),
        bearers_per_scenario=Summary.of(bearers),
        turns_per_conversation=Summary.of(turns),
        histograms={
            "patterns_per_scenario": dict(Counter(patterns)),
            "characters_per_scenario": dict(Counter(characters)),
            "turns_per_conversation": dict(Counter(turns)),
        },
    )
