"""Pattern records, the registry, literature synthesis and combination checks."""

from __future__ import annotations

import json
import logging
import re
import threading
from collections import Counter
from collections.abc import Iterable, Iterator, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Union

from .gateway import SYNTHESIS_TEMPERATURE, ChatRequest, Gateway
from .prompts import get_template
from .taxonomy import (
    FULL_SOCIAL_COUNT,
    FULL_TRAIT_COUNT,
    SOCIAL_COGNITIVE,
    TRAITS,
    TRAITS_PER_CELL,
    Category,
    Dimension,
    Pole,
    slugify,
)

logger = logging.getLogger(__name__)

SECTION_FIELDS = ("definition", "core_mechanisms", "manifestations")
CORPUS_SEPARATOR = "-----"


class RegistryError(ValueError):
    pass


class DuplicatePatternError(RegistryError):
    def __init__(self, pattern_id: str, where: str = ""):
        super().__init__(f"duplicate pattern id {pattern_id!r}" + (f" ({where})" if where else ""))
        self.pattern_id = pattern_id


class PatternParseError(ValueError):
    pass


@dataclass(frozen=True)
class PersonalityTrait:
    dimension: Dimension
    pole: Pole

    @property
    def label(self) -> str:
        return f"Personality Trait, {self.dimension.value}, {self.pole.value} pole"


@dataclass(frozen=True)
class SocialCognitive:
    category: Category

    @property
    def label(self) -> str:
        return f"Social-Cognitive Pattern, {self.category.value}"


PatternKind = Union[PersonalityTrait, SocialCognitive]


@dataclass(frozen=True)
class Pattern:
    id: str
    name: str
    kind: PatternKind
    definition: str = ""
    core_mechanisms: str = ""
    manifestations: str = ""
    sources: tuple[str, ...] = ()

    @property
    def is_trait(self) -> bool:
        return isinstance(self.kind, PersonalityTrait)

    @property
    def is_complete(self) -> bool:
        return all(getattr(self, f).strip() for f in SECTION_FIELDS)

    @property
    def missing_sections(self) -> list[str]:
        return [f for f in SECTION_FIELDS if not getattr(self, f).strip()]

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"id": self.id, "name": self.name}
        if isinstance(self.kind, PersonalityTrait):
            d.update(kind="personality_trait", dimension=self.kind.dimension.value,
                     pole=self.kind.pole.value, category=None)
        else:
            d.update(kind="social_cognitive", dimension=None, pole=None,
                     category=self.kind.category.value)
        d.update(definition=self.definition, core_mechanisms=self.core_mechanisms,
                 manifestations=self.manifestations, sources=list(self.sources))
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Pattern":
        for key in ("id", "name", "kind"):
            if not str(d.get(key) or "").strip():
                raise RegistryError(f"pattern record missing required field {key!r}: {dict(d)!r:.120}")
        kind = parse_kind(d)
        sources = d.get("sources") or []
        if not isinstance(sources, list) or not all(isinstance(s, str) for s in sources):
            raise RegistryError(f"pattern {d['id']!r}: sources must be a list of strings")
        return cls(
            id=str(d["id"]),
            name=str(d["name"]),
            kind=kind,
            definition=str(d.get("definition") or ""),
            core_mechanisms=str(d.get("core_mechanisms") or ""),
            manifestations=str(d.get("manifestations") or ""),
            sources=tuple(sources),
        )

    def structure_text(self) -> str:
        """Human-readable structure used inside generation prompts."""
        return (
            f"### Pattern: {self.name} ({self.kind.label})\n"
            f"Definition: {self.definition.strip() or '(not available)'}\n"
            f"Core Mechanisms: {self.core_mechanisms.strip() or '(not available)'}\n"
            f"Real-World Manifestations: {self.manifestations.strip() or '(not available)'}"
        )


def parse_kind(d: Mapping[str, Any]) -> PatternKind:
    kind = d.get("kind")
    if kind == "personality_trait":
        try:
            return PersonalityTrait(Dimension(d.get("dimension")), Pole(d.get("pole")))
        except ValueError as exc:
            raise RegistryError(
                f"pattern {d.get('id')!r}: unknown dimension/pole {d.get('dimension')!r}/{d.get('pole')!r}"
            ) from exc
    if kind == "social_cognitive":
        try:
            return SocialCognitive(Category(d.get("category")))
        except ValueError as exc:
            raise RegistryError(f"pattern {d.get('id')!r}: unknown category {d.get('category')!r}") from exc
    raise RegistryError(f"pattern {d.get('id')!r}: unknown kind {kind!r}")


def kind_from_spec(spec: str) -> PatternKind:
    """Parse CLI kind strings: ``trait:<Dimension>:<pole>`` or ``social:<Category>``."""
    parts = spec.split(":")
    if parts[0] == "trait" and len(parts) == 3:
        return PersonalityTrait(Dimension(parts[1]), Pole(parts[2]))
    if parts[0] == "social" and len(parts) == 2:
        return SocialCognitive(Category(parts[1]))
    raise ValueError(f"bad kind spec {spec!r}; expected trait:<Dimension>:<pole> or social:<Category>")


class Registry:
    """Immutable, indexed collection of patterns."""

    def __init__(self, patterns: Iterable[Pattern] = ()):
        by_id: dict[str, Pattern] = {}
        for p in patterns:
            if p.id in by_id:
                raise DuplicatePatternError(p.id)
            by_id[p.id] = p
        self._by_id = dict(sorted(by_id.items()))

    def __len__(self) -> int:
        return len(self._by_id)

    def __iter__(self) -> Iterator[Pattern]:
        return iter(self._by_id.values())

    def __contains__(self, pattern_id: object) -> bool:
        return pattern_id in self._by_id

    def __getitem__(self, pattern_id: str) -> Pattern:
        try:
            return self._by_id[pattern_id]
        except KeyError:
            raise KeyError(f"unknown pattern id {pattern_id!r}") from None

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Registry) and self._by_id == other._by_id

    def get(self, pattern_id: str) -> Pattern | None:
        return self._by_id.get(pattern_id)

    @property
    def ids(self) -> list[str]:
        return list(self._by_id)

    def traits(self) -> list[Pattern]:
        return [p for p in self if p.is_trait]

    def social_cognitive(self) -> list[Pattern]:
        return [p for p in self if not p.is_trait]

    def by_dimension(self, dimension: Dimension, pole: Pole | None = None) -> list[Pattern]:
        return [
            p for p in self.traits()
            if p.kind.dimension == dimension and (pole is None or p.kind.pole == pole)  # type: ignore[union-attr]
        ]

    def by_category(self, category: Category) -> list[Pattern]:
        return [p for p in self.social_cognitive() if p.kind.category == category]  # type: ignore[union-attr]

    def counts(self) -> tuple[int, int]:
        """(personality traits, social-cognitive patterns)."""
        n_traits = len(self.traits())
        return n_traits, len(self) - n_traits

    def cell_counts(self) -> Counter:
        return Counter((p.kind.dimension, p.kind.pole) for p in self.traits())  # type: ignore[union-attr]

    def is_full(self) -> bool:
        cells = self.cell_counts()
        return (
            self.counts() == (FULL_TRAIT_COUNT, FULL_SOCIAL_COUNT)
            and len(cells) == len(Dimension) * len(Pole)
            and all(n == TRAITS_PER_CELL for n in cells.values())
        )


def taxonomy_registry() -> Registry:
    """The full 244-pattern taxonomy with empty content sections."""
    patterns = [
        Pattern(slugify(name), name, PersonalityTrait(dim, pole))
        for (dim, pole), names in TRAITS.items()
        for name in names
    ]
    patterns += [
        Pattern(slugify(name), name, SocialCognitive(cat))
        for cat, names in SOCIAL_COGNITIVE.items()
        for name in names
    ]
    return Registry(patterns)


def _records_in(path: Path) -> Iterator[tuple[str, dict]]:
    if path.suffix == ".jsonl":
        for n, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if line.strip():
                yield f"{path}:{n}", json.loads(line)
    else:
        yield str(path), json.loads(path.read_text(encoding="utf-8"))


def load_registry(path: str | Path, require_sections: bool = False) -> Registry:
    """Load pattern records from a directory of ``*.json`` files or a single JSON/JSONL file.

    With ``require_sections`` every pattern must carry non-empty definition,
    core mechanisms and manifestations (the post-synthesis invariant).
    """
    path = Path(path)
    if path.is_dir():
        files = sorted(p for p in path.iterdir() if p.suffix in (".json", ".jsonl"))
    elif path.exists():
        files = [path]
    else:
        raise RegistryError(f"no such pattern path: {path}")

    seen: dict[str, str] = {}
    patterns = []
    for f in files:
        for where, record in _records_in(f):
            if not isinstance(record, dict):
                raise RegistryError(f"{where}: pattern record must be a JSON object")
            pattern = Pattern.from_dict(record)
            if pattern.id in seen:
                raise DuplicatePatternError(pattern.id, f"{seen[pattern.id]} and {where}")
            if require_sections and not pattern.is_complete:
                raise RegistryError(f"{where}: pattern {pattern.id!r} has empty {pattern.missing_sections}")
            seen[pattern.id] = where
            patterns.append(pattern)
    registry = Registry(patterns)
    n_traits, n_social = registry.counts()
    logger.info("loaded %d patterns (%d traits, %d social-cognitive) from %s",
                len(registry), n_traits, n_social, path)
    return registry


def serialize_registry(registry: Registry, directory: str | Path) -> list[Path]:
    """Write one ``<id>.json`` file per pattern."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    written = []
    for p in registry:
        out = directory / f"{p.id}.json"
        out.write_text(json.dumps(p.to_dict(), ensure_ascii=False, indent=2) + "\n", encoding="utf-8")
        written.append(out)
    return written


# --------------------------------------------------------------------- synthesis


@dataclass(frozen=True)
class CorpusDocument:
    text: str
    source: str = ""


def render_corpus(corpus: Sequence[CorpusDocument | str]) -> str:
    chunks = []
    for doc in corpus:
        if isinstance(doc, str):
            doc = CorpusDocument(doc)
        sep = f"{CORPUS_SEPARATOR} {doc.source}".rstrip()
        chunks.append(f"{sep}\n{doc.text.strip()}")
    return "\n".join(chunks)


def load_corpus_dir(directory: str | Path) -> list[CorpusDocument]:
    """Every ``*.txt``/``*.md`` file in a directory is one document; file name is the source."""
    directory = Path(directory)
    docs = [
        CorpusDocument(p.read_text(encoding="utf-8"), p.stem)
        for p in sorted(directory.iterdir())
        if p.suffix in (".txt", ".md") and p.is_file()
    ]
    return docs


_SECTION_ALIASES = {
    "definition": "definition",
    "description": "definition",
    "core mechanisms": "core_mechanisms",
    "core mechanism": "core_mechanisms",
    "real-world manifestation": "manifestations",
    "real-world manifestations": "manifestations",
    "real world manifestation": "manifestations",
    "real world manifestations": "manifestations",
}
_MD_HEADING = re.compile(r"^\s*#{1,6}\s*(.*?)\s*#*\s*$")


def _heading_key(line: str) -> str | None:
    m = _MD_HEADING.match(line)
    title = m.group(1) if m else line.strip()
    title = title.strip().strip("*_").strip().rstrip(":").strip().strip("*_").strip()
    title = re.sub(r"^\d+[.)]\s*", "", title)
    return _SECTION_ALIASES.get(title.lower())


def parse_pattern_sections(text: str) -> dict[str, str]:
    """Split a synthesis response into the three sections, verbatim.

    Raises :class:`PatternParseError` when none of the section headings is
    present. A section whose heading is absent comes back empty.
    """
    sections: dict[str, list[str]] = {}
    current: str | None = None
    for line in text.splitlines():
        key = _heading_key(line)
        if key is not None:
            current = key
            sections.setdefault(key, [])
            continue
        if current is not None:
            sections[current].append(line)
    if not sections:
        raise PatternParseError("response contains none of the Definition / Core Mechanisms / "
                                "Real-World Manifestations headings")
    return {f: "\n".join(sections.get(f, [])).strip() for f in SECTION_FIELDS}


def synthesis_request(name: str, kind: PatternKind, corpus: Sequence[CorpusDocument | str]) -> ChatRequest:
    if not corpus:
        raise ValueError(f"empty corpus for pattern {name!r}")
    corpus_text = render_corpus(corpus)
    if isinstance(kind, PersonalityTrait):
        system, user = get_template("pattern_trait").render(trait_name=name, corpus=corpus_text)
    else:
        system, user = get_template("pattern_social").render(principle_name=name, corpus=corpus_text)
    return ChatRequest(system=system, user=user, temperature=SYNTHESIS_TEMPERATURE, tag="pattern_synth")


def synthesize_pattern(
    name: str,
    kind: PatternKind,
    corpus: Sequence[CorpusDocument | str],
    gateway: Gateway,
    pattern_id: str | None = None,
) -> Pattern:
    """Summarize a literature corpus into a structured pattern.

    Sections are copied verbatim from the response; a section the response
    omits stays empty and the pattern reports ``is_complete == False``.
    """
    request = synthesis_request(name, kind, corpus)
    response = gateway.complete(request)
    sections = parse_pattern_sections(response.text)
    sources = tuple(d.source for d in corpus if isinstance(d, CorpusDocument) and d.source)
    pattern = Pattern(id=pattern_id or slugify(name), name=name, kind=kind, sources=sources, **sections)
    if not pattern.is_complete:
        logger.warning("pattern %s incomplete: missing %s", pattern.id, pattern.missing_sections)
    return pattern


# --------------------------------------------------------------------- compatibility


MIN_COMBO, MAX_COMBO = 2, 5


@dataclass(frozen=True)
class CompatibilityVerdict:
    compatible: bool
    reason: str = ""


def parse_verdict(text: str) -> CompatibilityVerdict:
    text = text.strip()
    try:
        data = json.loads(text)
    except ValueError:
        data = None
    if isinstance(data, dict) and isinstance(data.get("compatible"), bool):
        return CompatibilityVerdict(data["compatible"], str(data.get("reason") or ""))
    first = re.split(r"[\s:.,;!-]+", text.lower(), maxsplit=1)[0] if text else ""
    if first in ("compatible", "yes", "true"):
        return CompatibilityVerdict(True, text)
    if first in ("incompatible", "no", "false"):
        return CompatibilityVerdict(False, text)
    raise PatternParseError(f"cannot read compatibility verdict from {text[:80]!r}")


@dataclass
class CompatibilityValidator:
    """Validates combinations once per unique sorted id tuple."""

    registry: Registry
    gateway: Gateway
    cache: dict[tuple[str, ...], CompatibilityVerdict] = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __call__(self, pattern_ids: Sequence[str]) -> CompatibilityVerdict:
        return validate_combination(pattern_ids, self.registry, self.gateway, self.cache, self._lock)


def validate_combination(
    pattern_ids: Sequence[str],
    registry: Registry,
    gateway: Gateway,
    cache: dict[tuple[str, ...], CompatibilityVerdict] | None = None,
    lock: threading.Lock | None = None,
) -> CompatibilityVerdict:
    if not MIN_COMBO <= len(pattern_ids) <= MAX_COMBO:
        raise ValueError(f"combination size must be {MIN_COMBO}-{MAX_COMBO}, got {len(pattern_ids)}")
    if len(set(pattern_ids)) != len(pattern_ids):
        raise ValueError(f"combination repeats a pattern: {list(pattern_ids)}")
    unknown = [pid for pid in pattern_ids if pid not in registry]
    if unknown:
        raise KeyError(f"unknown pattern ids {unknown}")
    key = tuple(sorted(pattern_ids))
    if cache is not None:
        if lock:
            with lock:
                hit = cache.get(key)
        else:
            hit = cache.get(key)
        if hit is not None:
            return hit
    info = "\n\n".join(registry[pid].structure_text() for pid in key)
    system, user = get_template("compatibility").render(pattern_information=info)
    response = gateway.complete(ChatRequest(system, user, temperature=0.0, tag="compat"))
    verdict = parse_verdict(response.text)
    if cache is not None:
        if lock:
            with lock:
                cache[key] = verdict
        else:
            cache[key] = verdict
    return verdict
