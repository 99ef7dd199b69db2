"""The thought/action/speech turn grammar.

A turn line looks like::

    Hermione: [I have to devise a foolproof plan.] (She quickly draws her wand) Harry, use the flute, now!

``[...]`` is an inner thought, ``(...)`` a visible action, bare text is
speech. Brackets do not nest, and an unmatched bracket anywhere is an error.
"""

from __future__ import annotations

import enum
import re
from collections.abc import Collection, Iterable, Mapping
from dataclasses import dataclass, field
from typing import Any, Protocol

MIN_TURNS = 12
MAX_TURNS = 20

_OPEN = {"[": "thought", "(": "action"}
_CLOSE = {"]": "[", ")": "("}
_BRACKETS = set("[]()")


class SegmentKind(str, enum.Enum):
    THOUGHT = "thought"
    ACTION = "action"
    SPEECH = "speech"


_DELIMS = {SegmentKind.THOUGHT: ("[", "]"), SegmentKind.ACTION: ("(", ")"), SegmentKind.SPEECH: ("", "")}


class DialogueParseError(ValueError):
    def __init__(self, message: str, column: int | None = None, line_no: int | None = None):
        where = []
        if line_no is not None:
            where.append(f"line {line_no}")
        if column is not None:
            where.append(f"column {column}")
        super().__init__(message + (f" ({', '.join(where)})" if where else ""))
        self.column = column
        self.line_no = line_no


class UnknownSpeakerError(DialogueParseError):
    pass


class UnbalancedBracketError(DialogueParseError):
    pass


class EmptyTurnError(DialogueParseError):
    pass


@dataclass(frozen=True)
class Segment:
    kind: SegmentKind
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError(f"empty {self.kind.value} segment")

    def render(self) -> str:
        left, right = _DELIMS[self.kind]
        return f"{left}{self.text}{right}"

    def to_dict(self) -> dict[str, str]:
        return {"kind": self.kind.value, "text": self.text}


def Thought(text: str) -> Segment:  # noqa: N802
    return Segment(SegmentKind.THOUGHT, text)


def Action(text: str) -> Segment:  # noqa: N802
    return Segment(SegmentKind.ACTION, text)


def Speech(text: str) -> Segment:  # noqa: N802
    return Segment(SegmentKind.SPEECH, text)


@dataclass(frozen=True)
class Turn:
    speaker: str
    segments: tuple[Segment, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "segments", tuple(self.segments))

    def to_dict(self) -> dict[str, Any]:
        return {"speaker": self.speaker, "segments": [s.to_dict() for s in self.segments]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Turn":
        return cls(d["speaker"], tuple(Segment(SegmentKind(s["kind"]), s["text"]) for s in d["segments"]))

    def body(self) -> str:
        return " ".join(s.render() for s in self.segments)


@dataclass(frozen=True)
class Conversation:
    scenario_id: str
    turns: tuple[Turn, ...] = field(default_factory=tuple)

    def __post_init__(self) -> None:
        object.__setattr__(self, "turns", tuple(self.turns))

    def speakers(self) -> list[str]:
        return list(dict.fromkeys(t.speaker for t in self.turns))

    def turns_of(self, speaker: str) -> list[Turn]:
        return [t for t in self.turns if t.speaker == speaker]

    def to_dict(self) -> dict[str, Any]:
        return {"scenario_id": self.scenario_id, "turns": [t.to_dict() for t in self.turns]}

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "Conversation":
        return cls(d["scenario_id"], tuple(Turn.from_dict(t) for t in d["turns"]))


# --------------------------------------------------------------------- parsing


def scan_segments(body: str, offset: int = 0) -> list[tuple[Segment, int]]:
    """Split a turn body into segments with their start offsets.

    ``offset`` is added to every reported position so errors can point at
    columns of the full line.
    """
    out: list[tuple[Segment, int]] = []
    speech_start: int | None = None
    i, n = 0, len(body)

    def flush_speech(end: int) -> None:
        nonlocal speech_start
        if speech_start is None:
            return
        chunk = body[speech_start:end]
        stripped = chunk.strip()
        if stripped:
            lead = len(chunk) - len(chunk.lstrip())
            out.append((Speech(stripped), offset + speech_start + lead))
        speech_start = None

    while i < n:
        ch = body[i]
        if ch in _OPEN:
            flush_speech(i)
            close = "]" if ch == "[" else ")"
            j = i + 1
            while j < n and body[j] != close:
                if body[j] in _BRACKETS:
                    raise UnbalancedBracketError(
                        f"nested or stray {body[j]!r} inside {ch}...{close}", column=offset + j + 1
                    )
                j += 1
            if j >= n:
                raise UnbalancedBracketError(f"unclosed {ch!r}", column=offset + i + 1)
            inner = body[i + 1:j]
            if not inner.strip():
                raise EmptyTurnError(f"empty {ch}{close} segment", column=offset + i + 1)
            kind = SegmentKind.THOUGHT if ch == "[" else SegmentKind.ACTION
            out.append((Segment(kind, inner), offset + i))
            i = j + 1
            continue
        if ch in _CLOSE:
            raise UnbalancedBracketError(f"unmatched {ch!r}", column=offset + i + 1)
        if speech_start is None:
            speech_start = i
        i += 1
    flush_speech(n)
    return out


def _split_speaker(line: str, known_speakers: Collection[str]) -> tuple[str, int] | None:
    # Longest match first so "Anna Lee" wins over "Anna".
    for name in sorted(known_speakers, key=len, reverse=True):
        if line.startswith(name + ":"):
            return name, len(name) + 1
    return None


def parse_turn(line: str, known_speakers: Collection[str]) -> Turn:
    split = _split_speaker(line, known_speakers)
    if split is None:
        head = line.split(":", 1)[0] if ":" in line else line[:30]
        raise UnknownSpeakerError(f"line does not start with a known speaker: {head!r}", column=1)
    speaker, start = split
    return _parse_body(speaker, line, start)


def _parse_body(speaker: str, line: str, start: int) -> Turn:
    body = line[start:]
    segments = [seg for seg, _ in scan_segments(body, offset=start)]
    if not segments:
        raise EmptyTurnError(f"empty turn body for {speaker!r}", column=start + 1)
    return Turn(speaker, tuple(segments))


def serialize_turn(turn: Turn) -> str:
    return f"{turn.speaker}: {turn.body()}"


def is_canonical_turn(turn: Turn) -> bool:
    """True when ``parse_turn(serialize_turn(turn)) == turn`` is guaranteed.

    Segment texts must be bracket-free and single-line; speech must be
    stripped and never adjacent to another speech segment.
    """
    if not turn.segments or ":" in turn.speaker or "\n" in turn.speaker:
        return False
    prev_speech = False
    for seg in turn.segments:
        if _BRACKETS & set(seg.text) or "\n" in seg.text:
            return False
        if seg.kind is SegmentKind.SPEECH:
            if prev_speech or seg.text != seg.text.strip():
                return False
            prev_speech = True
        else:
            prev_speech = False
    return True


_NAMEISH = re.compile(r"^([A-Z][\w'\-]*(?: [A-Z][\w'\-]*){0,2}):\s")
_BOLD_NAME = re.compile(r"^\*\*([^*]+)\*\*:")


def parse_conversation(
    text: str,
    known_speakers: Collection[str],
    scenario_id: str = "",
    strict_speakers: bool = False,
) -> Conversation:
    """Parse a multi-line transcript into turns.

    A new turn starts at a line beginning with ``Name:`` for a known name;
    other lines continue the current turn (joined with a space). With
    ``strict_speakers`` a line starting with a capitalised name-like token
    followed by a colon also opens a turn, so invented characters surface as
    unknown speakers instead of being folded into the previous turn.
    """
    known = set(known_speakers)
    blocks: list[tuple[str, str, int]] = []  # speaker, line text, line number
    for line_no, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line:
            continue
        line = _BOLD_NAME.sub(r"\1:", line)
        split = _split_speaker(line, known)
        if split is None and strict_speakers:
            m = _NAMEISH.match(line)
            if m:
                split = (m.group(1), len(m.group(1)) + 1)
        if split is not None:
            speaker, start = split
            blocks.append((speaker, line, line_no))
            continue
        if not blocks:
            raise UnknownSpeakerError(f"text before the first turn: {line[:40]!r}", column=1, line_no=line_no)
        speaker, prev, first_no = blocks[-1]
        blocks[-1] = (speaker, f"{prev} {line}", first_no)

    turns = []
    for speaker, line, line_no in blocks:
        try:
            turns.append(_parse_body(speaker, line, len(speaker) + 1))
        except DialogueParseError as exc:
            raise type(exc)(str(exc).split(" (")[0], column=exc.column, line_no=line_no) from exc
    return Conversation(scenario_id, tuple(turns))


def serialize_conversation(conv: Conversation) -> str:
    return "\n".join(serialize_turn(t) for t in conv.turns)


# --------------------------------------------------------------------- validation


class HasRoles(Protocol):
    @property
    def protagonist_name(self) -> str: ...

    @property
    def character_names(self) -> list[str]: ...


@dataclass(frozen=True)
class ValidationReport:
    violations: tuple[str, ...] = ()

    @property
    def ok(self) -> bool:
        return not self.violations

    def __bool__(self) -> bool:  # truthy when there is something to report
        return bool(self.violations)


def validate_conversation(conv: Conversation, scenario: HasRoles) -> ValidationReport:
    """List every violated structural constraint; never raises."""
    violations: list[str] = []
    n = len(conv.turns)
    if n < MIN_TURNS:
        violations.append(f"turn_count_below_min({n})")
    elif n > MAX_TURNS:
        violations.append(f"turn_count_above_max({n})")

    protagonist = scenario.protagonist_name
    names = set(scenario.character_names)
    if conv.turns:
        if conv.turns[0].speaker not in names - {protagonist}:
            violations.append("opener_not_supporting")
        if conv.turns[-1].speaker != protagonist:
            violations.append("closer_not_protagonist")

    reported_unknown = set()
    for i, turn in enumerate(conv.turns):
        if turn.speaker not in names and turn.speaker not in reported_unknown:
            reported_unknown.add(turn.speaker)
            violations.append(f"unknown_speaker({turn.speaker})")
        if not turn.segments:
            violations.append(f"empty_turn({i})")
        for seg in turn.segments:
            if not seg.text.strip():
                violations.append(f"empty_segment({i})")
    return ValidationReport(tuple(violations))


def lint_conversations(convs: Iterable[tuple[Conversation, HasRoles]]) -> dict[str, ValidationReport]:
    return {c.scenario_id: validate_conversation(c, s) for c, s in convs}
