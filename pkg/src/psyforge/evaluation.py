"""Transcript production, checklist judging, IPE/MPD scoring and rater agreement."""

from __future__ import annotations

import csv
import logging
import math
import statistics
from collections import Counter, defaultdict
from collections.abc import Callable, Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .checklists import ChecklistItem
from .dataset import render_about_others
from .dialogue import (
    Conversation,
    DialogueParseError,
    Speech,
    Turn,
    parse_turn,
    serialize_conversation,
    serialize_turn,
)
from .gateway import JUDGE_TEMPERATURE, SYNTHESIS_TEMPERATURE, ChatRequest, Gateway, LLMProviderHandle
from .prompts import get_template
from .scenarios import Scenario
from .verdicts import VerdictFormatError, entry_reason, match_results, parse_results, render_checklist, valid_score

logger = logging.getLogger(__name__)

DEFAULT_CHUNK_SIZE = 15
ITEM_RETRIES = 3
CHECKLIST_METRICS = ("ipe", "mpd")
REPLAY, SELFPLAY = "replay", "selfplay"
DEFAULT_SELFPLAY_TURNS = 16


class EvalError(ValueError):
    pass


# --------------------------------------------------------------------- transcripts


@dataclass(frozen=True)
class EvalTask:
    scenario_id: str
    target_character: str
    mode: str = REPLAY
    model: LLMProviderHandle | None = None

    def check(self, scenario: Scenario, gold: Conversation | None) -> None:
        if self.mode not in (REPLAY, SELFPLAY):
            raise EvalError(f"unknown mode {self.mode!r}")
        if scenario.id != self.scenario_id:
            raise EvalError(f"task is for {self.scenario_id}, got scenario {scenario.id}")
        if not scenario.character(self.target_character).assigned_patterns:
            raise EvalError(f"{self.target_character} bears no pattern in {scenario.id}")
        if self.mode == REPLAY and gold is None:
            raise EvalError("replay mode needs a gold conversation")


@dataclass(frozen=True)
class Transcript:
    conversation: Conversation
    target: str
    flagged_turns: tuple[int, ...] = ()
    model_calls: int = 0


def _turn_request(scenario: Scenario, speaker: str, history: Sequence[Turn], tag: str, attempt: int) -> ChatRequest:
    profile = scenario.character(speaker)
    system, user = get_template("roleplay").render(
        protagonist_name=speaker,
        about_self=profile.about_self,
        about_others=render_about_others(scenario, speaker),
        story_background=scenario.background,
        history="\n".join(serialize_turn(t) for t in history) or "(The scene is about to begin.)",
    )
    return ChatRequest(system, user, SYNTHESIS_TEMPERATURE, seed=attempt or None, tag=tag)


def _coerce_turn(text: str, speaker: str) -> Turn:
    line = " ".join(part.strip() for part in text.strip().splitlines() if part.strip())
    if line.startswith(speaker + ":"):
        line = line[len(speaker) + 1:].strip()
    return parse_turn(f"{speaker}: {line}", [speaker])


def _produce_turn(
    scenario: Scenario, speaker: str, history: Sequence[Turn], gateway: Gateway, tag: str
) -> tuple[Turn, bool, int]:
    """Generate one turn; returns (turn, flagged, calls). One retry on a parse failure."""
    raw = ""
    for attempt in range(2):
        raw = gateway.complete(_turn_request(scenario, speaker, history, tag, attempt)).text
        try:
            return _coerce_turn(raw, speaker), False, attempt + 1
        except DialogueParseError as exc:
            logger.info("unparseable %s turn for %s (attempt %d): %s", tag, speaker, attempt + 1, exc)
    return Turn(speaker, (Speech(raw.strip() or "(no output)"),)), True, 2


def default_schedule(scenario: Scenario, target: str, n_turns: int = DEFAULT_SELFPLAY_TURNS) -> list[str]:
    """Speaker order for self-play without a gold conversation.

    Alternates a supporting character (cycling) with the target, so the
    scene opens with a supporting character and closes with the target.
    """
    others = [n for n in scenario.character_names if n != target]
    order: list[str] = []
    k = 0
    for i in range(n_turns):
        if i == n_turns - 1 or i % 2 == 1:
            order.append(target)
        else:
            order.append(others[k % len(others)])
            k += 1
    return order


def generate_transcript(
    task: EvalTask,
    scenario: Scenario,
    model: Gateway,
    gold: Conversation | None = None,
    simulator: Gateway | None = None,
    schedule: Sequence[str] | None = None,
) -> Transcript:
    """Build the evaluation transcript for one target character.

    Replay: gold turns by other characters are copied; each target turn is
    regenerated from the gold context before it. Self-play: the simulator
    voices the other characters and everyone sees the evolving transcript.
    """
    task.check(scenario, gold)
    target = task.target_character
    turns: list[Turn] = []
    flagged: list[int] = []
    calls = 0
    if task.mode == REPLAY:
        assert gold is not None
        for i, gold_turn in enumerate(gold.turns):
            if gold_turn.speaker != target:
                turns.append(gold_turn)
                continue
            turn, bad, n = _produce_turn(scenario, target, gold.turns[:i], model, "roleplay")
            calls += n
            if bad:
                flagged.append(i)
            turns.append(turn)
    else:
        if simulator is None:
            raise EvalError("self-play needs a simulator gateway")
        order = list(schedule) if schedule else ([t.speaker for t in gold.turns] if gold else default_schedule(scenario, target))
        for i, speaker in enumerate(order):
            gw, tag = (model, "roleplay") if speaker == target else (simulator, "simulator")
            turn, bad, n = _produce_turn(scenario, speaker, turns, gw, tag)
            if speaker == target:
                calls += n
            if bad:
                flagged.append(i)
            turns.append(turn)
    return Transcript(Conversation(scenario.id, tuple(turns)), target, tuple(flagged), calls)


# --------------------------------------------------------------------- judging


@dataclass(frozen=True)
class JudgedItem:
    item_id: str
    score: int
    reason: str
    repeat_scores: tuple[int, ...] = ()
    failed: bool = False

    def __post_init__(self) -> None:
        if self.score not in (-1, 0, 1):
            raise ValueError(f"score must be -1, 0 or 1, got {self.score!r}")
        if not self.reason.strip():
            raise ValueError("judged item needs a reason")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"id": self.item_id, "score": self.score, "reason": self.reason, "failed": self.failed}
        if self.repeat_scores:
            d["repeat_scores"] = list(self.repeat_scores)
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "JudgedItem":
        return cls(d["id"], d["score"], d["reason"], tuple(d.get("repeat_scores", ())), d.get("failed", False))


def majority(scores: Sequence[int]) -> int:
    """Strict plurality of the scores; a tie for the top count gives 0."""
    if not scores:
        raise ValueError("no scores")
    counts = Counter(scores).most_common()
    if len(counts) > 1 and counts[0][1] == counts[1][1]:
        return 0
    return counts[0][0]


def judge_request(conversation_text: str, protagonist: str, texts: Sequence[str], seed: int | None) -> ChatRequest:
    system, user = get_template("judge").render(
        protagonist=protagonist, conversation=conversation_text, checklist=render_checklist(texts)
    )
    return ChatRequest(system, user, JUDGE_TEMPERATURE, seed=seed, tag="judge")


def _judge_chunk(
    conversation_text: str,
    protagonist: str,
    chunk: Sequence[ChecklistItem],
    gateway: Gateway,
    repeat: int,
    max_retries: int,
) -> list[tuple[int | None, str]]:
    """Score one chunk once. Returns (score or None when failed, reason) per item."""
    final: dict[int, tuple[int | None, str]] = {}
    attempts = dict.fromkeys(range(len(chunk)), 0)
    problems: dict[int, str] = {}
    call = 0
    while True:
        pending = [i for i in range(len(chunk)) if i not in final]
        if not pending:
            break
        for i in pending:
            if attempts[i] > max_retries:
                final[i] = (None, f"judge output invalid after {attempts[i]} attempts: {problems.get(i, 'unknown')}")
        pending = [i for i in pending if i not in final]
        if not pending:
            break
        seed = repeat * 1000 + call if (repeat or call) else None
        call += 1
        texts = [chunk[i].text for i in pending]
        text = gateway.complete(judge_request(conversation_text, protagonist, texts, seed)).text
        for i in pending:
            attempts[i] += 1
        try:
            results = parse_results(text)
        except VerdictFormatError as exc:
            for i in pending:
                problems[i] = str(exc)
            continue
        if len(results) != len(pending):
            for i in pending:
                problems[i] = f"expected {len(pending)} results, got {len(results)}"
            continue
        matched = match_results(results, texts)
        for pos, i in enumerate(pending):
            entry = matched.get(pos)
            if entry is None:
                problems[i] = "criterion not matched"
                continue
            score, reason = valid_score(entry), entry_reason(entry)
            if score is None:
                problems[i] = f"invalid score {entry.get('score')!r}"
            elif not reason:
                problems[i] = "empty reason"
            else:
                final[i] = (score, reason)
    return [final[i] for i in range(len(chunk))]


def judge_checklist(
    transcript: Conversation | str,
    protagonist: str,
    items: Sequence[ChecklistItem],
    gateway: Gateway,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    repeats: int = 1,
    max_retries: int = ITEM_RETRIES,
) -> list[JudgedItem]:
    """Ternary verdicts for every item, in input order.

    Items are sent in chunks of at most ``chunk_size``. Non-JSON output or
    the wrong number of results retries every pending item of the chunk; an
    invalid score or empty reason retries just that item. After
    ``max_retries`` retries an item scores 0 and is marked failed. With
    ``repeats`` > 1 each repeat is judged independently and combined by
    majority.
    """
    if not items:
        raise EvalError("no checklist items to judge")
    if chunk_size < 1 or repeats < 1:
        raise EvalError("chunk_size and repeats must be positive")
    text = transcript if isinstance(transcript, str) else serialize_conversation(transcript)
    per_repeat: list[list[tuple[int | None, str]]] = []
    for r in range(repeats):
        out: list[tuple[int | None, str]] = []
        for start in range(0, len(items), chunk_size):
            out.extend(_judge_chunk(text, protagonist, items[start:start + chunk_size], gateway, r, max_retries))
        per_repeat.append(out)

    judged = []
    for k, item in enumerate(items):
        verdicts = [rep[k] for rep in per_repeat]
        scores = [s if s is not None else 0 for s, _ in verdicts]
        failed = any(s is None for s, _ in verdicts)
        score = majority(scores) if repeats > 1 else scores[0]
        reason = next((why for s, why in verdicts if s == score and s is not None), verdicts[0][1])
        judged.append(JudgedItem(item.id, score, reason, tuple(scores) if repeats > 1 else (), failed))
    return judged


# --------------------------------------------------------------------- scores


@dataclass(frozen=True)
class SampleScores:
    ipe: float | None
    mpd: float | None
    pattern_items: tuple[JudgedItem, ...] = ()
    scenario_items: tuple[JudgedItem, ...] = ()

    @property
    def failed_item_count(self) -> int:
        return sum(i.failed for i in self.pattern_items + self.scenario_items)


def _mean(items: Sequence[JudgedItem]) -> float | None:
    return math.fsum(i.score for i in items) / len(items) if items else None


def compute_scores(pattern_items: Sequence[JudgedItem], scenario_items: Sequence[JudgedItem]) -> SampleScores:
    """IPE is the mean pattern-level score, MPD the mean scenario-level score."""
    return SampleScores(_mean(pattern_items), _mean(scenario_items), tuple(pattern_items), tuple(scenario_items))


def normalize_unit(score: float) -> float:
    """Map a [-1, 1] score onto [0, 1]."""
    return (score + 1) / 2


# --------------------------------------------------------------------- agreement


@dataclass(frozen=True)
class Correlation:
    r: float | None
    reason: str = ""


def pearson(x: Sequence[float], y: Sequence[float]) -> Correlation:
    """Pearson's r, or None with a reason when it is undefined."""
    if len(x) != len(y):
        raise ValueError("vectors differ in length")
    if len(x) < 2:
        return Correlation(None, "fewer than two pairs")
    if len(set(x)) == 1 or len(set(y)) == 1:
        return Correlation(None, "zero variance")
    try:
        r = statistics.correlation(x, y)
    except statistics.StatisticsError as exc:
        return Correlation(None, str(exc))
    return Correlation(max(-1.0, min(1.0, r)))


@dataclass(frozen=True)
class RatingRow:
    sample_id: str
    rater_id: str
    metric: str
    score: float


def read_ratings_csv(path: str | Path) -> list[RatingRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"sample_id", "rater_id", "metric", "score"} - set(reader.fieldnames or ())
        if missing:
            raise EvalError(f"{path}: missing columns {sorted(missing)}")
        return [RatingRow(r["sample_id"], r["rater_id"], r["metric"], float(r["score"])) for r in reader]


def write_ratings_csv(rows: Iterable[RatingRow], path: str | Path, append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists() or path.stat().st_size == 0
    with open(path, "a" if append else "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if new:
            w.writerow(["sample_id", "rater_id", "metric", "score"])
        for r in rows:
            w.writerow([r.sample_id, r.rater_id, r.metric, repr(r.score)])


def per_sample_means(rows: Iterable[RatingRow]) -> dict[str, dict[str, float]]:
    """metric -> sample -> mean over raters."""
    acc: dict[str, dict[str, list[float]]] = defaultdict(lambda: defaultdict(list))
    for r in rows:
        acc[r.metric][r.sample_id].append(r.score)
    return {m: {s: statistics.fmean(v) for s, v in samples.items()} for m, samples in acc.items()}


@dataclass(frozen=True)
class MetricAgreement:
    metric: str
    human_mean: float
    judge_mean: float
    delta: float
    pearson_r: float | None
    n: int
    normalized: bool
    reason: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "metric": self.metric,
            "human_mean": self.human_mean,
            "judge_mean": self.judge_mean,
            "delta": self.delta,
            "pearson_r": self.pearson_r,
            "n": self.n,
            "normalized": self.normalized,
            "reason": self.reason,
        }


@dataclass(frozen=True)
class AgreementReport:
    metrics: tuple[MetricAgreement, ...]

    def __getitem__(self, metric: str) -> MetricAgreement:
        for m in self.metrics:
            if m.metric == metric:
                return m
        raise KeyError(metric)

    def to_dict(self) -> dict[str, Any]:
        return {"metrics": [m.to_dict() for m in self.metrics]}

    def table(self) -> str:
        lines = [f"{'metric':<14}{'human':>8}{'judge':>8}{'delta':>8}{'r':>8}{'n':>5}"]
        for m in self.metrics:
            r = f"{m.pearson_r:.2f}" if m.pearson_r is not None else "n/a"
            lines.append(f"{m.metric:<14}{m.human_mean:>8.1f}{m.judge_mean:>8.1f}{m.delta:>+8.1f}{r:>8}{m.n:>5}")
        return "\n".join(lines)


def agreement(
    human: Mapping[str, Mapping[str, float]],
    judge: Mapping[str, Mapping[str, float]],
    checklist_metrics: Sequence[str] = CHECKLIST_METRICS,
) -> AgreementReport:
    """Compare per-sample human and judge scores, metric by metric.

    Both inputs map metric -> sample id -> score (human scores already
    averaged over raters). Checklist metrics are on [-1, 1] and are mapped
    to [0, 1] and reported as percentages; other metrics are taken as
    0-100 holistic scores. Only samples present on both sides are paired.
    """
    out = []
    for metric in sorted(set(human) & set(judge)):
        ids = sorted(set(human[metric]) & set(judge[metric]))
        if len(ids) < 2:
            raise EvalError(f"metric {metric}: need at least 2 paired samples, got {len(ids)}")
        norm = metric in checklist_metrics
        f = (lambda v: 100 * normalize_unit(v)) if norm else (lambda v: float(v))
        h = [f(human[metric][i]) for i in ids]
        j = [f(judge[metric][i]) for i in ids]
        hm, jm = statistics.fmean(h), statistics.fmean(j)
        corr = pearson(h, j)
        out.append(MetricAgreement(metric, hm, jm, jm - hm, corr.r, len(ids), norm, corr.reason))
    return AgreementReport(tuple(out))


# --------------------------------------------------------------------- results & run report


@dataclass(frozen=True)
class EvalResult:
    sample_id: str
    split: str
    scores: SampleScores
    flagged_turns: tuple[int, ...] = ()
    transcript: Conversation | None = None

    def to_dict(self) -> dict[str, Any]:
        d = {
            "sample_id": self.sample_id,
            "split": self.split,
            "items": [i.to_dict() for i in self.scores.pattern_items + self.scores.scenario_items],
            "pattern_item_ids": [i.item_id for i in self.scores.pattern_items],
            "ipe": self.scores.ipe,
            "mpd": self.scores.mpd,
            "flagged_turns": list(self.flagged_turns),
        }
        if self.transcript is not None:
            d["transcript"] = self.transcript.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "EvalResult":
        items = [JudgedItem.from_dict(i) for i in d["items"]]
        pat = set(d.get("pattern_item_ids", ()))
        scores = SampleScores(
            d["ipe"], d["mpd"], tuple(i for i in items if i.item_id in pat), tuple(i for i in items if i.item_id not in pat)
        )
        transcript = Conversation.from_dict(d["transcript"]) if d.get("transcript") else None
        return cls(d["sample_id"], d["split"], scores, tuple(d.get("flagged_turns", ())), transcript)


def evaluate_sample(
    task: EvalTask,
    scenario: Scenario,
    pattern_items: Sequence[ChecklistItem],
    scenario_items: Sequence[ChecklistItem],
    model: Gateway,
    judge: Gateway,
    split: str,
    gold: Conversation | None = None,
    simulator: Gateway | None = None,
    chunk_size: int = DEFAULT_CHUNK_SIZE,
    repeats: int = 1,
) -> EvalResult:
    transcript = generate_transcript(task, scenario, model, gold, simulator)
    conv = transcript.conversation
    judged_p = judge_checklist(conv, task.target_character, pattern_items, judge, chunk_size, repeats) if pattern_items else []
    judged_s = judge_checklist(conv, task.target_character, scenario_items, judge, chunk_size, repeats) if scenario_items else []
    return EvalResult(
        f"{scenario.id}::{task.target_character}", split, compute_scores(judged_p, judged_s), transcript.flagged_turns, conv
    )


@dataclass(frozen=True)
class SplitSummary:
    split: str
    n: int
    ipe: float | None
    mpd: float | None


@dataclass(frozen=True)
class RunReport:
    splits: tuple[SplitSummary, ...]
    headline_ipe: float | None
    headline_mpd: float | None
    weighted_ipe: float | None
    weighted_mpd: float | None
    total_items: int
    failed_items: int
    failed_item_ids: tuple[str, ...]
    flagged_transcripts: int

    @property
    def failed_item_rate(self) -> float:
        return self.failed_items / self.total_items if self.total_items else 0.0

    def to_dict(self) -> dict[str, Any]:
        return {
            "splits": [s.__dict__ for s in self.splits],
            "headline": {"ipe": self.headline_ipe, "mpd": self.headline_mpd},
            "sample_weighted": {"ipe": self.weighted_ipe, "mpd": self.weighted_mpd},
            "total_items": self.total_items,
            "failed_items": self.failed_items,
            "failed_item_rate": self.failed_item_rate,
            "failed_item_ids": list(self.failed_item_ids),
            "flagged_transcripts": self.flagged_transcripts,
        }

    def table(self) -> str:
        def fmt(v: float | None) -> str:
            return f"{v:8.1f}" if v is not None else "     n/a"

        lines = [f"{'split':<12}{'n':>6}{'IPE':>8}{'MPD':>8}"]
        lines += [f"{s.split:<12}{s.n:>6}{fmt(s.ipe)}{fmt(s.mpd)}" for s in self.splits]
        lines.append(f"{'headline':<12}{'':>6}{fmt(self.headline_ipe)}{fmt(self.headline_mpd)}")
        lines.append(f"{'weighted':<12}{'':>6}{fmt(self.weighted_ipe)}{fmt(self.weighted_mpd)}")
        lines.append(f"failed items: {self.failed_items}/{self.total_items} ({100 * self.failed_item_rate:.1f}%)")
        return "\n".join(lines)


def _pct_mean(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return 100 * math.fsum(vals) / len(vals) if vals else None


def _plain_mean(values: Sequence[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return math.fsum(vals) / len(vals) if vals else None


def aggregate_run(results: Sequence[EvalResult], splits: Sequence[str] | None = None) -> RunReport:
    """Per-split percentage means; headline is the unweighted mean of split means."""
    order = list(splits) if splits is not None else sorted({r.split for r in results})
    by_split: dict[str, list[EvalResult]] = {s: [] for s in order}
    for r in results:
        if r.split in by_split:
            by_split[r.split].append(r)
    summaries = tuple(
        SplitSummary(s, len(rs), _pct_mean([r.scores.ipe for r in rs]), _pct_mean([r.scores.mpd for r in rs]))
        for s, rs in by_split.items()
    )
    used = [r for rs in by_split.values() for r in rs]
    items = [i for r in used for i in r.scores.pattern_items + r.scores.scenario_items]
    # Pattern-level item ids repeat across samples, so qualify them.
    failed = [f"{r.sample_id}/{i.item_id}" for r in used for i in r.scores.pattern_items + r.scores.scenario_items
              if i.failed]
    return RunReport(
        splits=summaries,
        headline_ipe=_plain_mean([s.ipe for s in summaries]),
        headline_mpd=_plain_mean([s.mpd for s in summaries]),
        weighted_ipe=_pct_mean([r.scores.ipe for r in used]),
        weighted_mpd=_pct_mean([r.scores.mpd for r in used]),
        total_items=len(items),
        failed_items=len(failed),
        failed_item_ids=tuple(failed),
        flagged_transcripts=sum(bool(r.flagged_turns) for r in used),
    )


# --------------------------------------------------------------------- human annotation


def annotate(
    sample_id: str,
    transcript: Conversation,
    protagonist: str,
    pattern_items: Sequence[ChecklistItem],
    scenario_items: Sequence[ChecklistItem],
    rater_id: str,
    ask: Callable[[str], str] = input,
    show: Callable[[str], None] = print,
) -> list[RatingRow]:
    """Step a human rater through every item; returns per-metric rating rows.

    Accepted answers are -1, 0, 1 (or +1); anything else re-prompts.
    Entering "q" abandons the sample and returns no rows.
    """
    show(f"=== {sample_id}: judge the part of {protagonist} ===")
    show(serialize_conversation(transcript))
    scores: dict[str, list[int]] = {"ipe": [], "mpd": []}
    for metric, items in (("ipe", pattern_items), ("mpd", scenario_items)):
        for n, item in enumerate(items, 1):
            while True:
                answer = ask(f"[{metric} {n}/{len(items)}] {item.text} (-1/0/1, q to quit): ").strip()
                if answer.lower() == "q":
                    return []
                if answer in {"-1", "0", "1", "+1"}:
                    scores[metric].append(int(answer))
                    break
                show("please answer -1, 0 or 1")
    return [
        RatingRow(sample_id, rater_id, metric, math.fsum(v) / len(v)) for metric, v in scores.items() if v
    ]
