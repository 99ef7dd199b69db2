from __future__ import annotations

import json
import math
import random
import re

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from psyforge.checklists import ChecklistItem
from psyforge.dialogue import Conversation, parse_turn, validate_conversation
from psyforge.evaluation import (
    REPLAY,
    SELFPLAY,
    EvalError,
    EvalResult,
    EvalTask,
    JudgedItem,
    RatingRow,
    SampleScores,
    agreement,
    aggregate_run,
    annotate,
    compute_scores,
    evaluate_sample,
    generate_transcript,
    judge_checklist,
    majority,
    normalize_unit,
    pearson,
    per_sample_means,
    read_ratings_csv,
    write_ratings_csv,
)
from psyforge.gateway import Gateway, MockProvider, mock_gateway, mock_handle
from psyforge.scenarios import Diamonds, VariantSpec, normalize_combo, parse_scenario_response
from psyforge.synthetic import SyntheticBackend

GOLD = [
    ("Raksha", "(opens her folder) Let's start with the complaint numbers."),
    ("Eulises", "I read every page."),
    ("Nouman", "[Stay on the metrics.] The build was stable."),
    ("Raksha", "Stable is not the same as usable."),
    ("Nouman", "(taps the binder) Our benchmarks were excellent."),
    ("Nouman", "The issue was positioning."),
    ("Eulises", "[He always does this.] Then explain the returns."),
    ("Raksha", "(quietly) I sent a memo in March."),
    ("Eulises", "Did you read it?"),
    ("Nouman", "I skimmed it."),
    ("Raksha", "[Breathe.] It was four pages."),
    ("Nouman", "Marketing oversold it."),
    ("Eulises", "(sets down the report) Enough."),
    ("Nouman", "[This is unfair.] Fine, we missed something."),
    ("Raksha", "Thank you."),
    ("Nouman", "(closes the binder) Let's fix it."),
]


@pytest.fixture
def nouman(registry, fixture_text):
    spec = VariantSpec(normalize_combo(["ultimate-attribution-error", "unartistic", "nervous"]), Diamonds.ADVERSITY, 0)
    return parse_scenario_response(fixture_text("nouman_scenario.txt"), spec, registry)


@pytest.fixture
def gold(nouman) -> Conversation:
    return Conversation(nouman.id, tuple(parse_turn(f"{s}: {b}", nouman.character_names) for s, b in GOLD))


def items(n: int, prefix: str = "p") -> list[ChecklistItem]:
    return [ChecklistItem(f"{prefix}#{i:02d}", f"Does the subject do behavior number {i}?", "pattern", pattern_id=prefix)
            for i in range(1, n + 1)]


def judge_reply(texts: list[str], scores) -> str:
    if isinstance(scores, int):
        scores = [scores] * len(texts)
    return json.dumps({"results": [{"criterion": t, "score": s, "reason": "seen"} for t, s in zip(texts, scores)]})


def chunk_texts(user: str) -> list[str]:
    chunk = user.split("[Checklist Chunk]", 1)[-1]
    return [m.group(1) for m in re.finditer(r"^\s*\d+\.\s*(.+?)\s*$", chunk, re.M)]


# ------------------------------------------------------------------ transcripts


def history_length(user: str) -> int:
    block = user.split("The conversation so far:\n", 1)[1].split("\n\nWrite", 1)[0]
    return 0 if block.startswith("(The scene") else len(block.splitlines())


def test_replay_echo_reproduces_gold_with_one_call_per_target_turn(nouman, gold):
    mock = MockProvider(fallback=lambda r: gold.turns[history_length(r.user)].body())
    t = generate_transcript(EvalTask(nouman.id, "Nouman"), nouman, mock_gateway(mock), gold)
    assert t.conversation == gold
    target_turns = sum(1 for s, _ in GOLD if s == "Nouman")
    assert target_turns == 7
    assert t.model_calls == 7 == len(mock.calls)
    assert t.flagged_turns == ()


def test_replay_only_sees_prior_gold_context(nouman, gold):
    mock = MockProvider(fallback="(shrugs) Whatever you say.")
    t = generate_transcript(EvalTask(nouman.id, "Nouman"), nouman, mock_gateway(mock), gold)
    assert history_length(mock.calls[0].user) == 2
    assert "You are Nouman." in mock.calls[0].system
    for i, turn in enumerate(t.conversation.turns):
        if turn.speaker != "Nouman":
            assert turn == gold.turns[i]
    assert t.conversation.turns[2].body() == "(shrugs) Whatever you say."


def test_unparseable_turn_is_retried_then_flagged(nouman, gold):
    mock = MockProvider(by_tag={("roleplay", 0): "(unclosed", ("roleplay", 1): "[also unclosed"},
                        fallback="Fine.")
    t = generate_transcript(EvalTask(nouman.id, "Nouman"), nouman, mock_gateway(mock), gold)
    assert t.flagged_turns == (2,)
    assert t.conversation.turns[2].segments[0].text == "[also unclosed"
    assert t.model_calls == 8


def test_selfplay_with_scripted_simulator_is_validator_clean(nouman):
    model = mock_gateway(MockProvider(fallback="[Keep it factual.] (straightens up) The numbers speak for themselves."))
    sim = mock_gateway(MockProvider(fallback="(leans in) Then explain the complaints."))
    t = generate_transcript(EvalTask(nouman.id, "Nouman", SELFPLAY), nouman, model, simulator=sim)
    assert validate_conversation(t.conversation, nouman).ok
    assert t.conversation.turns[-1].speaker == "Nouman"


def test_task_preconditions(nouman, gold):
    with pytest.raises(EvalError):
        EvalTask(nouman.id, "Eulises").check(nouman, gold)
    with pytest.raises(EvalError):
        EvalTask(nouman.id, "Nouman", REPLAY).check(nouman, None)
    with pytest.raises(EvalError):
        EvalTask(nouman.id, "Nouman", "improv").check(nouman, gold)
    with pytest.raises(EvalError):
        generate_transcript(EvalTask(nouman.id, "Nouman", SELFPLAY), nouman, mock_gateway(MockProvider(fallback="x")))


# ------------------------------------------------------------------ judging


def test_all_plus_one():
    its = items(15)
    mock = MockProvider(fallback=lambda r: judge_reply(chunk_texts(r.user), 1))
    judged = judge_checklist("Maya: hi", "Maya", its, mock_gateway(mock))
    assert [j.score for j in judged] == [1] * 15
    assert [j.item_id for j in judged] == [i.id for i in its]
    assert len(mock.calls) == 1
    assert mock.calls[0].temperature == 0.0


def test_invalid_score_retried_then_flagged_zero():
    its = items(3)

    def reply(r):
        texts = chunk_texts(r.user)
        return judge_reply(texts, [2 if "number 2" in t else 1 for t in texts])

    mock = MockProvider(fallback=reply)
    judged = judge_checklist("Maya: hi", "Maya", its, mock_gateway(mock))
    assert [j.score for j in judged] == [1, 0, 1]
    assert [j.failed for j in judged] == [False, True, False]
    # One full call plus three single-item retries.
    assert len(mock.calls) == 4
    assert all(chunk_texts(c.user) == [its[1].text] for c in mock.calls[1:])


def test_invalid_score_recovers_on_retry():
    its = items(2)
    mock = MockProvider(by_tag={("judge", 0): judge_reply([i.text for i in its], [1, 2])},
                        fallback=lambda r: judge_reply(chunk_texts(r.user), -1))
    judged = judge_checklist("Maya: hi", "Maya", its, mock_gateway(mock))
    assert [(j.score, j.failed) for j in judged] == [(1, False), (-1, False)]


def test_non_json_and_count_mismatch_retry_whole_chunk():
    its = items(4)
    texts = [i.text for i in its]
    mock = MockProvider(by_tag={
        ("judge", 0): "I think they did fine.",
        ("judge", 1): judge_reply(texts[:3], 1),
        ("judge", 2): judge_reply(texts, 0),
    })
    judged = judge_checklist("Maya: hi", "Maya", its, mock_gateway(mock))
    assert [j.score for j in judged] == [0, 0, 0, 0]
    assert len(mock.calls) == 3
    assert all(len(chunk_texts(c.user)) == 4 for c in mock.calls)
    # Retries vary the seed so a response cache cannot replay the bad answer.
    assert len({c.seed for c in mock.calls}) == 3


def test_persistent_garbage_flags_every_item():
    judged = judge_checklist("Maya: hi", "Maya", items(2), mock_gateway(MockProvider(fallback="nope")))
    assert all(j.failed and j.score == 0 for j in judged)


def test_repeats_take_majority():
    its = items(1)
    mock = MockProvider(by_tag={
        ("judge", 0): judge_reply([its[0].text], 1),
        ("judge", 1): judge_reply([its[0].text], 1),
        ("judge", 2): judge_reply([its[0].text], -1),
    })
    [j] = judge_checklist("Maya: hi", "Maya", its, mock_gateway(mock), repeats=3)
    assert j.score == 1 and j.repeat_scores == (1, 1, -1)


@pytest.mark.parametrize("scores, expected", [([1, 1, -1], 1), ([1, -1], 0), ([1, 0, -1], 0), ([-1], -1), ([0, 0, 1], 0)])
def test_majority(scores, expected):
    assert majority(scores) == expected


def test_judged_item_invariants():
    with pytest.raises(ValueError):
        JudgedItem("x", 2, "why")
    with pytest.raises(ValueError):
        JudgedItem("x", 1, " ")


def test_scores_invariant_under_chunking_and_order():
    its = items(30)
    gw = Gateway(mock_handle(), SyntheticBackend(), sleep=lambda s: None)
    by_size = {}
    for size in (1, 5, 15, 100):
        judged = judge_checklist("Maya: hi there", "Maya", its, gw, chunk_size=size)
        by_size[size] = compute_scores(judged, judged[:7])
    base = by_size[1]
    assert all((s.ipe, s.mpd) == (base.ipe, base.mpd) for s in by_size.values())
    shuffled = list(its)
    random.Random(0).shuffle(shuffled)
    judged = judge_checklist("Maya: hi there", "Maya", shuffled, gw, chunk_size=4)
    assert compute_scores(judged, []).ipe == base.ipe


# ------------------------------------------------------------------ scores


def judged(scores: list[int]) -> list[JudgedItem]:
    return [JudgedItem(f"i{k}", s, "r") for k, s in enumerate(scores)]


def test_compute_scores_basic():
    assert compute_scores(judged([1] * 15), []).ipe == 1.0
    assert compute_scores(judged([1] * 5 + [0] * 5 + [-1] * 5), []).ipe == 0.0
    assert compute_scores([], []).mpd is None


def test_compute_scores_against_naive_loop():
    rng = random.Random(11)
    xs = [rng.choice([-1, 0, 1]) for _ in range(30)]
    ys = [rng.choice([-1, 0, 1]) for _ in range(30)]
    total = 0
    for v in xs:
        total += v
    s = compute_scores(judged(xs), judged(ys))
    assert s.ipe == total / 30
    assert s.mpd == sum(ys) / 30


def test_normalize_unit_lattice():
    assert [normalize_unit(v) for v in (-1, 0, 1)] == [0.0, 0.5, 1.0]


@given(st.floats(-1, 1), st.floats(-1, 1))
def test_normalize_unit_is_order_preserving(a, b):
    if a < b:
        assert normalize_unit(a) <= normalize_unit(b)
    assert 0 <= normalize_unit(a) <= 1


# ------------------------------------------------------------------ agreement


def naive_pearson(x, y):
    n = len(x)
    mx = sum(x) / n
    my = sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def test_pearson_matches_two_pass_oracle():
    rng = random.Random(3)
    x = [rng.uniform(-1, 1) for _ in range(20)]
    y = [0.6 * a + rng.gauss(0, 0.3) for a in x]
    assert abs(pearson(x, y).r - naive_pearson(x, y)) <= 1e-12


def test_pearson_undefined_cases():
    assert pearson([1, 1, 1], [1, 2, 3]).r is None
    assert pearson([1, 1, 1], [1, 2, 3]).reason == "zero variance"
    assert pearson([1], [2]).r is None


@settings(max_examples=100)
@given(
    st.lists(st.tuples(st.floats(-1, 1), st.floats(-1, 1)), min_size=3, max_size=30),
    st.floats(0.1, 100),
    st.floats(-50, 50),
)
def test_pearson_affine_invariance(pairs, a, b):
    x = [p[0] for p in pairs]
    y = [p[1] for p in pairs]
    r = pearson(x, y).r
    if r is None or min(max(x) - min(x), max(y) - min(y)) < 1e-3:
        return
    r2 = pearson([a * v + b for v in x], y).r
    assert r2 is not None and abs(r - r2) <= 1e-9


def test_identical_vectors():
    h = {"ipe": {f"s{i}": v for i, v in enumerate([-1, -0.5, 0, 0.5, 1])}}
    rep = agreement(h, h)
    assert rep["ipe"].pearson_r == pytest.approx(1.0, abs=1e-12)
    assert rep["ipe"].delta == 0


def test_published_delta():
    # Per-sample raw scores whose normalized means are 39.0 (human) and 38.6 (judge).
    n = 20
    human_raw = 2 * 0.390 - 1
    judge_raw = 2 * 0.386 - 1
    offsets = [0.01 * (i - (n - 1) / 2) for i in range(n)]
    human = {"ipe": {f"s{i}": human_raw + o for i, o in enumerate(offsets)}}
    judge = {"ipe": {f"s{i}": judge_raw + 1.1 * o for i, o in enumerate(offsets)}}
    m = agreement(human, judge)["ipe"]
    assert m.human_mean == pytest.approx(39.0, abs=1e-9)
    assert m.judge_mean == pytest.approx(38.6, abs=1e-9)
    assert m.delta == pytest.approx(-0.4, abs=1e-9)
    assert m.normalized and m.n == 20


def test_holistic_metrics_are_not_rescaled():
    h = {"fidelity": {"a": 60, "b": 70}}
    j = {"fidelity": {"a": 65, "b": 80}}
    m = agreement(h, j)["fidelity"]
    assert (m.human_mean, m.judge_mean, m.delta, m.normalized) == (65, 72.5, 7.5, False)


def test_agreement_needs_two_pairs():
    with pytest.raises(EvalError):
        agreement({"ipe": {"a": 0.1}}, {"ipe": {"a": 0.2}})


def test_ratings_csv_and_rater_means(tmp_path):
    rows = [RatingRow("s1", r, "ipe", v) for r, v in (("a", 0.5), ("b", 0.0), ("c", -0.5))]
    path = tmp_path / "r.csv"
    write_ratings_csv(rows[:1], path)
    write_ratings_csv(rows[1:], path, append=True)
    back = read_ratings_csv(path)
    assert back == rows
    assert per_sample_means(back) == {"ipe": {"s1": 0.0}}


def test_ratings_csv_missing_columns(tmp_path):
    (tmp_path / "bad.csv").write_text("sample,score\n")
    with pytest.raises(EvalError):
        read_ratings_csv(tmp_path / "bad.csv")


# ------------------------------------------------------------------ run report


def result(split: str, ipe: float, mpd: float | None = None, failed: bool = False) -> EvalResult:
    p = (JudgedItem(f"{split}-{ipe}", 0, "r", failed=failed),) if failed else ()
    return EvalResult(f"{split}-{ipe}", split, SampleScores(ipe, mpd, p, ()))


def test_headline_is_unweighted_mean_of_split_means():
    res = [result("id_eval", 0.10), result("ood_eval", 0.20), result("ood_eval", 0.20), result("mixed_eval", 0.30)]
    rep = aggregate_run(res, ["id_eval", "ood_eval", "mixed_eval"])
    assert [s.ipe for s in rep.splits] == pytest.approx([10, 20, 30])
    assert rep.headline_ipe == pytest.approx(20)
    assert rep.weighted_ipe == pytest.approx(20)
    assert rep.headline_mpd is None


def test_single_split_headline_and_weighting_difference():
    rep = aggregate_run([result("id_eval", 0.5), result("id_eval", 0.1)])
    assert rep.headline_ipe == pytest.approx(30)
    rep = aggregate_run([result("a", 0.0), result("b", 0.6), result("b", 0.6), result("b", 0.6)], ["a", "b"])
    assert rep.headline_ipe == pytest.approx(30)
    assert rep.weighted_ipe == pytest.approx(45)


def test_failed_items_are_counted():
    rep = aggregate_run([result("id_eval", 0.0, failed=True), result("id_eval", 0.5)])
    assert rep.failed_items == 1 and rep.total_items == 1
    assert "failed items: 1/1" in rep.table()


def test_evaluate_sample_end_to_end_and_round_trip(nouman, gold):
    model = mock_gateway(MockProvider(fallback="(nods) Understood."))
    judge = Gateway(mock_handle(), SyntheticBackend(), sleep=lambda s: None)
    s_items = [ChecklistItem(f"{nouman.id}#Nouman#{i:02d}", t, "scenario", scenario_id=nouman.id, character="Nouman")
               for i, t in enumerate(nouman.tendencies["Nouman"], 1)]
    res = evaluate_sample(EvalTask(nouman.id, "Nouman"), nouman, items(15), s_items, model, judge, "id_eval", gold)
    assert len(res.scores.pattern_items) == 15 and len(res.scores.scenario_items) == 6
    d = json.loads(json.dumps(res.to_dict()))
    assert {"sample_id", "split", "items", "ipe", "mpd"} <= set(d)
    assert EvalResult.from_dict(d) == res


# ------------------------------------------------------------------ annotation


def test_annotate_flow(gold):
    answers = iter(["1", "maybe", "-1", "0"])
    shown: list[str] = []
    rows = annotate("s::Nouman", gold, "Nouman", items(2), items(1, "s"), "r1", ask=lambda _: next(answers), show=shown.append)
    assert rows == [RatingRow("s::Nouman", "r1", "ipe", 0.0), RatingRow("s::Nouman", "r1", "mpd", 0.0)]
    assert any("please answer" in s for s in shown)


def test_annotate_quit_writes_nothing(gold):
    assert annotate("s", gold, "Nouman", items(2), [], "r", ask=lambda _: "q", show=lambda _: None) == []
