"""Stage orchestration over a working directory of JSONL stores.

Every stage reads its inputs from the working directory, skips items whose
ids are already in its output (or quarantine) store, appends the rest, and
records a manifest. Running a stage twice therefore produces nothing new
the second time.
"""

from __future__ import annotations

import json
import logging
import threading
from collections.abc import Callable, Iterable, Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from . import checklists as ck
from . import dataset as ds
from . import evaluation as ev
from ._util import derive_seed
from .config import ConfigError, PipelineConfig
from .dialogue import Conversation, validate_conversation
from .gateway import HTTP_PROVIDERS, Gateway, HttpBackend, ResponseCache, TokenBucket
from .names import default_pool
from .patterns import (
    CompatibilityValidator,
    Registry,
    load_corpus_dir,
    load_registry,
    serialize_registry,
    synthesize_pattern,
    taxonomy_registry,
)
from .scenarios import (
    NamePool,
    Scenario,
    SynthesisRejected,
    generate_conversation,
    generate_scenario,
    normalize_combo,
    plan_variants,
    sample_names,
    scenario_id,
)
from .store import (
    RunManifest,
    append_manifest,
    file_digest,
    store_append,
    store_ids,
    store_scan,
    write_json,
)
from .synthetic import SyntheticBackend

logger = logging.getLogger(__name__)

EVAL_SPLITS = (ds.Split.ID_EVAL.value, ds.Split.OOD_EVAL.value, ds.Split.MIXED_EVAL.value)


class StageError(ValueError):
    pass


# --------------------------------------------------------------------- layout


@dataclass(frozen=True)
class Layout:
    root: Path

    def __getattr__(self, name: str) -> Path:
        files = {
            "patterns": "patterns",
            "combos": "combos.jsonl",
            "scenarios": "scenarios.jsonl",
            "conversations": "conversations.jsonl",
            "quarantine": "quarantine.jsonl",
            "pattern_checklists": "checklists_pattern.jsonl",
            "scenario_checklists": "checklists_scenario.jsonl",
            "ood": "ood.json",
            "splits": "splits.csv",
            "sft": "sft_train.jsonl",
            "mixture": "mixture.jsonl",
            "mixture_manifest": "mixture_manifest.json",
            "stats": "stats.json",
            "histograms": "stats_histograms.csv",
            "eval_results": "eval_results.jsonl",
            "eval_report": "eval_report.json",
            "agreement": "agreement.json",
            "manifests": "manifests.jsonl",
            "cache": "cache",
        }
        if name not in files:
            raise AttributeError(name)
        return self.root / files[name]


def layout(cfg: PipelineConfig) -> Layout:
    return Layout(cfg.workdir())


# --------------------------------------------------------------------- gateways


class _VirtualClock:
    def __init__(self) -> None:
        self._t = 0.0
        self._lock = threading.Lock()

    def now(self) -> float:
        with self._lock:
            return self._t

    def advance(self, seconds: float) -> None:
        with self._lock:
            self._t += max(0.0, seconds)


def make_gateway(cfg: PipelineConfig, role: str) -> Gateway:
    pc = cfg.provider(role)
    if pc.provider not in ("mock", "synthetic") and pc.provider not in HTTP_PROVIDERS:
        raise ConfigError(f"unknown provider {pc.provider!r} for role {role}")
    cache_dir = cfg.paths.resolve("cache") or layout(cfg).cache
    cache = ResponseCache(cache_dir)
    if pc.provider in ("mock", "synthetic"):
        # The offline backend answers instantly, so the bucket runs on virtual
        # time: waits are accounted for but never spent.
        clock = _VirtualClock()
        handle = pc.handle()
        limiter = TokenBucket(handle.rate_limit, clock=clock.now, sleep=clock.advance)
        return Gateway(handle, SyntheticBackend(), cache=cache, limiter=limiter, sleep=clock.advance)
    return Gateway(pc.handle(), HttpBackend(), cache=cache)


# --------------------------------------------------------------------- loaders


def load_workdir_registry(cfg: PipelineConfig) -> Registry:
    path = cfg.paths.resolve("patterns") or layout(cfg).patterns
    if not path.exists():
        raise StageError(f"no pattern registry at {path}; run `forge patterns init` first")
    return load_registry(path)


def load_scenarios(cfg: PipelineConfig) -> list[Scenario]:
    return [Scenario.from_dict(d) for d in store_scan(layout(cfg).scenarios)]


def load_conversations(cfg: PipelineConfig) -> dict[str, Conversation]:
    return {d["id"]: Conversation.from_dict(d) for d in store_scan(layout(cfg).conversations)}


def load_name_pool(cfg: PipelineConfig) -> NamePool:
    male, female = cfg.paths.resolve("names_male"), cfg.paths.resolve("names_female")
    if male and female:
        return NamePool.from_files(male, female)
    return default_pool()


def read_combos(path: str | Path) -> list[tuple[str, ...]]:
    """Combinations from JSONL (``{"combo": [...]}``) or lines of comma-separated ids."""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"combos file not found: {path}")
    combos = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        ids = json.loads(line)["combo"] if line.startswith("{") else [x.strip() for x in line.split(",")]
        combos.append(normalize_combo(ids))
    return list(dict.fromkeys(combos))


def _quarantined(cfg: PipelineConfig, stage: str) -> set[str]:
    return {r["item_id"] for r in store_scan(layout(cfg).quarantine) if r.get("stage") == stage}


def _ordered_map(fn: Callable[[Any], Any], items: Sequence[Any], parallelism: int) -> Iterable[Any]:
    if parallelism <= 1 or len(items) <= 1:
        return map(fn, items)
    pool = ThreadPoolExecutor(max_workers=parallelism)

    def gen() -> Iterable[Any]:
        with pool:
            yield from pool.map(fn, items)

    return gen()


# --------------------------------------------------------------------- stages


@dataclass
class StageContext:
    cfg: PipelineConfig
    manifest: RunManifest
    dry_run: bool = False
    # Stages read their CLI options here and may leave results (reports,
    # lint findings) in the same dict for the caller.
    opts: dict[str, Any] = field(default_factory=dict)

    @property
    def lay(self) -> Layout:
        return layout(self.cfg)


def stage_patterns_init(ctx: StageContext) -> None:
    """Write the taxonomy skeleton (names and kinds, empty sections)."""
    path = ctx.lay.patterns
    existing = load_registry(path) if path.exists() else Registry()
    reg = taxonomy_registry()
    only = ctx.opts.get("only")
    if only:
        reg = Registry(p for p in reg if p.id in set(only))
    missing = Registry(p for p in reg if p.id not in existing)
    ctx.manifest.skipped = len(reg) - len(missing)
    if not ctx.dry_run:
        serialize_registry(missing, path)
    ctx.manifest.outputs["patterns"] = len(missing)


def stage_patterns_synth(ctx: StageContext) -> None:
    """Fill empty pattern sections from per-pattern corpus folders (``<corpus>/<id>/``)."""
    ctx.cfg.require_paths("corpus")
    reg = load_workdir_registry(ctx.cfg)
    corpus_root = ctx.cfg.paths.resolve("corpus")
    assert corpus_root is not None
    todo = [p for p in reg if not p.is_complete and (corpus_root / p.id).is_dir()]
    ctx.manifest.skipped = len(reg) - len(todo)
    ctx.manifest.outputs["patterns"] = len(todo)
    if ctx.dry_run or not todo:
        return
    gw = make_gateway(ctx.cfg, "synthesis")

    def synth(p):  # noqa: ANN001
        return synthesize_pattern(p.name, p.kind, load_corpus_dir(corpus_root / p.id), gw, p.id)

    done = list(_ordered_map(synth, todo, ctx.cfg.parallelism))
    out = ctx.cfg.paths.resolve("patterns") or ctx.lay.patterns
    serialize_registry(Registry(done), out)


def stage_synth_scenarios(ctx: StageContext) -> None:
    combos_path = ctx.opts.get("combos")
    if not combos_path:
        raise ConfigError("synth scenarios needs --combos")
    combos = read_combos(combos_path)
    reg = load_workdir_registry(ctx.cfg)
    unknown = sorted({p for c in combos for p in c if p not in reg})
    if unknown:
        raise StageError(f"combos reference unknown patterns: {unknown}")
    pool = load_name_pool(ctx.cfg)
    seed = ctx.cfg.seed
    lay = ctx.lay
    ctx.manifest.inputs.update({"combos": file_digest(combos_path), "patterns": _registry_digest(reg)})

    # Compatibility verdicts are cached in their own store.
    verdicts = {tuple(r["combo"]): r for r in store_scan(lay.combos)}
    pending_combos = [c for c in combos if c not in verdicts]
    if ctx.dry_run:
        ctx.manifest.outputs["compatibility_checks"] = len(pending_combos)
        ctx.manifest.outputs["scenarios"] = 3 * len(combos)
        return
    if pending_combos:
        validator = CompatibilityValidator(reg, make_gateway(ctx.cfg, "validation"))
        new = []
        for c in pending_combos:
            v = validator(c)
            new.append({"id": "+".join(c), "combo": list(c), "compatible": v.compatible, "reason": v.reason})
        store_append(lay.combos, new)
        verdicts.update({tuple(r["combo"]): r for r in new})

    done = store_ids(lay.scenarios) | _quarantined(ctx.cfg, "scenario")
    specs = []
    for c in combos:
        if not verdicts[c]["compatible"]:
            continue
        for spec in plan_variants(c, seed):
            name_seed = derive_seed("names", seed, list(c), spec.index)
            if scenario_id(spec.combo, spec.variant, name_seed) in done:
                ctx.manifest.skipped += 1
                continue
            specs.append((spec, name_seed))
    gw = make_gateway(ctx.cfg, "synthesis")

    def run(item):  # noqa: ANN001
        spec, name_seed = item
        try:
            return generate_scenario(spec, sample_names(pool, name_seed), reg, gw, name_seed)
        except SynthesisRejected as exc:
            return exc

    written = rejected = 0
    for result in _ordered_map(run, specs, ctx.cfg.parallelism):
        if isinstance(result, SynthesisRejected):
            store_append(lay.quarantine, [result.quarantine_record()])
            rejected += 1
        else:
            store_append(lay.scenarios, [result.to_dict()])
            written += 1
    ctx.manifest.outputs["scenarios"] = written
    ctx.manifest.quarantined = rejected


def _registry_digest(reg: Registry) -> str:
    from ._util import stable_hash

    return stable_hash([p.to_dict() for p in reg])


def stage_synth_conversations(ctx: StageContext) -> None:
    lay = ctx.lay
    reg = load_workdir_registry(ctx.cfg)
    scenarios = load_scenarios(ctx.cfg)
    done = store_ids(lay.conversations) | _quarantined(ctx.cfg, "conversation")
    todo = [s for s in scenarios if s.id not in done]
    ctx.manifest.inputs["scenarios"] = file_digest(lay.scenarios)
    ctx.manifest.skipped = len(scenarios) - len(todo)
    if ctx.dry_run:
        ctx.manifest.outputs["conversations"] = len(todo)
        return
    gw = make_gateway(ctx.cfg, "synthesis")

    def run(sc: Scenario):
        try:
            return sc, generate_conversation(sc, reg, gw)
        except SynthesisRejected as exc:
            return sc, exc

    written = rejected = 0
    for sc, result in _ordered_map(run, todo, ctx.cfg.parallelism):
        if isinstance(result, SynthesisRejected):
            store_append(lay.quarantine, [result.quarantine_record()])
            rejected += 1
        else:
            store_append(lay.conversations, [{"id": sc.id, **result.to_dict()}])
            written += 1
    ctx.manifest.outputs["conversations"] = written
    ctx.manifest.quarantined = rejected


def _sample_dialogues(scenarios: Sequence[Scenario], convs: dict[str, Conversation], pattern_id: str) -> list[ck.SampleDialogue]:
    out = []
    for sc in scenarios:
        if pattern_id not in sc.combo or sc.id not in convs:
            continue
        bearer = next(c.name for c in sc.characters if pattern_id in c.assigned_patterns)
        out.append(ck.SampleDialogue(convs[sc.id], bearer))
        if len(out) == ck.VALIDATION_SAMPLES:
            break
    return out


def stage_checklists_build(ctx: StageContext) -> None:
    lay = ctx.lay
    reg = load_workdir_registry(ctx.cfg)
    only = ctx.opts.get("patterns")
    targets = [p for p in reg if not only or p.id in set(only)]
    done = {r["pattern_id"] for r in store_scan(lay.pattern_checklists)}
    todo = [p for p in targets if p.id not in done]
    ctx.manifest.skipped = len(targets) - len(todo)
    if ctx.dry_run:
        ctx.manifest.outputs["pattern_checklists"] = len(todo)
        return
    scenarios = sorted(load_scenarios(ctx.cfg), key=lambda s: s.id)
    convs = load_conversations(ctx.cfg)
    names = sorted({n for s in scenarios for n in s.character_names})
    gw = make_gateway(ctx.cfg, "validation")

    def run(p):  # noqa: ANN001
        return ck.build_pattern_checklist(p, _sample_dialogues(scenarios, convs, p.id), gw, names)

    n = 0
    for checklist in _ordered_map(run, todo, ctx.cfg.parallelism):
        store_append(lay.pattern_checklists, [{"id": checklist.pattern_id, **checklist.to_dict()}])
        n += 1
    ctx.manifest.outputs["pattern_checklists"] = n


def stage_checklists_extract(ctx: StageContext) -> None:
    lay = ctx.lay
    scenarios = load_scenarios(ctx.cfg)
    done = {r["scenario_id"] for r in store_scan(lay.scenario_checklists)}
    items = []
    for sc in sorted(scenarios, key=lambda s: s.id):
        if sc.id in done:
            ctx.manifest.skipped += 1
            continue
        items.extend(i.to_dict() for i in ck.extract_scenario_checklist(sc))
    if not ctx.dry_run:
        store_append(lay.scenario_checklists, items)
    ctx.manifest.outputs["scenario_items"] = len(items)


def stage_split(ctx: StageContext) -> None:
    lay = ctx.lay
    reg = load_workdir_registry(ctx.cfg)
    scenarios = load_scenarios(ctx.cfg)
    ood_path = ctx.opts.get("ood")
    if ood_path:
        ood = ds.OODSet.from_dict(json.loads(Path(ood_path).read_text(encoding="utf-8")))
    else:
        ood = ds.select_ood_patterns(reg, ds.pattern_frequency(scenarios))
    assignments = ds.split_scenarios(scenarios, ood, ctx.cfg.id_eval_size, ctx.cfg.seed)
    sizes = ds.split_sizes(assignments)
    ctx.manifest.outputs.update({s.value: n for s, n in sizes.items()})
    if not ctx.dry_run:
        write_json(lay.ood, ood.to_dict())
        ds.write_split_csv(assignments, lay.splits)


def _split_of(cfg: PipelineConfig) -> dict[str, str]:
    path = layout(cfg).splits
    if not path.exists():
        raise StageError("no split manifest; run `forge split` first")
    return {a.scenario_id: a.split.value for a in ds.read_split_csv(path)}


def stage_export_sft(ctx: StageContext) -> None:
    split = ctx.opts.get("split") or ds.Split.TRAIN.value
    splits = _split_of(ctx.cfg)
    scenarios = [s for s in load_scenarios(ctx.cfg) if splits.get(s.id) == split]
    samples = ds.export_sft(scenarios, load_conversations(ctx.cfg), skip_missing=True)
    ctx.manifest.outputs["sft_samples"] = len(samples)
    if not ctx.dry_run:
        out = ctx.opts.get("out") or ctx.lay.sft
        ds.write_sft_jsonl(samples, out)


def stage_mixture(ctx: StageContext) -> None:
    lay = ctx.lay
    pools = {"humanllm": ds.read_sft_jsonl(lay.sft) if lay.sft.exists() else []}
    for src, key in (("general", "general_pool"), ("roleplay", "roleplay_pool")):
        p = ctx.cfg.paths.resolve(key)
        pools[src] = ds.load_external_pool(p, src) if p else []
    spec = ds.MixtureSpec(tuple(ctx.cfg.ratio))  # type: ignore[arg-type]
    manifest, chosen = ds.build_mixture(pools, spec, ctx.cfg.seed)
    ctx.manifest.outputs.update(dict(zip(ds.SOURCES, manifest.counts)))
    if not ctx.dry_run:
        write_json(lay.mixture_manifest, manifest.to_dict())
        ds.write_sft_jsonl(chosen, lay.mixture)


def stage_stats(ctx: StageContext) -> None:
    report = ds.corpus_stats(load_scenarios(ctx.cfg), load_conversations(ctx.cfg).values())
    ctx.manifest.outputs["scenarios"] = report.scenarios
    if not ctx.dry_run:
        write_json(ctx.lay.stats, report.to_dict())
        report.write_histograms_csv(ctx.lay.histograms)
    ctx.opts["report"] = report


def _eval_plan(cfg: PipelineConfig, splits: Sequence[str]):  # noqa: ANN202
    lay = layout(cfg)
    split_of = _split_of(cfg)
    scenarios = {s.id: s for s in load_scenarios(cfg)}
    convs = load_conversations(cfg)
    pattern_items: dict[str, list[ck.ChecklistItem]] = {}
    for r in store_scan(lay.pattern_checklists):
        pattern_items[r["pattern_id"]] = list(ck.PatternChecklist.from_dict(r).items)
    scenario_items = [ck.ChecklistItem.from_dict(r) for r in store_scan(lay.scenario_checklists)]
    plan = []
    for sid in sorted(scenarios):
        if split_of.get(sid) not in splits or sid not in convs:
            continue
        sc = scenarios[sid]
        for c in sc.bearers:
            missing = [p for p in c.assigned_patterns if p not in pattern_items]
            if missing:
                raise StageError(f"no pattern checklist for {missing}; run `forge checklists build`")
            p_items = [i for p in c.assigned_patterns for i in pattern_items[p]]
            s_items = ck.items_for_character(scenario_items, sid, c.name)
            plan.append((sc, c.name, split_of[sid], p_items, s_items, convs[sid]))
    return plan


def stage_eval_run(ctx: StageContext) -> None:
    cfg = ctx.cfg
    lay = ctx.lay
    splits = ctx.opts.get("splits") or EVAL_SPLITS
    mode = ctx.opts.get("mode") or cfg.eval_mode
    plan = _eval_plan(cfg, splits)
    done = {r["sample_id"] for r in store_scan(lay.eval_results)}
    todo = [p for p in plan if f"{p[0].id}::{p[1]}" not in done]
    ctx.manifest.skipped = len(plan) - len(todo)
    if ctx.dry_run:
        ctx.manifest.outputs["eval_samples"] = len(todo)
        return
    model, judge = make_gateway(cfg, "model"), make_gateway(cfg, "judge")
    simulator = make_gateway(cfg, "simulator") if mode == ev.SELFPLAY else None

    def run(item):  # noqa: ANN001
        sc, target, split, p_items, s_items, gold = item
        task = ev.EvalTask(sc.id, target, mode, cfg.provider("model").handle())
        return ev.evaluate_sample(
            task, sc, p_items, s_items, model, judge, split, gold, simulator, cfg.chunk_size, cfg.repeats
        )

    n = 0
    for result in _ordered_map(run, todo, cfg.parallelism):
        store_append(lay.eval_results, [{"id": result.sample_id, **result.to_dict()}])
        n += 1
    ctx.manifest.outputs["eval_samples"] = n
    results = [ev.EvalResult.from_dict(r) for r in store_scan(lay.eval_results)]
    report = ev.aggregate_run(results, [s for s in splits if any(r.split == s for r in results)])
    write_json(lay.eval_report, report.to_dict())
    ctx.opts["report"] = report


def judge_scores_from_results(path: str | Path) -> dict[str, dict[str, float]]:
    out: dict[str, dict[str, float]] = {"ipe": {}, "mpd": {}}
    for r in store_scan(path):
        for metric in ("ipe", "mpd"):
            if r.get(metric) is not None:
                out[metric][r["sample_id"]] = r[metric]
    return out


def stage_eval_agreement(ctx: StageContext) -> None:
    human_csv = ctx.opts.get("human_csv")
    if not human_csv or not Path(human_csv).exists():
        raise ConfigError(f"human ratings CSV not found: {human_csv}")
    human = ev.per_sample_means(ev.read_ratings_csv(human_csv))
    judge_csv = ctx.opts.get("judge_csv")
    judge = ev.per_sample_means(ev.read_ratings_csv(judge_csv)) if judge_csv else judge_scores_from_results(ctx.lay.eval_results)
    report = ev.agreement(human, judge)
    ctx.manifest.outputs["metrics"] = len(report.metrics)
    if not ctx.dry_run:
        write_json(ctx.lay.agreement, report.to_dict())
    ctx.opts["report"] = report


def stage_lint(ctx: StageContext) -> None:
    scenarios = {s.id: s for s in load_scenarios(ctx.cfg)}
    problems: dict[str, list[str]] = {}
    for sid, conv in load_conversations(ctx.cfg).items():
        sc = scenarios.get(sid)
        if sc is None:
            problems[sid] = ["no_scenario"]
            continue
        report = validate_conversation(conv, sc)
        if not report.ok:
            problems[sid] = list(report.violations)
    ctx.manifest.outputs["violating_conversations"] = len(problems)
    ctx.opts["problems"] = problems


STAGES: dict[str, Callable[[StageContext], None]] = {
    "patterns.init": stage_patterns_init,
    "patterns.synth": stage_patterns_synth,
    "synth.scenarios": stage_synth_scenarios,
    "synth.conversations": stage_synth_conversations,
    "checklists.build": stage_checklists_build,
    "checklists.extract": stage_checklists_extract,
    "split": stage_split,
    "export.sft": stage_export_sft,
    "mixture": stage_mixture,
    "stats": stage_stats,
    "eval.run": stage_eval_run,
    "eval.agreement": stage_eval_agreement,
    "lint": stage_lint,
}


def run_stage(
    stage: str,
    cfg: PipelineConfig,
    dry_run: bool = False,
    options: dict[str, Any] | None = None,
) -> RunManifest:
    """Run one stage and append its manifest (unless ``dry_run``)."""
    if stage not in STAGES:
        raise StageError(f"unknown stage {stage!r}; expected one of {sorted(STAGES)}")
    for name in ("patterns", "corpus", "names_male", "names_female", "general_pool", "roleplay_pool"):
        if getattr(cfg.paths, name):
            cfg.require_paths(name)
    manifest = RunManifest.start(stage, cfg.hash(), cfg.seed)
    ctx = StageContext(cfg, manifest, dry_run, options if options is not None else {})
    if not dry_run:
        cfg.workdir().mkdir(parents=True, exist_ok=True)
    STAGES[stage](ctx)
    manifest.finish()
    if not dry_run:
        append_manifest(layout(cfg).manifests, manifest)
    logger.info("stage %s done: %s", stage, manifest.outputs)
    return manifest


def run_pipeline(
    cfg: PipelineConfig,
    combos: str | Path,
    ood: str | Path | None = None,
    eval_splits: Sequence[str] | None = None,
) -> list[RunManifest]:
    """Run every stage from the taxonomy skeleton through evaluation.

    Only the patterns named in ``combos`` get checklists, which is all the
    evaluation stage needs. Pattern synthesis runs when a corpus is configured.
    """
    patterns = sorted({p for c in read_combos(combos) for p in c})
    plan: list[tuple[str, dict[str, Any]]] = [("patterns.init", {})]
    if cfg.paths.corpus:
        plan.append(("patterns.synth", {}))
    plan += [
        ("synth.scenarios", {"combos": str(combos)}),
        ("synth.conversations", {}),
        ("checklists.build", {"patterns": patterns}),
        ("checklists.extract", {}),
        ("split", {"ood": str(ood)} if ood else {}),
        ("export.sft", {}),
        ("eval.run", {"splits": list(eval_splits) if eval_splits else None}),
    ]
    return [run_stage(stage, cfg, options=opts) for stage, opts in plan]
