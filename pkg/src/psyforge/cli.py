"""``forge``: command-line entry point mirroring the pipeline stages.

Exit codes: 0 success, 1 validation or configuration failure, 2 provider
exhaustion (retries or rate limit used up, or a fatal provider error).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections.abc import Sequence
from pathlib import Path
from typing import Any

from . import pipeline as pl
from .checklists import ChecklistItem, PatternChecklist, items_for_character
from .config import ConfigError, PipelineConfig, load_config
from .dialogue import Conversation, DialogueParseError
from .evaluation import EvalResult, annotate, write_ratings_csv
from .gateway import GatewayError
from .patterns import RegistryError, load_registry
from .store import StoreCorruptError, store_scan

EXIT_OK, EXIT_VALIDATION, EXIT_PROVIDER = 0, 1, 2

logger = logging.getLogger("psyforge")


def _common(p: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=d, help="JSON or YAML run configuration")
    p.add_argument("--seed", type=int, default=d)
    p.add_argument("--provider", default=d, help="provider for every role (mock, openai, anthropic, gemini)")
    p.add_argument("--parallelism", type=int, default=d)
    p.add_argument("--workdir", default=d, help="directory holding the run's stores")
    p.add_argument("--dry-run", action="store_true", default=argparse.SUPPRESS if suppress else False,
                   help="validate inputs and report planned work without provider calls or writes")
    p.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="forge", description="Build and evaluate psychological role-play data.")
    _common(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def leaf(parent: Any, name: str, help: str) -> argparse.ArgumentParser:
        p = parent.add_parser(name, help=help)
        _common(p, suppress=True)
        return p

    patterns = sub.add_parser("patterns", help="pattern registry").add_subparsers(dest="action", required=True)
    p = leaf(patterns, "init", "write the taxonomy skeleton into the workdir")
    p.add_argument("--only", nargs="*", help="restrict to these pattern ids")
    p = leaf(patterns, "load", "validate a registry directory or file and print counts")
    p.add_argument("path")
    p.add_argument("--require-sections", action="store_true")
    leaf(patterns, "synth", "fill pattern sections from the corpus folders")

    synth = sub.add_parser("synth", help="scenario and conversation synthesis").add_subparsers(dest="action", required=True)
    p = leaf(synth, "scenarios", "generate three scenario variants per compatible combination")
    p.add_argument("--combos", required=True, help="JSONL or comma-separated combination list")
    p = leaf(synth, "conversations", "generate a conversation for every scenario")
    p.add_argument("--scenarios", help="(informational) scenario store; defaults to the workdir store")

    checklists = sub.add_parser("checklists", help="checklist construction").add_subparsers(dest="action", required=True)
    p = leaf(checklists, "build", "build pattern-level checklists")
    p.add_argument("--patterns", nargs="*", help="restrict to these pattern ids")
    p = leaf(checklists, "extract", "extract scenario-level checklists")
    p.add_argument("--scenarios", help="(informational) scenario store; defaults to the workdir store")

    p = leaf(sub, "split", "select OOD patterns and assign splits")
    p.add_argument("--ood", help="JSON file fixing the OOD set instead of selecting it")
    p.add_argument("--id-eval-size", type=int)

    export = sub.add_parser("export", help="data export").add_subparsers(dest="action", required=True)
    p = leaf(export, "sft", "export ShareGPT-style SFT samples")
    p.add_argument("--split", default="train")
    p.add_argument("--out")

    p = leaf(sub, "mixture", "mix humanllm, general and role-play samples")
    p.add_argument("--ratio", help="e.g. 4:4:2")
    leaf(sub, "stats", "corpus statistics")
    leaf(sub, "lint", "validate every stored conversation")

    evals = sub.add_parser("eval", help="evaluation").add_subparsers(dest="action", required=True)
    p = leaf(evals, "run", "transcripts, judging and the run report")
    p.add_argument("--model", help="model name for the model under test")
    p.add_argument("--split", nargs="*", help="splits to evaluate (default: all evaluation splits)")
    p.add_argument("--mode", choices=("replay", "selfplay"))
    p = leaf(evals, "agreement", "human vs judge agreement")
    p.add_argument("--human-csv", required=True)
    p.add_argument("--judge-csv", help="judge ratings CSV; defaults to the eval results store")
    p = leaf(evals, "annotate", "rate checklist items interactively")
    p.add_argument("--sample", required=True, help="sample id (scenario_id::Character)")
    p.add_argument("--rater", required=True)
    p.add_argument("--out", required=True, help="ratings CSV to append to")
    return parser


def _config(args: argparse.Namespace) -> PipelineConfig:
    cfg = load_config(getattr(args, "config", None))
    from dataclasses import replace

    changes: dict[str, Any] = {"seed": args.seed, "parallelism": args.parallelism, "provider": args.provider}
    if getattr(args, "id_eval_size", None) is not None:
        changes["id_eval_size"] = args.id_eval_size
    if getattr(args, "ratio", None):
        changes["ratio"] = tuple(int(x) for x in args.ratio.split(":"))
    cfg = cfg.with_overrides(**changes)
    if args.workdir:
        cfg = replace(cfg, paths=replace(cfg.paths, workdir=args.workdir))
    if getattr(args, "model", None):
        providers = dict(cfg.providers)
        providers["model"] = replace(cfg.provider("model"), model=args.model)
        cfg = replace(cfg, providers=providers)
    if cfg.parallelism < 1:
        raise ConfigError("--parallelism must be at least 1")
    return cfg


def _print_manifest(m: Any) -> None:
    print(json.dumps({"stage": m.stage, "outputs": m.outputs, "skipped": m.skipped,
                      "quarantined": m.quarantined, "config_hash": m.config_hash}, sort_keys=True))


STAGE_OF = {
    ("patterns", "init"): "patterns.init",
    ("patterns", "synth"): "patterns.synth",
    ("synth", "scenarios"): "synth.scenarios",
    ("synth", "conversations"): "synth.conversations",
    ("checklists", "build"): "checklists.build",
    ("checklists", "extract"): "checklists.extract",
    ("split", None): "split",
    ("export", "sft"): "export.sft",
    ("mixture", None): "mixture",
    ("stats", None): "stats",
    ("lint", None): "lint",
    ("eval", "run"): "eval.run",
    ("eval", "agreement"): "eval.agreement",
}


def _annotate(cfg: PipelineConfig, args: argparse.Namespace) -> int:
    lay = pl.layout(cfg)
    scenario_id, _, character = args.sample.partition("::")
    scenarios = {s.id: s for s in pl.load_scenarios(cfg)}
    if scenario_id not in scenarios:
        raise ConfigError(f"unknown scenario {scenario_id!r}")
    sc = scenarios[scenario_id]
    transcript: Conversation | None = None
    for r in store_scan(lay.eval_results):
        if r["sample_id"] == args.sample:
            transcript = EvalResult.from_dict(r).transcript
    if transcript is None:
        transcript = pl.load_conversations(cfg).get(scenario_id)
    if transcript is None:
        raise ConfigError(f"no transcript for {args.sample}")
    checklists = {r["pattern_id"]: PatternChecklist.from_dict(r) for r in store_scan(lay.pattern_checklists)}
    p_items = [i for p in sc.character(character).assigned_patterns if p in checklists for i in checklists[p].items]
    s_items = items_for_character(
        [ChecklistItem.from_dict(r) for r in store_scan(lay.scenario_checklists)], scenario_id, character
    )
    rows = annotate(args.sample, transcript, character, p_items, s_items, args.rater)
    if not rows:
        print("annotation abandoned; nothing written")
        return EXIT_OK
    write_ratings_csv(rows, args.out, append=True)
    print(f"wrote {len(rows)} rows to {args.out}")
    return EXIT_OK


def _dispatch(args: argparse.Namespace) -> int:
    if args.command == "patterns" and args.action == "load":
        reg = load_registry(args.path, require_sections=args.require_sections)
        traits, social = reg.counts()
        incomplete = sum(not p.is_complete for p in reg)
        print(json.dumps({"patterns": len(reg), "traits": traits, "social_cognitive": social,
                          "incomplete": incomplete, "full_taxonomy": reg.is_full()}))
        return EXIT_OK

    cfg = _config(args)
    if args.command == "eval" and args.action == "annotate":
        return _annotate(cfg, args)

    stage = STAGE_OF[(args.command, getattr(args, "action", None))]
    options: dict[str, Any] = {}
    if stage == "patterns.init":
        options["only"] = args.only
    elif stage == "synth.scenarios":
        options["combos"] = args.combos
    elif stage == "checklists.build":
        options["patterns"] = args.patterns
    elif stage == "split" and args.ood:
        options["ood"] = args.ood
    elif stage == "export.sft":
        options.update(split=args.split, out=args.out)
    elif stage == "eval.run":
        options.update(splits=args.split, mode=args.mode)
    elif stage == "eval.agreement":
        options.update(human_csv=args.human_csv, judge_csv=args.judge_csv)

    manifest = pl.run_stage(stage, cfg, dry_run=args.dry_run, options=options)
    _print_manifest(manifest)
    report = options.get("report")
    if report is not None and hasattr(report, "table"):
        print(report.table())
    if stage == "lint":
        problems = options.get("problems", {})
        for sid, violations in sorted(problems.items()):
            print(f"{sid}: {', '.join(violations)}")
        return EXIT_VALIDATION if problems else EXIT_OK
    return EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    try:
        return _dispatch(args)
    except GatewayError as exc:
        print(f"provider failure: {exc}", file=sys.stderr)
        return EXIT_PROVIDER
    except (ConfigError, pl.StageError, RegistryError, StoreCorruptError, DialogueParseError,
            ValueError, KeyError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    raise SystemExit(main())
