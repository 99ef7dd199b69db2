from __future__ import annotations

import json
from dataclasses import replace
from pathlib import Path

import pytest

from psyforge import pipeline as pl
from psyforge.cli import EXIT_OK, EXIT_PROVIDER, EXIT_VALIDATION, main
from psyforge.config import ConfigError, PipelineConfig
from psyforge.dataset import read_split_csv
from psyforge.store import read_manifests, store_append, store_scan

FIXTURES = Path(__file__).parent / "fixtures"
COMBOS3 = "spotlight-effect,nervous,rash\negocentric-bias,introverted,dull\nhalo-effect,talkative,kind\n"


def forge(workdir: Path, *args: str) -> int:
    return main(["--workdir", str(workdir), "--seed", "7", *args])


def last_output(capsys) -> dict:
    lines = [ln for ln in capsys.readouterr().out.splitlines() if ln.startswith("{")]
    return json.loads(lines[-1])


@pytest.fixture
def workdir(tmp_path) -> Path:
    return tmp_path / "run"


@pytest.fixture
def combos3(tmp_path) -> Path:
    path = tmp_path / "combos.txt"
    path.write_text(COMBOS3)
    return path


def test_patterns_init_then_load(workdir, capsys):
    assert forge(workdir, "patterns", "init") == EXIT_OK
    assert last_output(capsys)["outputs"] == {"patterns": 244}
    assert forge(workdir, "patterns", "init") == EXIT_OK
    assert last_output(capsys)["skipped"] == 244
    assert main(["patterns", "load", str(workdir / "patterns")]) == EXIT_OK
    counts = json.loads(capsys.readouterr().out)
    assert counts["traits"] == 100 and counts["social_cognitive"] == 144 and counts["full_taxonomy"]
    assert main(["patterns", "load", str(workdir / "patterns"), "--require-sections"]) == EXIT_VALIDATION


def test_scenario_stage_is_resumable(workdir, combos3, capsys):
    forge(workdir, "patterns", "init", "--only", "spotlight-effect", "nervous", "rash", "egocentric-bias",
          "introverted", "dull", "halo-effect", "talkative", "kind")
    assert forge(workdir, "synth", "scenarios", "--combos", str(combos3)) == EXIT_OK
    first = last_output(capsys)
    assert first["outputs"] == {"scenarios": 9} and first["quarantined"] == 0
    before = (workdir / "scenarios.jsonl").read_bytes()
    assert forge(workdir, "synth", "scenarios", "--combos", str(combos3)) == EXIT_OK
    again = last_output(capsys)
    assert again["outputs"] == {"scenarios": 0} and again["skipped"] == 9
    assert (workdir / "scenarios.jsonl").read_bytes() == before
    assert [m.stage for m in read_manifests(workdir / "manifests.jsonl")] == [
        "patterns.init", "synth.scenarios", "synth.scenarios"
    ]


def test_unknown_combo_pattern_is_a_validation_error(workdir, tmp_path, capsys):
    forge(workdir, "patterns", "init", "--only", "nervous")
    (tmp_path / "bad.txt").write_text("nervous,not-a-pattern\n")
    assert forge(workdir, "synth", "scenarios", "--combos", str(tmp_path / "bad.txt")) == EXIT_VALIDATION
    assert "not-a-pattern" in capsys.readouterr().err


def test_dry_run_writes_nothing(workdir, combos3, capsys):
    forge(workdir, "patterns", "init")
    listing = sorted(p.name for p in workdir.iterdir())
    assert forge(workdir, "--dry-run", "synth", "scenarios", "--combos", str(combos3)) == EXIT_OK
    out = last_output(capsys)
    assert out["outputs"] == {"compatibility_checks": 3, "scenarios": 9}
    assert sorted(p.name for p in workdir.iterdir()) == listing
    assert not (workdir / "cache").exists()


def test_bad_config_path_fails_before_any_provider_call(workdir, combos3, tmp_path, monkeypatch):
    forge(workdir, "patterns", "init")
    calls = []
    monkeypatch.setattr(pl, "make_gateway", lambda *a: calls.append(a))
    (tmp_path / "cfg.yaml").write_text(f"paths:\n  names_male: {tmp_path / 'nowhere.txt'}\n")
    code = forge(workdir, "--config", str(tmp_path / "cfg.yaml"), "synth", "scenarios", "--combos", str(combos3))
    assert code == EXIT_VALIDATION and calls == []
    assert forge(workdir, "--config", str(tmp_path / "missing.yaml"), "stats") == EXIT_VALIDATION


def test_missing_provider_key_exits_with_provider_code(workdir, combos3, monkeypatch, capsys):
    monkeypatch.delenv("FORGE_OPENAI_KEY", raising=False)
    forge(workdir, "patterns", "init")
    code = forge(workdir, "--provider", "openai", "synth", "scenarios", "--combos", str(combos3))
    assert code == EXIT_PROVIDER
    assert "provider failure" in capsys.readouterr().err


def test_stage_order_errors(workdir):
    assert forge(workdir, "synth", "conversations") == EXIT_VALIDATION  # no registry yet
    forge(workdir, "patterns", "init")
    assert forge(workdir, "export", "sft") == EXIT_VALIDATION  # no split manifest


def test_global_flags_after_subcommand(workdir, capsys):
    assert main(["patterns", "init", "--workdir", str(workdir), "--only", "nervous"]) == EXIT_OK
    assert last_output(capsys)["outputs"] == {"patterns": 1}


def _config(workdir: Path, **kw) -> PipelineConfig:
    cfg = PipelineConfig(seed=7, id_eval_size=2, **kw)
    return replace(cfg, paths=replace(cfg.paths, workdir=str(workdir)))


def test_full_pipeline_stores(workdir):
    cfg = _config(workdir)
    manifests = pl.run_pipeline(cfg, FIXTURES / "combos5.txt", FIXTURES / "ood_published.json")
    by_stage = {m.stage: m for m in manifests}
    assert by_stage["synth.scenarios"].outputs["scenarios"] == 15
    assert by_stage["synth.conversations"].outputs["conversations"] == 15
    assert by_stage["checklists.build"].outputs["pattern_checklists"] == 15 - 1  # nervous appears twice
    splits = {a.scenario_id: a.split.value for a in read_split_csv(workdir / "splits.csv")}
    # Oracle: with the published OOD set the fixture has one OOD combo, two
    # mixed combos and two in-domain combos, three variants each.
    assert sorted(splits.values()).count("ood_eval") == 3
    assert sorted(splits.values()).count("mixed_eval") == 6
    assert sorted(splits.values()).count("id_eval") == 2
    assert sorted(splits.values()).count("train") == 4
    report = json.loads((workdir / "eval_report.json").read_text())
    assert [s["split"] for s in report["splits"]] == ["id_eval", "ood_eval", "mixed_eval"]
    assert report["failed_items"] == 0

    # Lint passes on the stored conversations, and resuming writes nothing.
    assert forge(workdir, "lint") == EXIT_OK
    sizes = {p.name: p.stat().st_size for p in workdir.glob("*.jsonl") if p.name != "manifests.jsonl"}
    again = pl.run_pipeline(cfg, FIXTURES / "combos5.txt", FIXTURES / "ood_published.json")
    assert all(m.outputs.get("scenarios", 0) == 0 for m in again if m.stage == "synth.scenarios")
    assert {p.name: p.stat().st_size for p in workdir.glob("*.jsonl") if p.name != "manifests.jsonl"} == sizes


def test_lint_reports_violations(workdir, capsys):
    pl.run_pipeline(_config(workdir), FIXTURES / "combos5.txt", FIXTURES / "ood_published.json")
    conv = store_scan(workdir / "conversations.jsonl")[0]
    conv = {**conv, "id": conv["id"], "turns": conv["turns"][:11]}
    conv.pop("_checksum", None)
    path = workdir / "conversations.jsonl"
    kept = [{k: v for k, v in r.items() if k != "_checksum"} for r in store_scan(path)[1:]]
    path.unlink()
    store_append(path, [conv, *kept])
    capsys.readouterr()
    assert forge(workdir, "lint") == EXIT_VALIDATION
    assert "turn_count_below_min(11)" in capsys.readouterr().out


def test_stats_and_mixture(workdir, capsys):
    pl.run_pipeline(_config(workdir), FIXTURES / "combos5.txt", FIXTURES / "ood_published.json")
    assert forge(workdir, "stats") == EXIT_OK
    stats = json.loads((workdir / "stats.json").read_text())
    assert stats["scenarios"] == 15
    assert forge(workdir, "mixture", "--ratio", "1:0:0") == EXIT_OK
    assert last_output(capsys)["outputs"]["humanllm"] == 8


def test_unknown_stage_and_provider():
    with pytest.raises(pl.StageError):
        pl.run_stage("nope", PipelineConfig())
    cfg = PipelineConfig().with_overrides(provider="carrier-pigeon")
    with pytest.raises(ConfigError):
        pl.make_gateway(cfg, "judge")
