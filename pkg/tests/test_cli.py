from __future__ import annotations

import json
from pathlib import Path

import pytest

from deployforge.buildspec import parse
from deployforge.cli import main

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture()
def cli_config(tmp_path) -> Path:
    """Config wired to the fixture clients with outputs under tmp."""
    payload = {
        "clients": {
            "git_host": {"fixture_dir": str(FIXTURES / "githost")},
            "search": {"fixture_dir": str(FIXTURES / "supplemental")},
            "model": {"table_path": str(FIXTURES / "completions.json")},
            "embedding": {"vocabulary_path": str(FIXTURES / "vocabulary.json")},
        },
        "backend": {"kind": "sim",
                    "script_path": str(FIXTURES / "pipeline" / "sim_script.json")},
        "paths": {
            "registry": str(tmp_path / "registry.jsonl"),
            "trace": str(tmp_path / "trace.jsonl"),
            "work_dir": str(tmp_path / "work"),
        },
    }
    p = tmp_path / "config.json"
    p.write_text(json.dumps(payload))
    return p


def test_discover_writes_pool_and_report(cli_config, tmp_path, capsys):
    out = tmp_path / "pool.jsonl"
    report = tmp_path / "funnel.json"
    code = main(["discover", "--config", str(cli_config),
                 "--taxonomy", str(FIXTURES / "taxonomy.json"),
                 "--out", str(out), "--report", str(report)])
    assert code == 0
    lines = out.read_text().splitlines()
    assert len(lines) == 6
    row = json.loads(lines[0])
    assert row["stage"] == "executable_candidate"
    assert row["provenance"]
    counts = json.loads(report.read_text())["stage_counts"]
    assert counts == {"raw": 12, "expanded": 14, "tool_like": 9,
                      "executable_candidate": 6}


def test_discover_stage_flag_stops_early(cli_config, tmp_path):
    out = tmp_path / "pool_raw.jsonl"
    code = main(["discover", "--config", str(cli_config),
                 "--taxonomy", str(FIXTURES / "taxonomy.json"),
                 "--out", str(out), "--stage", "raw"])
    assert code == 0
    assert len(out.read_text().splitlines()) == 12


def test_analyze_then_plan_then_build(cli_config, tmp_path, capsys):
    evidence_out = tmp_path / "evidence.json"
    code = main(["analyze", str(FIXTURES / "pipeline" / "repos" / "mdtool"),
                 "--config", str(cli_config), "--repo-id", "github.com/sci/mdtool",
                 "--out", str(evidence_out)])
    assert code == 0
    doc = json.loads(evidence_out.read_text())
    assert doc["inventory"]["artifact_count"] == 1
    assert doc["primary_language"] == "Python"
    assert doc["schema_version"] == 1

    recipe_out = tmp_path / "spec.recipe"
    transcript_out = tmp_path / "transcript.json"
    code = main(["plan", str(evidence_out), "--config", str(cli_config),
                 "--out", str(recipe_out), "--transcript", str(transcript_out)])
    assert code == 0
    spec = parse(recipe_out.read_text())
    assert spec.entrypoint == ("python", "mdtool.py")
    transcript = json.loads(transcript_out.read_text())
    assert transcript["final_status"] == "stable"

    result_out = tmp_path / "result.json"
    code = main(["build", str(recipe_out), "--config", str(cli_config),
                 "--out", str(result_out)])
    assert code == 0
    result = json.loads(result_out.read_text())
    assert result["outcome"] == "success"
    assert result["image_digest"].startswith("sha256:")

    code = main(["validate", result["image_digest"], "--config", str(cli_config),
                 "--cmd", "python mdtool.py --help"])
    assert code == 0
    printed = capsys.readouterr().out
    assert '"passed": true' in printed


def test_build_accepts_limits_file(cli_config, tmp_path):
    evidence_out = tmp_path / "evidence.json"
    main(["analyze", str(FIXTURES / "pipeline" / "repos" / "qchem"),
          "--config", str(cli_config), "--repo-id", "github.com/sci/qchem",
          "--out", str(evidence_out)])
    recipe_out = tmp_path / "spec.recipe"
    main(["plan", str(evidence_out), "--config", str(cli_config), "--out", str(recipe_out)])

    limits_file = tmp_path / "limits.json"
    limits_file.write_text(json.dumps({"build_timeout_s": 200.0, "validate_timeout_s": 60.0}))
    result_out = tmp_path / "result.json"
    code = main(["build", str(recipe_out), "--config", str(cli_config),
                 "--limits", str(limits_file), "--out", str(result_out)])
    assert code == 0
    # the scripted 300.5 s build exceeds the tightened 200 s cap
    result = json.loads(result_out.read_text())
    assert result["outcome"] == "failure"
    assert result["exit_status"] == "timeout"
    assert result["failure_category"] == "resource"


def test_run_all_budget_file_and_trace_override(cli_config, tmp_path):
    budget = tmp_path / "budget.json"
    budget.write_text(json.dumps({"cpu_slots": 2, "memory_bytes": 8 * 1024**3,
                                  "long_tail_slots": 1, "queue_cap": 100}))
    trace_override = tmp_path / "custom-trace.jsonl"
    code = main(["run-all", "--config", str(cli_config),
                 "--pool", str(FIXTURES / "pipeline" / "pool.jsonl"),
                 "--budget", str(budget), "--backend", "sim",
                 "--trace", str(trace_override)])
    assert code == 0
    assert len(trace_override.read_text().splitlines()) == 10

    bad_budget = tmp_path / "bad_budget.json"
    bad_budget.write_text(json.dumps({"cpu": 2}))
    assert main(["run-all", "--config", str(cli_config),
                 "--pool", str(FIXTURES / "pipeline" / "pool.jsonl"),
                 "--budget", str(bad_budget)]) == 2


def test_run_all_then_report_search_export(cli_config, tmp_path, capsys):
    code = main(["run-all", "--config", str(cli_config),
                 "--pool", str(FIXTURES / "pipeline" / "pool.jsonl"),
                 "--taxonomy", str(FIXTURES / "taxonomy.json")])
    assert code == 0
    out = capsys.readouterr().out
    assert "10 attempts, 8 validated, 8 registered" in out

    report_dir = tmp_path / "report"
    code = main(["report", "--trace", str(tmp_path / "trace.jsonl"),
                 "--format", "text", "--out", str(report_dir)])
    assert code == 0
    text = capsys.readouterr().out
    assert "success rate: 80.00%" in text
    assert (report_dir / "report.txt").exists()

    code = main(["report", "--trace", str(tmp_path / "trace.jsonl"),
                 "--format", "csv", "--out", str(report_dir)])
    assert code == 0
    assert (report_dir / "failure_categories.csv").read_text().splitlines()[0] == "category,count"
    capsys.readouterr()

    code = main(["search", "molecular dynamics simulation", "--config", str(cli_config)])
    assert code == 0
    ranked = capsys.readouterr().out.splitlines()
    assert "github.com/sci/mdtool@" in ranked[0]

    code = main(["search", "anything", "--config", str(cli_config), "--domain", "d-qc"])
    assert code == 0
    assert "qchem" in capsys.readouterr().out

    tool_id = ranked[0].split()[1]
    code = main(["export", tool_id, "--config", str(cli_config)])
    assert code == 0
    manifest = json.loads(capsys.readouterr().out)
    assert manifest["tool_id"] == tool_id
    assert manifest["schema_version"] == 1


def test_exit_codes(cli_config, tmp_path, capsys):
    # config problem: exit 2
    missing = tmp_path / "missing-config.json"
    assert main(["run-all", "--config", str(missing),
                 "--pool", str(FIXTURES / "pipeline" / "pool.jsonl")]) == 2

    # empty pool: exit 2 with a usage diagnostic
    empty_pool = tmp_path / "empty.jsonl"
    empty_pool.write_text("")
    assert main(["run-all", "--config", str(cli_config), "--pool", str(empty_pool)]) == 2
    assert "empty" in capsys.readouterr().err

    # unknown tool id: exit 2 family (error, not infrastructure)
    assert main(["export", "h/none@1", "--config", str(cli_config)]) == 2

    # infrastructure problem: exit 1 (recipe digest unknown to the sim script)
    recipe = tmp_path / "odd.recipe"
    recipe.write_text(
        "FROM python:3.12-slim\nWORKDIR /w\n"
        'ENTRYPOINT ["python", "odd.py"]\n# validate: ["python", "odd.py", "--help"]\n')
    out = tmp_path / "result.json"
    assert main(["build", str(recipe), "--config", str(cli_config),
                 "--out", str(out)]) == 1

    # empty trace: the empty-summary error propagates as a usage problem
    empty_trace = tmp_path / "empty-trace.jsonl"
    empty_trace.write_text("")
    assert main(["report", "--trace", str(empty_trace), "--out",
                 str(tmp_path / "r")]) == 2
