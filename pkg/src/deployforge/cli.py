"""Command-line entry point.

Subcommands mirror the pipeline stages: discover, analyze, plan, build,
validate, run-all, report, search, export. Exit codes: 0 clean, 1 for
infrastructure failures, 2 for configuration or usage problems.
"""

from __future__ import annotations

import argparse
import json
import shlex
import sys
from pathlib import Path

from .analytics import ingest_path, render_report, summarize
from .analyzer import build_evidence, ingest as ingest_repo, inventory_artifacts
from .buildspec import parse, render
from .clients import RepoMetadata
from .config import PipelineConfig, load_config
from .errors import (
    ConfigError,
    DeployForgeError,
    EmptySummaryError,
    InfrastructureError,
)
from .executor import ExecutionLimits, make_backend
from .funnel import DomainTaxonomy, run_funnel
from .orchestrator import (
    EXIT_CONFIG,
    EXIT_INFRASTRUCTURE,
    EXIT_OK,
    make_completer,
    make_embedder,
    make_git_host,
    make_search,
    read_pool,
    run_all,
)
from .registry import ToolRegistry
from .specengine import ModelProposer, ModelReviewer, RuleProposer, RuleReviewer, refine_loop


def _add_config_arg(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", default=None, help="pipeline config file (JSON)")


def _load(args: argparse.Namespace) -> PipelineConfig:
    return load_config(args.config)


def cmd_discover(args: argparse.Namespace) -> int:
    config = _load(args)
    taxonomy = DomainTaxonomy.from_file(args.taxonomy)
    host = make_git_host(config)
    completer = make_completer(config)
    pool, report = run_funnel(
        taxonomy, host, completer,
        expander=completer,
        max_keywords=int(config["funnel.max_keywords"]),
        expansion_depth=int(config["funnel.expansion_depth"]),
        fanout_cap=int(config["funnel.fanout_cap"]),
        skip_expansion=bool(config["funnel.skip_expansion"]) or args.skip_expansion,
        allow_unknown_license=bool(config["funnel.allow_unknown_license"]),
        final_stage=args.stage,
    )
    with open(args.out, "w", encoding="utf-8") as fh:
        for meta in pool.sorted_members():
            row = meta.to_dict()
            row["stage"] = pool.stage_label
            row["provenance"] = [list(p) for p in pool.provenance.get(meta.repo_id, [])]
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    if args.report:
        Path(args.report).write_text(
            json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{len(pool)} candidates at stage {pool.stage_label} -> {args.out}")
    return EXIT_OK


def cmd_analyze(args: argparse.Namespace) -> int:
    config = _load(args)
    source = Path(args.source)
    repo_id = args.repo_id or source.name
    meta = RepoMetadata(repo_id=repo_id, url=str(source), local_path=str(source))
    snapshot = ingest_repo(meta, size_cap_bytes=int(config["analyzer.repo_size_cap_bytes"]))
    inventory = inventory_artifacts(snapshot)
    evidence = build_evidence(
        snapshot, inventory, make_search(config),
        supplemental_budget=int(config["analyzer.supplemental_budget"]),
        file_cap_bytes=int(config["analyzer.evidence_file_cap_bytes"]),
    )
    doc = evidence.to_dict()
    doc["inventory"] = {
        "manifests": [list(m) for m in inventory.manifests],
        "artifact_count": inventory.artifact_count,
        "tier": inventory.tier,
    }
    doc["commit_id"] = snapshot.commit_id
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"evidence for {repo_id} -> {args.out}")
    return EXIT_OK


def cmd_plan(args: argparse.Namespace) -> int:
    config = _load(args)
    from .analyzer import EvidenceBundle
    evidence = EvidenceBundle.from_dict(json.loads(Path(args.evidence).read_text(encoding="utf-8")))
    completer = make_completer(config)
    proposer = ModelProposer(completer) if args.proposer == "model" else RuleProposer()
    reviewer = ModelReviewer(completer) if args.reviewer == "model" else RuleReviewer()
    spec, transcript = refine_loop(evidence, proposer, reviewer, max_rounds=args.max_rounds)
    Path(args.out).write_text(render(spec), encoding="utf-8")
    if args.transcript:
        Path(args.transcript).write_text(
            json.dumps(transcript.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{transcript.final_status} after {len(transcript.rounds)} round(s); "
          f"digest {spec.spec_digest[:16]} -> {args.out}")
    return EXIT_OK


def _limits(config: PipelineConfig, limits_file: str | None = None) -> ExecutionLimits:
    values = dict(config.values["limits"])
    if limits_file:
        try:
            values.update(json.loads(Path(limits_file).read_text(encoding="utf-8")))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read limits file {limits_file}: {exc}") from exc
    try:
        return ExecutionLimits(
            cpu_slots=int(values["cpu_slots"]),
            memory_bytes=int(values["memory_bytes"]),
            disk_bytes=int(values["disk_bytes"]),
            build_timeout_s=float(values["build_timeout_s"]),
            validate_timeout_s=float(values["validate_timeout_s"]),
        )
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"bad execution limits: {exc}") from exc


def cmd_build(args: argparse.Namespace) -> int:
    config = _load(args)
    spec = parse(Path(args.recipe).read_text(encoding="utf-8"))
    backend = make_backend(
        args.backend or str(config["backend.kind"]),
        args.script or (config.path("backend.script_path")
                        if str(config["backend.script_path"]) else None),
    )
    result = backend.build_image(spec, _limits(config, args.limits),
                                 config.path("paths.work_dir") / "logs")
    doc = {
        "outcome": result.outcome,
        "failure_category": result.failure_category,
        "image_digest": result.image_digest,
        "build_duration_s": result.build_duration_s,
        "exit_status": result.exit_status,
        "log_path": result.log_path,
    }
    Path(args.out).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(f"{result.outcome} in {result.build_duration_s:.1f}s -> {args.out}")
    return EXIT_OK


def cmd_validate(args: argparse.Namespace) -> int:
    config = _load(args)
    backend = make_backend(
        args.backend or str(config["backend.kind"]),
        args.script or (config.path("backend.script_path")
                        if str(config["backend.script_path"]) else None),
    )
    result = backend.validate_tool(args.digest, tuple(shlex.split(args.cmd)), _limits(config))
    print(json.dumps({
        "passed": result.passed,
        "exit_status": result.exit_status,
        "duration_s": result.duration_s,
        "log_excerpt": result.log_excerpt,
    }, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_run_all(args: argparse.Namespace) -> int:
    config = _load(args)
    if args.budget:
        try:
            budget = json.loads(Path(args.budget).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read budget file {args.budget}: {exc}") from exc
        known = {"cpu_slots", "memory_bytes", "long_tail_slots", "queue_cap"}
        unknown = set(budget) - known
        if unknown:
            raise ConfigError(f"unknown budget keys: {', '.join(sorted(unknown))}")
        config.values["scheduler"].update(budget)
    if args.backend:
        config.values["backend"]["kind"] = args.backend
    if args.trace:
        config.values["paths"]["trace"] = args.trace
    pool = read_pool(args.pool)
    taxonomy = DomainTaxonomy.from_file(args.taxonomy) if args.taxonomy else None
    result = run_all(config, pool, taxonomy=taxonomy)
    successes = sum(1 for r in result.records if r.outcome == "success")
    print(f"{len(result.records)} attempts, {successes} validated, "
          f"{len(result.registered)} registered, {len(result.skipped)} skipped")
    for err in result.infrastructure_errors:
        print(f"infrastructure error: {err}", file=sys.stderr)
    return result.exit_code


def cmd_report(args: argparse.Namespace) -> int:
    ingested = ingest_path(args.trace)
    for diag in ingested.diagnostics:
        print(f"warning: {diag}", file=sys.stderr)
    summary = summarize(ingested.records)
    files = render_report(summary, args.format)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, content in sorted(files.items()):
        (out_dir / name).write_text(content, encoding="utf-8")
    if args.format == "text":
        print(files["report.txt"], end="")
    else:
        print(f"wrote {', '.join(sorted(files))} -> {out_dir}")
    return EXIT_OK


def cmd_search(args: argparse.Namespace) -> int:
    config = _load(args)
    registry = ToolRegistry(config.path("paths.registry"))
    embedder = make_embedder(config)
    if embedder is None:
        raise ConfigError("search needs clients.embedding.vocabulary_path")
    ranked = registry.search(args.query, embedder, domain=args.domain,
                             tag=args.tag, language=args.language)
    for score, entry in ranked:
        print(f"{score:.4f}  {entry.tool_id}  {entry.name}")
    if not ranked:
        print("no matches")
    return EXIT_OK


def cmd_export(args: argparse.Namespace) -> int:
    config = _load(args)
    registry = ToolRegistry(config.path("paths.registry"))
    sys.stdout.write(registry.export_manifest(args.tool_id))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="deployforge",
        description="Turn source repositories into execution-validated, containerized tools",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("discover", help="run the candidate discovery funnel")
    _add_config_arg(p)
    p.add_argument("--taxonomy", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--report", default=None)
    p.add_argument("--skip-expansion", action="store_true")
    p.add_argument("--stage", default="executable_candidate",
                   choices=["raw", "expanded", "tool_like", "executable_candidate"])
    p.set_defaults(func=cmd_discover)

    p = sub.add_parser("analyze", help="ingest a checkout and emit its evidence bundle")
    _add_config_arg(p)
    p.add_argument("source", help="path to a local checkout")
    p.add_argument("--repo-id", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("plan", help="infer and refine a build recipe from evidence")
    _add_config_arg(p)
    p.add_argument("evidence", help="evidence JSON from 'analyze'")
    p.add_argument("--out", required=True)
    p.add_argument("--transcript", default=None)
    p.add_argument("--max-rounds", type=int, default=4)
    p.add_argument("--proposer", choices=["rule", "model"], default="rule")
    p.add_argument("--reviewer", choices=["rule", "model"], default="rule")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("build", help="build an image from a recipe")
    _add_config_arg(p)
    p.add_argument("recipe")
    p.add_argument("--backend", choices=["sim", "engine"], default=None)
    p.add_argument("--script", default=None, help="simulated backend script file")
    p.add_argument("--limits", default=None, help="execution limits file (JSON)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_build)

    p = sub.add_parser("validate", help="run a validation command in a built image")
    _add_config_arg(p)
    p.add_argument("digest")
    p.add_argument("--backend", choices=["sim", "engine"], default=None)
    p.add_argument("--script", default=None)
    p.add_argument("--cmd", required=True,
                   help="validation command as one shell-quoted string")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run-all", help="full pipeline over a candidate pool")
    _add_config_arg(p)
    p.add_argument("--pool", required=True)
    p.add_argument("--taxonomy", default=None)
    p.add_argument("--budget", default=None, help="scheduler budget file (JSON)")
    p.add_argument("--backend", choices=["sim", "engine"], default=None)
    p.add_argument("--trace", default=None, help="trace output path override")
    p.set_defaults(func=cmd_run_all)

    p = sub.add_parser("report", help="aggregate a trace into reports")
    p.add_argument("--trace", required=True)
    p.add_argument("--format", choices=["text", "json", "csv"], default="text")
    p.add_argument("--out", default="report-out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("search", help="search the tool registry")
    _add_config_arg(p)
    p.add_argument("query")
    p.add_argument("--domain", default=None)
    p.add_argument("--tag", default=None)
    p.add_argument("--language", default=None)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("export", help="print one tool's manifest")
    _add_config_arg(p)
    p.add_argument("tool_id")
    p.set_defaults(func=cmd_export)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except EmptySummaryError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InfrastructureError as exc:
        print(f"infrastructure error: {exc}", file=sys.stderr)
        return EXIT_INFRASTRUCTURE
    except DeployForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
