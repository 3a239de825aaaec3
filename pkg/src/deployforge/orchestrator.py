"""End-to-end pipeline driver: analyze, plan, build, validate, register.

The driver owns the scheduler arbiter and a thread pool sized by the
scheduler budget. Per-candidate outcomes depend only on candidate content
when the backend is simulated, so the trace is rewritten in canonical
(tool-id sorted) order after a clean run and successful tools are
registered in that same order; byte-identical outputs across runs and
worker interleavings follow. While the run is in flight, records stream
append-only to the trace file so a crash loses nothing.

Exit policy: tool failures are data, never process failures. Only
infrastructure errors (backend down, unwritable store) abort the run and
exit nonzero; a config problem is the other nonzero exit, decided before
the run starts.
"""

from __future__ import annotations

import json
import sys
import time
from concurrent.futures import FIRST_COMPLETED, Future, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .analytics import AttemptRecord
from .analyzer import build_evidence, ingest, inventory_artifacts
from .buildspec import BuildSpec
from .clients import (
    MockEmbedder,
    MockGitHost,
    MockSearch,
    MockTextCompleter,
    RepoMetadata,
)
from .config import PipelineConfig
from .errors import (
    ConfigError,
    InfrastructureError,
    NetworkError,
    ProposalError,
    ResourceLimitError,
    RetryableClientError,
    SpecValidationError,
)
from .executor import ExecutionLimits, classify_failure, make_backend
from .funnel import DomainTaxonomy
from .registry import (
    FIXED_EPOCH,
    ToolEntry,
    ToolRegistry,
    assign_domains,
    tool_id_for,
)
from .scheduler import BudgetState, Scheduler, estimate_cost
from .specengine import (
    ModelProposer,
    ModelReviewer,
    RuleProposer,
    RuleReviewer,
    refine_loop,
)

EXIT_OK = 0
EXIT_INFRASTRUCTURE = 1
EXIT_CONFIG = 2


def log_event(stage: str, candidate: str, message: str, severity: str = "info") -> None:
    sys.stderr.write(json.dumps({
        "severity": severity, "stage": stage, "candidate": candidate, "message": message,
    }, sort_keys=True) + "\n")


# ── Client factory ────────────────────────────────────────────────────


def _require_mock(config: PipelineConfig, section: str) -> None:
    provider = config[f"clients.{section}.provider"]
    if provider != "mock":
        raise ConfigError(
            f"clients.{section}.provider={provider!r}: only the offline mock provider "
            "ships with this package; plug real providers in through the client interfaces"
        )


def make_git_host(config: PipelineConfig) -> MockGitHost:
    _require_mock(config, "git_host")
    fixture_dir = config.path("clients.git_host.fixture_dir")
    if not str(config["clients.git_host.fixture_dir"]):
        raise ConfigError("clients.git_host.fixture_dir is required for the mock host")
    return MockGitHost(fixture_dir, page_size=int(config["clients.git_host.page_size"]))


def make_search(config: PipelineConfig) -> MockSearch | None:
    _require_mock(config, "search")
    raw = str(config["clients.search.fixture_dir"])
    return MockSearch(config.path("clients.search.fixture_dir")) if raw else None


def make_completer(config: PipelineConfig) -> MockTextCompleter:
    _require_mock(config, "model")
    raw = str(config["clients.model.table_path"])
    if not raw:
        return MockTextCompleter({})
    return MockTextCompleter.from_file(config.path("clients.model.table_path"))


def make_embedder(config: PipelineConfig) -> MockEmbedder | None:
    _require_mock(config, "embedding")
    raw = str(config["clients.embedding.vocabulary_path"])
    return MockEmbedder.from_file(config.path("clients.embedding.vocabulary_path")) if raw else None


# ── Pool IO ───────────────────────────────────────────────────────────


def read_pool(path: str | Path) -> list[RepoMetadata]:
    pool_path = Path(path)
    if not pool_path.exists():
        raise ConfigError(f"pool file {pool_path} does not exist")
    members = []
    for line in pool_path.read_text(encoding="utf-8").splitlines():
        if not line.strip():
            continue
        meta = RepoMetadata.from_dict(json.loads(line))
        if meta.local_path is not None and not Path(meta.local_path).is_absolute():
            meta.local_path = str((pool_path.parent / meta.local_path).resolve())
        members.append(meta)
    return members


# ── Per-candidate pipeline ────────────────────────────────────────────


@dataclass
class AttemptOutcome:
    record: AttemptRecord
    entry: ToolEntry | None = None
    spec: BuildSpec | None = None


@dataclass
class _Stage:
    """Mutable state shared by the worker threads of one run."""

    config: PipelineConfig
    backend: Any
    search: Any
    completer: Any
    deterministic: bool
    log_dir: Path
    snap_dir: Path

    def engines(self):
        if self.config["spec_engine.proposer"] == "model":
            proposer = ModelProposer(self.completer)
        else:
            proposer = RuleProposer()
        if self.config["spec_engine.reviewer"] == "model":
            reviewer = ModelReviewer(self.completer)
        else:
            reviewer = RuleReviewer()
        return proposer, reviewer


def process_candidate(meta: RepoMetadata, stage: _Stage) -> AttemptOutcome:
    """Run one candidate through the whole pipeline, yielding its record."""
    config = stage.config
    started = 0.0 if stage.deterministic else time.time()

    def failed(tool_id: str, category: str, duration: float = 0.0,
               artifact_count: int = 0, language: str = "unknown",
               rounds: int = 0, validation_exit: int | str | None = None) -> AttemptOutcome:
        finished = started + duration if stage.deterministic else time.time()
        return AttemptOutcome(record=AttemptRecord(
            tool_id=tool_id,
            repo_url=meta.url,
            primary_language=language,
            artifact_count=artifact_count,
            outcome="failure",
            failure_category=category,
            build_duration_s=duration,
            validation_exit=validation_exit,
            rounds_used=rounds,
            started_at=started,
            finished_at=finished,
            license_id=meta.license_id,
        ))

    try:
        snapshot = ingest(
            meta, dest_root=stage.snap_dir,
            size_cap_bytes=int(config["analyzer.repo_size_cap_bytes"]),
        )
    except NetworkError:
        return failed(tool_id_for(meta.repo_id, "unknown"), "network")
    except ResourceLimitError:
        return failed(tool_id_for(meta.repo_id, "unknown"), "resource")

    tool_id = tool_id_for(meta.repo_id, snapshot.commit_id)
    inventory = inventory_artifacts(snapshot)
    evidence = build_evidence(
        snapshot, inventory, stage.search,
        supplemental_budget=int(config["analyzer.supplemental_budget"]),
        file_cap_bytes=int(config["analyzer.evidence_file_cap_bytes"]),
    )
    language = evidence.primary_language

    proposer, reviewer = stage.engines()
    try:
        spec, transcript = refine_loop(
            evidence, proposer, reviewer,
            max_rounds=int(config["spec_engine.max_rounds"]),
        )
    except (ProposalError, SpecValidationError):
        return failed(tool_id, "build_process",
                      artifact_count=inventory.artifact_count, language=language)
    rounds = len(transcript.rounds)

    limits = ExecutionLimits(
        cpu_slots=int(config["limits.cpu_slots"]),
        memory_bytes=int(config["limits.memory_bytes"]),
        disk_bytes=int(config["limits.disk_bytes"]),
        build_timeout_s=float(config["limits.build_timeout_s"]),
        validate_timeout_s=float(config["limits.validate_timeout_s"]),
    )
    build = stage.backend.build_image(spec, limits, stage.log_dir)
    if build.outcome != "success":
        return failed(tool_id, build.failure_category, duration=build.build_duration_s,
                      artifact_count=inventory.artifact_count, language=language,
                      rounds=rounds, validation_exit=None)

    validation = stage.backend.validate_tool(build.image_digest, spec.validate_cmd, limits)
    duration = build.build_duration_s
    finished = started + duration + validation.duration_s if stage.deterministic else time.time()
    if not validation.passed:
        category = classify_failure(validation.log_excerpt, validation.exit_status, "validate")
        out = failed(tool_id, category, duration=duration,
                     artifact_count=inventory.artifact_count, language=language,
                     rounds=rounds, validation_exit=validation.exit_status)
        return out

    record = AttemptRecord(
        tool_id=tool_id,
        repo_url=meta.url,
        primary_language=language,
        artifact_count=inventory.artifact_count,
        outcome="success",
        build_duration_s=duration,
        validation_exit=validation.exit_status,
        rounds_used=rounds,
        started_at=started,
        finished_at=finished,
        license_id=meta.license_id,
    )
    name = meta.repo_id.rsplit("/", 1)[-1]
    entry = ToolEntry(
        tool_id=tool_id,
        name=name,
        description=meta.description or name,
        entrypoint=spec.entrypoint,
        image_digest=build.image_digest,
        tags=sorted(meta.topics),
        primary_language=language,
        registered_at=FIXED_EPOCH if stage.deterministic else
        time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
    )
    return AttemptOutcome(record=record, entry=entry, spec=spec)


# ── Run-all driver ────────────────────────────────────────────────────


@dataclass
class RunResult:
    exit_code: int
    records: list[AttemptRecord] = field(default_factory=list)
    registered: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    infrastructure_errors: list[str] = field(default_factory=list)


def _recorded_repo_ids(trace_path: Path) -> set[str]:
    done = set()
    if trace_path.exists():
        for line in trace_path.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            tool_id = json.loads(line).get("tool_id", "")
            done.add(tool_id.rsplit("@", 1)[0])
    return done


def run_all(config: PipelineConfig, pool: list[RepoMetadata],
            taxonomy: DomainTaxonomy | None = None) -> RunResult:
    if not pool:
        raise ConfigError("candidate pool is empty")

    backend = make_backend(
        str(config["backend.kind"]),
        config.path("backend.script_path") if str(config["backend.script_path"]) else None,
    )
    search = make_search(config)
    completer = make_completer(config)
    embedder = make_embedder(config)
    deterministic = bool(config["deterministic"])

    work_dir = config.path("paths.work_dir")
    stage = _Stage(
        config=config, backend=backend, search=search, completer=completer,
        deterministic=deterministic,
        log_dir=work_dir / "logs", snap_dir=work_dir / "snapshots",
    )
    stage.log_dir.mkdir(parents=True, exist_ok=True)
    stage.snap_dir.mkdir(parents=True, exist_ok=True)

    trace_path = config.path("paths.trace")
    trace_path.parent.mkdir(parents=True, exist_ok=True)
    existing_lines: list[str] = []
    done_repos = _recorded_repo_ids(trace_path)
    if trace_path.exists():
        existing_lines = [l for l in trace_path.read_text(encoding="utf-8").splitlines() if l.strip()]

    result = RunResult(exit_code=EXIT_OK)
    scheduler = Scheduler(
        BudgetState(
            total_cpu_slots=int(config["scheduler.cpu_slots"]),
            total_memory_bytes=int(config["scheduler.memory_bytes"]),
            long_tail_slots=int(config["scheduler.long_tail_slots"]),
        ),
        queue_cap=int(config["scheduler.queue_cap"]),
        long_tail_floor_s=float(config["scheduler.long_tail_floor_s"]),
        long_tail_multiplier=float(config["scheduler.long_tail_multiplier"]),
    )

    by_id: dict[str, RepoMetadata] = {}
    for meta in pool:
        if meta.repo_id in done_repos:
            result.skipped.append(meta.repo_id)
            continue
        if meta.repo_id in by_id:
            continue  # pool lines de-duplicate by repo_id
        by_id[meta.repo_id] = meta
        scheduler.submit(meta.repo_id, estimate_cost(meta.primary_language), payload=meta)

    outcomes: dict[str, AttemptOutcome] = {}
    aborted = False

    with trace_path.open("a", encoding="utf-8") as trace_stream:
        with ThreadPoolExecutor(max_workers=int(config["scheduler.cpu_slots"])) as pool_exec:
            futures: dict[Future, Any] = {}

            def drain() -> None:
                nonlocal aborted
                if not futures:
                    return
                done, _ = wait(list(futures), return_when=FIRST_COMPLETED)
                for fut in done:
                    item = futures.pop(fut)
                    meta = item.payload
                    try:
                        outcome = fut.result()
                    except InfrastructureError as exc:
                        scheduler.complete(item.item_id, 0.0)
                        result.infrastructure_errors.append(f"{meta.repo_id}: {exc}")
                        log_event("build", meta.repo_id, str(exc), severity="error")
                        aborted = True
                        continue
                    record = outcome.record
                    retry = scheduler.complete(
                        item.item_id, record.build_duration_s,
                        failure_category=record.failure_category,
                    )
                    if retry is not None:
                        log_event("schedule", meta.repo_id, "resource retry with doubled memory")
                        continue  # terminal outcome comes from the retry attempt
                    outcomes[meta.repo_id] = outcome
                    trace_stream.write(record.canonical_line())
                    trace_stream.flush()
                    log_event("attempt", meta.repo_id,
                              f"{record.outcome}"
                              + (f" ({record.failure_category})" if record.failure_category else ""))

            while not aborted:
                item = scheduler.next_dispatch()
                if item is not None:
                    fut = pool_exec.submit(process_candidate, item.payload, stage)
                    futures[fut] = item
                    continue
                if futures:
                    drain()
                    continue
                break  # nothing dispatchable and nothing in flight
            while futures:
                drain()

    # candidates still queued when dispatch starved are recorded as resource failures
    for repo_id, meta in sorted(by_id.items()):
        if repo_id not in outcomes and not aborted:
            record = AttemptRecord(
                tool_id=tool_id_for(repo_id, "unknown"),
                repo_url=meta.url,
                primary_language=meta.primary_language,
                artifact_count=0,
                outcome="failure",
                failure_category="resource",
                build_duration_s=0.0,
                rounds_used=0,
                started_at=0.0,
                finished_at=0.0,
                license_id=meta.license_id,
            )
            outcomes[repo_id] = AttemptOutcome(record=record)
            with trace_path.open("a", encoding="utf-8") as fh:
                fh.write(record.canonical_line())

    result.records = [o.record for o in outcomes.values()]

    if aborted:
        result.exit_code = EXIT_INFRASTRUCTURE
        return result

    # canonical rewrite: all records (previous runs included) sorted by tool id
    all_records = {}
    for line in existing_lines:
        payload = json.loads(line)
        all_records[payload["tool_id"]] = json.dumps(payload, sort_keys=True,
                                                     separators=(",", ":")) + "\n"
    for outcome in outcomes.values():
        all_records[outcome.record.tool_id] = outcome.record.canonical_line()
    with trace_path.open("w", encoding="utf-8") as fh:
        for tool_id in sorted(all_records):
            fh.write(all_records[tool_id])

    # publication happens after the build loop, in deterministic order
    registry = ToolRegistry(config.path("paths.registry"))
    for repo_id in sorted(outcomes):
        outcome = outcomes[repo_id]
        if outcome.entry is None:
            continue
        entry = outcome.entry
        if taxonomy is not None and embedder is not None:
            try:
                entry.domains = assign_domains(entry.description, taxonomy, embedder)
            except RetryableClientError:
                entry.pending_assignment = True
        else:
            entry.pending_assignment = True
        registry.register(entry)
        result.registered.append(entry.tool_id)
        log_event("register", repo_id, entry.tool_id)

    return result
