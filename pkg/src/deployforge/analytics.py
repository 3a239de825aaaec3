"""Aggregation over deployment traces.

Records stream in as JSON-lines; invalid lines are rejected individually
with line-numbered diagnostics rather than poisoning the batch. All the
aggregates are order-independent (counters plus a full sort for the
percentiles), so shuffled input produces identical summaries.

Percentiles use the nearest-rank definition: the p-th percentile of n
sorted values is the value at rank ceil(p/100 * n). Exact on small traces,
no interpolation surprises.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, TextIO

from .errors import DeployForgeError, EmptySummaryError
from .executor import FAILURE_CATEGORIES, TIMEOUT_MARKER

SCHEMA_VERSION = 1

OUTCOMES = ("success", "failure")

DEFAULT_LANGUAGE_MIN_COUNT = 5

REPORT_FORMATS = ("text", "json", "csv")

PANEL_NAMES = (
    "outcomes", "licenses", "languages", "failure_categories",
    "application_levels", "success_by_language_scale",
)


@dataclass
class AttemptRecord:
    """One build attempt, the unit of the deployment trace."""

    tool_id: str
    repo_url: str
    primary_language: str
    artifact_count: int
    outcome: str
    build_duration_s: float
    rounds_used: int
    started_at: float
    finished_at: float
    failure_category: str | None = None
    validation_exit: int | str | None = None
    license_id: str = "unknown"
    application_level: str = "unknown"

    def __post_init__(self) -> None:
        if self.outcome not in OUTCOMES:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if (self.outcome == "failure") != (self.failure_category is not None):
            raise ValueError("failure_category present exactly when outcome is failure")
        if self.failure_category is not None and self.failure_category not in FAILURE_CATEGORIES:
            raise ValueError(f"unknown failure category {self.failure_category!r}")
        if self.build_duration_s < 0:
            raise ValueError("build_duration_s must be >= 0")
        if self.finished_at < self.started_at:
            raise ValueError("finished_at precedes started_at")
        if self.artifact_count < 0:
            raise ValueError("artifact_count must be >= 0")
        if isinstance(self.validation_exit, str) and self.validation_exit != TIMEOUT_MARKER:
            raise ValueError(f"bad validation_exit {self.validation_exit!r}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool_id": self.tool_id,
            "repo_url": self.repo_url,
            "primary_language": self.primary_language,
            "artifact_count": self.artifact_count,
            "outcome": self.outcome,
            "failure_category": self.failure_category,
            "build_duration_s": self.build_duration_s,
            "validation_exit": self.validation_exit,
            "rounds_used": self.rounds_used,
            "started_at": self.started_at,
            "finished_at": self.finished_at,
            "license_id": self.license_id,
            "application_level": self.application_level,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "AttemptRecord":
        return cls(
            tool_id=d["tool_id"],
            repo_url=d.get("repo_url", ""),
            primary_language=d.get("primary_language", "unknown"),
            artifact_count=int(d["artifact_count"]),
            outcome=d["outcome"],
            failure_category=d.get("failure_category"),
            build_duration_s=float(d["build_duration_s"]),
            validation_exit=d.get("validation_exit"),
            rounds_used=int(d.get("rounds_used", 0)),
            started_at=float(d.get("started_at", 0.0)),
            finished_at=float(d.get("finished_at", 0.0)),
            license_id=d.get("license_id", "unknown"),
            application_level=d.get("application_level", "unknown"),
        )

    def canonical_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


@dataclass
class IngestResult:
    records: list[AttemptRecord]
    diagnostics: list[str] = field(default_factory=list)


def ingest(stream: TextIO | Iterable[str]) -> IngestResult:
    """Parse a JSON-lines trace, collecting per-line diagnostics."""
    records = []
    diagnostics = []
    for lineno, raw in enumerate(stream, start=1):
        line = raw.strip()
        if not line:
            continue
        try:
            payload = json.loads(line)
        except json.JSONDecodeError as exc:
            diagnostics.append(f"line {lineno}: invalid JSON ({exc.msg})")
            continue
        try:
            records.append(AttemptRecord.from_dict(payload))
        except (KeyError, TypeError, ValueError) as exc:
            diagnostics.append(f"line {lineno}: invalid record ({exc})")
    return IngestResult(records=records, diagnostics=diagnostics)


def ingest_path(path: str | Path) -> IngestResult:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise DeployForgeError(f"cannot read trace {path}: {exc}") from exc
    return ingest(text.splitlines())


def nearest_rank(sorted_values: list[float], p: float) -> float:
    """Nearest-rank percentile over an ascending list."""
    if not sorted_values:
        raise ValueError("no values")
    if not 0 < p <= 100:
        raise ValueError("p must lie in (0, 100]")
    rank = math.ceil(p / 100.0 * len(sorted_values))
    return sorted_values[rank - 1]


@dataclass
class CorpusSummary:
    attempts: int
    successes: int
    failures: int
    success_rate: float
    per_language: dict[str, tuple[int, float]]  # language -> (count, success_rate)
    failure_histogram: dict[str, int]
    duration_percentiles: dict[str, float]  # p50, p90, p99, max
    artifact_tiers: dict[str, int]
    per_license: dict[str, int] = field(default_factory=dict)
    per_application_level: dict[str, tuple[int, int]] = field(default_factory=dict)

    @property
    def success_rate_display(self) -> str:
        return f"{self.success_rate * 100:.2f}%"

    def to_dict(self) -> dict[str, Any]:
        return {
            "attempts": self.attempts,
            "successes": self.successes,
            "failures": self.failures,
            "success_rate": self.success_rate,
            "success_rate_display": self.success_rate_display,
            "per_language": {
                k: {"count": c, "success_rate": r}
                for k, (c, r) in sorted(self.per_language.items())
            },
            "failure_histogram": dict(sorted(self.failure_histogram.items())),
            "duration_percentiles": dict(self.duration_percentiles),
            "artifact_tiers": dict(sorted(self.artifact_tiers.items())),
            "per_license": dict(sorted(self.per_license.items())),
            "per_application_level": {
                k: {"successes": s, "failures": f}
                for k, (s, f) in sorted(self.per_application_level.items())
            },
        }


def summarize(records: list[AttemptRecord]) -> CorpusSummary:
    if not records:
        raise EmptySummaryError("cannot summarize an empty record collection")
    successes = sum(1 for r in records if r.outcome == "success")
    failures = len(records) - successes

    lang_counts: dict[str, int] = {}
    lang_successes: dict[str, int] = {}
    histogram: dict[str, int] = {}
    tiers = {"unspecified": 0, "single": 0, "multi": 0}
    licenses: dict[str, int] = {}
    levels: dict[str, list[int]] = {}
    durations = []
    for r in records:
        lang_counts[r.primary_language] = lang_counts.get(r.primary_language, 0) + 1
        if r.outcome == "success":
            lang_successes[r.primary_language] = lang_successes.get(r.primary_language, 0) + 1
        else:
            histogram[r.failure_category] = histogram.get(r.failure_category, 0) + 1
        if r.artifact_count == 0:
            tiers["unspecified"] += 1
        elif r.artifact_count == 1:
            tiers["single"] += 1
        else:
            tiers["multi"] += 1
        licenses[r.license_id] = licenses.get(r.license_id, 0) + 1
        bucket = levels.setdefault(r.application_level, [0, 0])
        bucket[0 if r.outcome == "success" else 1] += 1
        durations.append(r.build_duration_s)
    durations.sort()

    per_language = {
        lang: (count, lang_successes.get(lang, 0) / count)
        for lang, count in lang_counts.items()
    }
    return CorpusSummary(
        attempts=len(records),
        successes=successes,
        failures=failures,
        success_rate=successes / len(records),
        per_language=per_language,
        failure_histogram=histogram,
        duration_percentiles={
            "p50": nearest_rank(durations, 50),
            "p90": nearest_rank(durations, 90),
            "p99": nearest_rank(durations, 99),
            "max": durations[-1],
        },
        artifact_tiers=tiers,
        per_license=licenses,
        per_application_level={k: (v[0], v[1]) for k, v in levels.items()},
    )


def language_breakdown(
    records: list[AttemptRecord],
    min_count: int = DEFAULT_LANGUAGE_MIN_COUNT,
) -> list[tuple[str, int, float]]:
    """(language, count, success_rate) rows, rare languages pooled as 'other'.

    Sorted by count descending, name ascending; the pooled row sorts with
    everything else.
    """
    counts: dict[str, int] = {}
    wins: dict[str, int] = {}
    for r in records:
        counts[r.primary_language] = counts.get(r.primary_language, 0) + 1
        if r.outcome == "success":
            wins[r.primary_language] = wins.get(r.primary_language, 0) + 1
    main_rows = []
    other_count = 0
    other_wins = 0
    for lang, count in counts.items():
        if count < min_count:
            other_count += count
            other_wins += wins.get(lang, 0)
        else:
            main_rows.append((lang, count, wins.get(lang, 0) / count))
    if other_count:
        main_rows.append(("other", other_count, other_wins / other_count))
    main_rows.sort(key=lambda row: (-row[1], row[0]))
    return main_rows


def distinct_language_count(records: list[AttemptRecord]) -> int:
    return len({r.primary_language for r in records})


# ── Rendering ─────────────────────────────────────────────────────────


def _csv_line(*cells: Any) -> str:
    out = []
    for cell in cells:
        text = str(cell)
        if any(ch in text for ch in ",\"\n"):
            text = '"' + text.replace('"', '""') + '"'
        out.append(text)
    return ",".join(out) + "\n"


def render_report(summary: CorpusSummary, fmt: str) -> dict[str, str]:
    """Render a summary; returns {file name: content}, byte-stable.

    ``text`` and ``json`` produce a single document; ``csv`` produces one
    file per aggregate panel (outcome split, licenses, languages, failure
    categories, application levels, success rate by language scale).
    """
    if fmt not in REPORT_FORMATS:
        raise DeployForgeError(f"unknown report format {fmt!r}")
    if fmt == "json":
        return {"report.json": json.dumps(summary.to_dict(), sort_keys=True, indent=2) + "\n"}
    if fmt == "text":
        lines = [
            "deployment summary",
            f"  attempts:     {summary.attempts}",
            f"  successes:    {summary.successes}",
            f"  failures:     {summary.failures}",
            f"  success rate: {summary.success_rate_display}",
            "  build duration percentiles (s):",
        ]
        for key in ("p50", "p90", "p99", "max"):
            lines.append(f"    {key}: {summary.duration_percentiles[key]:g}")
        lines.append("  failure categories:")
        for cat, n in sorted(summary.failure_histogram.items(), key=lambda kv: (-kv[1], kv[0])):
            lines.append(f"    {cat}: {n}")
        lines.append("  build-artifact tiers:")
        for tier in ("unspecified", "single", "multi"):
            lines.append(f"    {tier}: {summary.artifact_tiers[tier]}")
        lines.append("  top languages:")
        top = sorted(summary.per_language.items(), key=lambda kv: (-kv[1][0], kv[0]))[:10]
        for lang, (count, rate) in top:
            lines.append(f"    {lang}: {count} ({rate * 100:.2f}% ok)")
        return {"report.txt": "\n".join(lines) + "\n"}

    by_lang = sorted(summary.per_language.items(), key=lambda kv: (-kv[1][0], kv[0]))
    files = {
        "outcomes.csv": _csv_line("outcome", "count")
        + _csv_line("success", summary.successes)
        + _csv_line("failure", summary.failures),
        "licenses.csv": _csv_line("license", "count")
        + "".join(_csv_line(k, v) for k, v in sorted(
            summary.per_license.items(), key=lambda kv: (-kv[1], kv[0]))),
        "languages.csv": _csv_line("language", "count", "success_rate")
        + "".join(_csv_line(lang, c, f"{r:.6f}") for lang, (c, r) in by_lang),
        "failure_categories.csv": _csv_line("category", "count")
        + "".join(_csv_line(k, v) for k, v in sorted(
            summary.failure_histogram.items(), key=lambda kv: (-kv[1], kv[0]))),
        "application_levels.csv": _csv_line("level", "successes", "failures")
        + "".join(_csv_line(k, s, f) for k, (s, f) in sorted(
            summary.per_application_level.items())),
        "success_by_language_scale.csv": _csv_line("language", "count", "success_rate")
        + "".join(_csv_line(lang, c, f"{r:.6f}") for lang, (c, r) in by_lang),
    }
    return files
