"""Multi-stage candidate discovery funnel.

Stages run in a fixed order and only ever move the pool in one direction:
retrieval and anchor expansion grow it, heuristic and semantic filtering
shrink it. Every rejection lands in exactly one named bucket so the report
always reconciles: members_in - sum(buckets) == members_out for each
filtering stage.
"""

from __future__ import annotations

import json
import re
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .analyzer import classify_manifest, _language_for_suffix
from .clients import (
    GitHostClient,
    GitHostQuery,
    RepoMetadata,
    TextCompletionClient,
    complete_with_budget,
    with_retries,
)
from .errors import DeployForgeError, FatalClientError, RetryableClientError

STAGES = ("raw", "expanded", "tool_like", "executable_candidate")

DEFAULT_MAX_KEYWORDS = 8
DEFAULT_EXPANSION_DEPTH = 1
DEFAULT_FANOUT_CAP = 25

DEFAULT_LICENSE_ALLOWLIST = (
    "mit", "apache-2.0", "bsd-2-clause", "bsd-3-clause", "gpl-2.0", "gpl-3.0",
    "lgpl-2.1", "lgpl-3.0", "mpl-2.0", "agpl-3.0", "isc", "unlicense",
    "cc-by-4.0", "epl-2.0",
)

HEURISTIC_RULES = ("curated_list", "no_executable_content", "archived", "license", "tutorial")

_CURATED_NAME = re.compile(r"(^|/)awesome([-_]|$)", re.IGNORECASE)
_CURATED_DESC = re.compile(r"\b(curated list|list of|awesome list)\b", re.IGNORECASE)
_TUTORIAL_DESC = re.compile(
    r"\b(tutorials?|course(work)?|lectures?|workshop|teaching|homework|lessons?)\b",
    re.IGNORECASE,
)

_SCRIPT_EXTENSIONS = {".sh", ".bash", ".bat", ".ps1"}


@dataclass
class DomainTaxonomy:
    """Domain catalog driving keyword retrieval and later domain assignment."""

    domains: list[tuple[str, str, str]]  # (domain_id, name, definition)
    keyword_map: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        ids = [d[0] for d in self.domains]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate domain_id in taxonomy")

    @classmethod
    def from_file(cls, path: str | Path) -> "DomainTaxonomy":
        data = json.loads(Path(path).read_text(encoding="utf-8"))
        domains = []
        keyword_map = {}
        for d in data["domains"]:
            domains.append((d["id"], d["name"], d.get("definition", "")))
            if d.get("keywords"):
                keyword_map[d["id"]] = [k.lower() for k in d["keywords"]]
        return cls(domains=domains, keyword_map=keyword_map)

    def definitions(self) -> list[tuple[str, str]]:
        return [(did, definition) for did, _, definition in self.domains]


@dataclass
class CandidatePool:
    """De-duplicated repo set at one funnel stage, with full provenance."""

    stage_label: str
    members: dict[str, RepoMetadata] = field(default_factory=dict)
    provenance: dict[str, list[tuple[str, str]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.stage_label not in STAGES:
            raise ValueError(f"unknown stage {self.stage_label!r}")

    def add(self, meta: RepoMetadata, stage: str, reason: str) -> bool:
        fresh = meta.repo_id not in self.members
        if fresh:
            self.members[meta.repo_id] = meta
        self.provenance.setdefault(meta.repo_id, []).append((stage, reason))
        return fresh

    def __len__(self) -> int:
        return len(self.members)

    def sorted_members(self) -> list[RepoMetadata]:
        return [self.members[rid] for rid in sorted(self.members)]

    def advanced(self, stage_label: str) -> "CandidatePool":
        """Copy of this pool relabeled for the next stage."""
        return CandidatePool(
            stage_label,
            members=dict(self.members),
            provenance={k: list(v) for k, v in self.provenance.items()},
        )


@dataclass
class FunnelReport:
    stage_counts: dict[str, int] = field(default_factory=dict)
    rejections: dict[str, int] = field(default_factory=dict)
    stage_seconds: dict[str, float] = field(default_factory=dict)
    fallback_domains: list[str] = field(default_factory=list)
    unclassified: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "stage_counts": dict(self.stage_counts),
            "rejections": dict(sorted(self.rejections.items())),
            "stage_seconds": {k: round(v, 6) for k, v in self.stage_seconds.items()},
            "fallback_domains": sorted(self.fallback_domains),
            "unclassified": sorted(self.unclassified),
            "warnings": list(self.warnings),
        }


# ── Stage 1: keyword expansion ────────────────────────────────────────


def expand_keywords(
    taxonomy: DomainTaxonomy,
    expander: TextCompletionClient,
    max_keywords: int = DEFAULT_MAX_KEYWORDS,
) -> tuple[DomainTaxonomy, list[str]]:
    """Fill the keyword map, one completion per domain.

    Domains that already carry keywords are kept as-is. A domain whose
    expansion fails after retries falls back to its own name as the sole
    keyword; those domain ids are returned so the run report can note them.
    """
    if not taxonomy.domains:
        raise ValueError("taxonomy has no domains")
    keyword_map = dict(taxonomy.keyword_map)
    fallbacks = []
    for domain_id, name, definition in taxonomy.domains:
        if keyword_map.get(domain_id):
            continue
        context = {
            "task": "expand_keywords",
            "domain_id": domain_id,
            "name": name,
            "definition": definition,
            "max_keywords": max_keywords,
        }
        try:
            exchange = complete_with_budget(expander, "proposer", context)
            raw = [k.strip().lower() for k in exchange.response_text.split(";")]
            seen: list[str] = []
            for k in raw:
                if k and k not in seen:
                    seen.append(k)
            keywords = seen[:max_keywords] or [name.lower()]
        except (RetryableClientError, FatalClientError):
            keywords = [name.lower()]
            fallbacks.append(domain_id)
        keyword_map[domain_id] = keywords
    return DomainTaxonomy(domains=list(taxonomy.domains), keyword_map=keyword_map), fallbacks


# ── Stage 2: recall-oriented retrieval ────────────────────────────────


def retrieve_pool(
    taxonomy: DomainTaxonomy,
    host: GitHostClient,
    report: FunnelReport | None = None,
) -> CandidatePool:
    pool = CandidatePool("raw")
    for domain_id, _, _ in taxonomy.domains:
        keywords = taxonomy.keyword_map.get(domain_id, [])
        for keyword in keywords:
            cursor = None
            while True:
                query = GitHostQuery(keywords=(keyword,), page_cursor=cursor)
                try:
                    page, cursor = with_retries(lambda: host.search_repositories(query))
                except RetryableClientError as exc:
                    if report is not None:
                        report.warnings.append(f"retrieval degraded for {keyword!r}: {exc}")
                    break
                for meta in page:
                    pool.add(meta, "raw", f"keyword:{keyword}")
                if cursor is None:
                    break
    return pool


# ── Stage 3: anchor expansion ─────────────────────────────────────────


def expand_anchors(
    pool: CandidatePool,
    host: GitHostClient,
    depth: int = DEFAULT_EXPANSION_DEPTH,
    fanout_cap: int = DEFAULT_FANOUT_CAP,
    report: FunnelReport | None = None,
) -> CandidatePool:
    """Grow the pool along dependency/reference/contributor/link edges.

    Bounded breadth-first walk: a visited set makes cycles terminate, depth
    and a per-anchor fan-out cap bound the work. Never removes members.
    """
    if pool.stage_label != "raw":
        raise ValueError(f"anchor expansion expects a raw pool, got {pool.stage_label}")
    out = pool.advanced("expanded")
    if depth <= 0:
        return out
    visited: set[str] = set()
    frontier = sorted(out.members)
    for _ in range(depth):
        next_frontier = []
        for anchor_id in frontier:
            if anchor_id in visited:
                continue
            visited.add(anchor_id)
            try:
                neighbors = with_retries(lambda: host.related_repositories(anchor_id))
            except RetryableClientError as exc:
                if report is not None:
                    report.warnings.append(f"anchor {anchor_id} skipped: {exc}")
                continue
            for meta, edge in neighbors[:fanout_cap]:
                if out.add(meta, "expanded", f"{edge} of {anchor_id}"):
                    next_frontier.append(meta.repo_id)
        frontier = sorted(next_frontier)
    return out


# ── Stage 4: heuristic filtering ──────────────────────────────────────


def _has_executable_content(tree_paths: list[str]) -> bool:
    for rel in tree_paths:
        p = Path(rel)
        if _language_for_suffix(p.suffix) is not None:
            return True
        if p.suffix.lower() in _SCRIPT_EXTENSIONS:
            return True
        if classify_manifest(rel) is not None:
            return True
    return False


def _has_build_manifest(tree_paths: list[str]) -> bool:
    return any(
        classify_manifest(rel) not in (None, "ci_workflow") for rel in tree_paths
    )


def heuristic_rejection(
    meta: RepoMetadata,
    license_allowlist: tuple[str, ...] = DEFAULT_LICENSE_ALLOWLIST,
    allow_unknown_license: bool = True,
) -> str | None:
    """First matching rejection rule id, or None when the repo survives.

    Rules fire in a fixed order so each rejection has exactly one bucket:
    curated_list, no_executable_content, archived, license, tutorial.
    A missing tree listing never rejects (recall over precision).
    """
    if _CURATED_NAME.search(meta.repo_id) or _CURATED_DESC.search(meta.description):
        return "curated_list"
    if meta.tree_paths is not None and not _has_executable_content(meta.tree_paths):
        return "no_executable_content"
    if meta.is_archived:
        return "archived"
    lic = meta.license_id.lower()
    if lic not in license_allowlist and not (lic == "unknown" and allow_unknown_license):
        return "license"
    if _TUTORIAL_DESC.search(meta.description):
        if meta.tree_paths is not None and not _has_build_manifest(meta.tree_paths):
            return "tutorial"
    return None


def heuristic_filter(
    pool: CandidatePool,
    license_allowlist: tuple[str, ...] = DEFAULT_LICENSE_ALLOWLIST,
    allow_unknown_license: bool = True,
    report: FunnelReport | None = None,
) -> CandidatePool:
    if pool.stage_label not in ("expanded", "raw"):
        raise ValueError(f"heuristic filter expects expanded or raw pool, got {pool.stage_label}")
    out = CandidatePool("tool_like")
    for meta in pool.sorted_members():
        rule = heuristic_rejection(meta, license_allowlist, allow_unknown_license)
        if rule is None:
            out.members[meta.repo_id] = meta
            out.provenance[meta.repo_id] = list(pool.provenance.get(meta.repo_id, []))
            out.provenance[meta.repo_id].append(("tool_like", "passed heuristics"))
        elif report is not None:
            report.rejections[f"heuristic:{rule}"] = (
                report.rejections.get(f"heuristic:{rule}", 0) + 1
            )
    return out


# ── Stage 5: semantic filtering ───────────────────────────────────────


def _file_summary(meta: RepoMetadata) -> str:
    if not meta.tree_paths:
        return "no file listing"
    counts: dict[str, int] = {}
    for rel in meta.tree_paths:
        suffix = Path(rel).suffix.lower() or "(none)"
        counts[suffix] = counts.get(suffix, 0) + 1
    parts = [f"{suffix}:{n}" for suffix, n in sorted(counts.items())]
    return " ".join(parts)


def classifier_context(meta: RepoMetadata) -> dict[str, Any]:
    return {
        "task": "classify_tool",
        "repo_id": meta.repo_id,
        "description": meta.description,
        "topics": sorted(meta.topics),
        "file_summary": _file_summary(meta),
    }


def parse_tool_label(response_text: str) -> str:
    """Map a classifier response to keep / reject / unclassified."""
    text = response_text.strip().lower()
    if text.startswith("not"):
        return "reject"
    if "tool" in text:
        return "keep"
    return "unclassified"


def semantic_filter(
    pool: CandidatePool,
    classifier: TextCompletionClient,
    report: FunnelReport | None = None,
) -> CandidatePool:
    """Keep repos the classifier labels as executable tools.

    Classifier failure retains the repo with an unclassified flag: a flaky
    model call must never silently drop a candidate.
    """
    if pool.stage_label != "tool_like":
        raise ValueError(f"semantic filter expects a tool_like pool, got {pool.stage_label}")
    out = CandidatePool("executable_candidate")
    for meta in pool.sorted_members():
        context = classifier_context(meta)
        try:
            exchange = complete_with_budget(classifier, "reviewer", context)
            label = parse_tool_label(exchange.response_text)
        except (RetryableClientError, FatalClientError):
            label = "unclassified"
        if label == "reject":
            if report is not None:
                report.rejections["semantic:not_tool"] = (
                    report.rejections.get("semantic:not_tool", 0) + 1
                )
            continue
        out.members[meta.repo_id] = meta
        out.provenance[meta.repo_id] = list(pool.provenance.get(meta.repo_id, []))
        if label == "unclassified":
            out.provenance[meta.repo_id].append(("executable_candidate", "unclassified"))
            if report is not None:
                report.unclassified.append(meta.repo_id)
        else:
            out.provenance[meta.repo_id].append(("executable_candidate", "classified tool"))
    return out


# ── Full funnel ───────────────────────────────────────────────────────


def run_funnel(
    taxonomy: DomainTaxonomy,
    host: GitHostClient,
    classifier: TextCompletionClient,
    expander: TextCompletionClient | None = None,
    max_keywords: int = DEFAULT_MAX_KEYWORDS,
    expansion_depth: int = DEFAULT_EXPANSION_DEPTH,
    fanout_cap: int = DEFAULT_FANOUT_CAP,
    license_allowlist: tuple[str, ...] = DEFAULT_LICENSE_ALLOWLIST,
    allow_unknown_license: bool = True,
    skip_expansion: bool = False,
    final_stage: str = "executable_candidate",
    clock=time.perf_counter,
) -> tuple[CandidatePool, FunnelReport]:
    """All funnel stages in order, with per-stage accounting."""
    if final_stage not in STAGES:
        raise DeployForgeError(f"unknown funnel stage {final_stage!r}")
    report = FunnelReport()

    if expander is not None:
        expanded_taxonomy, fallbacks = expand_keywords(taxonomy, expander, max_keywords)
        report.fallback_domains = fallbacks
    else:
        expanded_taxonomy = DomainTaxonomy(domains=list(taxonomy.domains),
                                           keyword_map=dict(taxonomy.keyword_map))
    for domain_id, name, _ in expanded_taxonomy.domains:
        if not expanded_taxonomy.keyword_map.get(domain_id):
            expanded_taxonomy.keyword_map[domain_id] = [name.lower()]

    t0 = clock()
    pool = retrieve_pool(expanded_taxonomy, host, report)
    report.stage_seconds["raw"] = clock() - t0
    report.stage_counts["raw"] = len(pool)
    if final_stage == "raw":
        return pool, report

    t0 = clock()
    if skip_expansion:
        pool = pool.advanced("expanded")
    else:
        pool = expand_anchors(pool, host, expansion_depth, fanout_cap, report)
    report.stage_seconds["expanded"] = clock() - t0
    report.stage_counts["expanded"] = len(pool)
    if final_stage == "expanded":
        return pool, report

    t0 = clock()
    pool = heuristic_filter(pool, license_allowlist, allow_unknown_license, report)
    report.stage_seconds["tool_like"] = clock() - t0
    report.stage_counts["tool_like"] = len(pool)
    if final_stage == "tool_like":
        return pool, report

    t0 = clock()
    pool = semantic_filter(pool, classifier, report)
    report.stage_seconds["executable_candidate"] = clock() - t0
    report.stage_counts["executable_candidate"] = len(pool)
    return pool, report
