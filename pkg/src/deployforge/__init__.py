"""deployforge: repositories in, execution-validated containerized tools out."""

from .analytics import AttemptRecord, CorpusSummary, ingest, summarize
from .analyzer import ArtifactInventory, EvidenceBundle, RepoSnapshot
from .buildspec import BuildSpec, parse, render
from .clients import GitHostQuery, RepoMetadata, TextExchange
from .executor import BuildResult, ExecutionLimits, ValidationResult, classify_failure
from .funnel import CandidatePool, DomainTaxonomy, FunnelReport, run_funnel
from .registry import ToolEntry, ToolRegistry, assign_domains
from .scheduler import BudgetState, Scheduler, WorkItem
from .specengine import DebateTranscript, ReviewFinding, refine_loop

__version__ = "0.1.0"

__all__ = [
    "AttemptRecord", "CorpusSummary", "ingest", "summarize",
    "ArtifactInventory", "EvidenceBundle", "RepoSnapshot",
    "BuildSpec", "parse", "render",
    "GitHostQuery", "RepoMetadata", "TextExchange",
    "BuildResult", "ExecutionLimits", "ValidationResult", "classify_failure",
    "CandidatePool", "DomainTaxonomy", "FunnelReport", "run_funnel",
    "ToolEntry", "ToolRegistry", "assign_domains",
    "BudgetState", "Scheduler", "WorkItem",
    "DebateTranscript", "ReviewFinding", "refine_loop",
]
