"""Boundary interfaces to external services, plus deterministic offline mocks.

Every network-facing capability the pipeline needs — repository search, web
snippet retrieval, text completion, embeddings — is expressed as a small
client interface here. No other module is allowed to talk to the outside
world. The mock implementations are pure functions of their constructor
fixtures and call arguments, so two processes on the same fixture tree give
byte-identical results.

Fixture formats:
  * repository metadata: JSON-lines, one repo per line (``repos.jsonl``),
    with an optional ``edges.json`` sidecar listing related-repo edges
  * supplemental snippets: a directory of text files plus ``index.json``
    mapping query string -> ranked list of file names
  * completions: JSON map from ``"<role>:<context digest>"`` to response text
  * embeddings: JSON list of vocabulary terms
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
import re
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Protocol

from .errors import (
    BudgetExceededError,
    InvalidCursorError,
    ProviderError,
    RateLimitError,
    RetryableClientError,
)

EDGE_TYPES = ("dependency", "reference", "contributor", "link")

# Fixed response the mock reviewer gives for any context it has no scripted
# objection to; this is what makes mock debate loops converge.
NO_OBJECTIONS = "no objections"


@dataclass(frozen=True)
class GitHostQuery:
    """One page request against a repository host."""

    keywords: tuple[str, ...]
    filters: dict[str, Any] = field(default_factory=dict)
    page_cursor: str | None = None

    def __post_init__(self) -> None:
        if not self.keywords:
            raise ValueError("GitHostQuery requires at least one keyword")


@dataclass
class RepoMetadata:
    """Host-level metadata for one candidate repository.

    ``tree_paths`` is the enrichment slot: stages that have host access fill
    it with the repository file listing so later, host-free stages can apply
    structural rules. ``local_path`` points at an on-disk checkout when the
    corpus is a local fixture tree.
    """

    repo_id: str
    url: str
    license_id: str = "unknown"
    primary_language: str = "unknown"
    star_count: int = 0
    is_archived: bool = False
    description: str = ""
    topics: list[str] = field(default_factory=list)
    tree_paths: list[str] | None = None
    local_path: str | None = None

    def __post_init__(self) -> None:
        if self.star_count < 0:
            raise ValueError(f"star_count must be >= 0, got {self.star_count}")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "repo_id": self.repo_id,
            "url": self.url,
            "license_id": self.license_id,
            "primary_language": self.primary_language,
            "star_count": self.star_count,
            "is_archived": self.is_archived,
            "description": self.description,
            "topics": list(self.topics),
        }
        if self.tree_paths is not None:
            d["tree_paths"] = list(self.tree_paths)
        if self.local_path is not None:
            d["local_path"] = self.local_path
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "RepoMetadata":
        known = {
            "repo_id", "url", "license_id", "primary_language", "star_count",
            "is_archived", "description", "topics", "tree_paths", "local_path",
        }
        return cls(**{k: v for k, v in d.items() if k in known})


@dataclass
class TextExchange:
    """One completed call to a text-generation model."""

    role: str  # "proposer" | "reviewer"
    prompt_context: dict[str, Any]
    response_text: str

    def __post_init__(self) -> None:
        if self.role not in ("proposer", "reviewer"):
            raise ValueError(f"role must be proposer or reviewer, got {self.role!r}")


def context_digest(prompt_context: dict[str, Any]) -> str:
    """Canonical sha256 over a prompt context; keys the mock completion table."""
    canon = json.dumps(prompt_context, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()


# ── Client interfaces ─────────────────────────────────────────────────


class GitHostClient(Protocol):
    def search_repositories(
        self, query: GitHostQuery
    ) -> tuple[list[RepoMetadata], str | None]:
        """Return one page of matches and an optional continuation cursor."""
        ...

    def related_repositories(
        self, repo_id: str
    ) -> list[tuple[RepoMetadata, str]]:
        """Return (repo, edge_type) neighbors of an anchor repository."""
        ...


class SearchClient(Protocol):
    def fetch_supplemental(self, query: str) -> list[tuple[str, str]]:
        """Return (source_url, extracted_text) snippets, best match first."""
        ...


class TextCompletionClient(Protocol):
    def complete_text(self, role: str, prompt_context: dict[str, Any]) -> TextExchange:
        ...


class EmbeddingClient(Protocol):
    def embed_text(self, text: str) -> list[float]:
        ...


# ── Retry policy ──────────────────────────────────────────────────────

DEFAULT_RETRY_ATTEMPTS = 3


def with_retries(
    fn: Callable[[], Any],
    attempts: int = DEFAULT_RETRY_ATTEMPTS,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] | None = None,
) -> Any:
    """Run ``fn``, retrying transient errors with exponential backoff.

    Only RetryableClientError subclasses are retried, at most ``attempts``
    total tries; a rate-limit wait hint overrides the computed backoff.
    Fatal errors propagate immediately.
    """
    if attempts < 1:
        raise ValueError("attempts must be >= 1")
    if sleep is None:
        sleep = time.sleep
    last: RetryableClientError | None = None
    for i in range(attempts):
        try:
            return fn()
        except RetryableClientError as exc:
            last = exc
            if i == attempts - 1:
                break
            wait = exc.wait_hint_s if exc.wait_hint_s is not None else backoff_s * (2 ** i)
            sleep(wait)
    assert last is not None
    raise last


def complete_with_budget(
    client: "TextCompletionClient",
    role: str,
    prompt_context: dict[str, Any],
    attempts: int = DEFAULT_RETRY_ATTEMPTS,
    backoff_s: float = 0.5,
    sleep: Callable[[float], None] | None = None,
) -> "TextExchange":
    """Completion call with a bounded retry budget.

    A provider that stays down through every attempt exhausts the call
    budget for this attempt, which is fatal rather than retryable.
    """
    try:
        return with_retries(
            lambda: client.complete_text(role, prompt_context),
            attempts=attempts, backoff_s=backoff_s, sleep=sleep,
        )
    except RetryableClientError as exc:
        raise BudgetExceededError(
            f"completion budget exhausted after {attempts} attempts: {exc}"
        ) from exc


# ── Mock clients ──────────────────────────────────────────────────────


def _encode_cursor(offset: int, query_key: str) -> str:
    raw = json.dumps({"o": offset, "q": query_key}).encode("ascii")
    return base64.urlsafe_b64encode(raw).decode("ascii")


def _decode_cursor(cursor: str, query_key: str) -> int:
    try:
        raw = json.loads(base64.urlsafe_b64decode(cursor.encode("ascii")))
    except Exception as exc:
        raise InvalidCursorError(f"malformed cursor {cursor!r}") from exc
    if raw.get("q") != query_key:
        raise InvalidCursorError("cursor was issued for a different query")
    return int(raw["o"])


class MockGitHost:
    """Repository host backed by a fixture directory.

    Keyword matching is a case-insensitive substring test against the repo
    name, description, and topics. Results come back sorted by repo_id so
    pagination is stable regardless of fixture file order.
    """

    def __init__(self, fixture_dir: str | Path, page_size: int = 100):
        root = Path(fixture_dir)
        self.page_size = page_size
        self._repos: dict[str, RepoMetadata] = {}
        repos_file = root / "repos.jsonl"
        if not repos_file.exists():
            raise FileNotFoundError(f"missing fixture file {repos_file}")
        for line in repos_file.read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            meta = RepoMetadata.from_dict(json.loads(line))
            if meta.repo_id in self._repos:
                raise ValueError(f"duplicate repo_id in fixtures: {meta.repo_id}")
            self._repos[meta.repo_id] = meta
        self._edges: dict[str, list[tuple[str, str]]] = {}
        edges_file = root / "edges.json"
        if edges_file.exists():
            for edge in json.loads(edges_file.read_text(encoding="utf-8")):
                if edge["edge"] not in EDGE_TYPES:
                    raise ValueError(f"unknown edge type {edge['edge']!r}")
                self._edges.setdefault(edge["src"], []).append((edge["dst"], edge["edge"]))

    def _matches(self, meta: RepoMetadata, keywords: tuple[str, ...]) -> bool:
        haystack = " ".join([meta.repo_id, meta.description, *meta.topics]).lower()
        return any(k.lower() in haystack for k in keywords)

    def matching_keywords(self, meta: RepoMetadata, keywords: list[str]) -> list[str]:
        haystack = " ".join([meta.repo_id, meta.description, *meta.topics]).lower()
        return [k for k in keywords if k.lower() in haystack]

    def search_repositories(
        self, query: GitHostQuery
    ) -> tuple[list[RepoMetadata], str | None]:
        query_key = context_digest({"keywords": sorted(query.keywords)})
        hits = sorted(
            (m for m in self._repos.values() if self._matches(m, query.keywords)),
            key=lambda m: m.repo_id,
        )
        offset = 0
        if query.page_cursor is not None:
            offset = _decode_cursor(query.page_cursor, query_key)
        page = hits[offset : offset + self.page_size]
        next_cursor = None
        if offset + self.page_size < len(hits):
            next_cursor = _encode_cursor(offset + self.page_size, query_key)
        return page, next_cursor

    def related_repositories(self, repo_id: str) -> list[tuple[RepoMetadata, str]]:
        out = []
        for dst, edge in self._edges.get(repo_id, []):
            meta = self._repos.get(dst)
            if meta is not None:
                out.append((meta, edge))
        return out


class MockSearch:
    """Supplemental web search resolved against a local snippet directory."""

    def __init__(self, fixture_dir: str | Path):
        self._root = Path(fixture_dir)
        index_file = self._root / "index.json"
        self._index: dict[str, list[str]] = {}
        if index_file.exists():
            self._index = json.loads(index_file.read_text(encoding="utf-8"))

    def fetch_supplemental(self, query: str) -> list[tuple[str, str]]:
        if not query:
            raise ValueError("query must be non-empty")
        results = []
        for name in self._index.get(query, []):
            text = (self._root / name).read_text(encoding="utf-8")
            results.append((f"fixture://{name}", text))
        return results


class MockTextCompleter:
    """Deterministic completion lookup keyed on (role, context digest).

    Unscripted reviewer contexts get the fixed no-objections response; an
    unscripted proposer context is a provider error, since the proposer is
    expected to produce content the fixtures must define.
    """

    def __init__(self, table: dict[str, str] | None = None):
        self._table = dict(table or {})

    @classmethod
    def from_file(cls, path: str | Path) -> "MockTextCompleter":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    @staticmethod
    def table_key(role: str, prompt_context: dict[str, Any]) -> str:
        return f"{role}:{context_digest(prompt_context)}"

    def complete_text(self, role: str, prompt_context: dict[str, Any]) -> TextExchange:
        key = self.table_key(role, prompt_context)
        if key in self._table:
            return TextExchange(role, prompt_context, self._table[key])
        if role == "reviewer":
            return TextExchange(role, prompt_context, NO_OBJECTIONS)
        raise ProviderError(f"no scripted completion for {key}")


class FailingTextCompleter:
    """Completer that always fails transiently; exercises budget fallbacks."""

    def __init__(self, message: str = "scripted provider outage"):
        self._message = message
        self.calls = 0

    def complete_text(self, role: str, prompt_context: dict[str, Any]) -> TextExchange:
        self.calls += 1
        raise ProviderError(self._message)


_TOKEN_RE = re.compile(r"[a-z0-9]+")


class MockEmbedder:
    """L2-normalized term-frequency vectors over a committed vocabulary."""

    def __init__(self, vocabulary: list[str]):
        if len(set(vocabulary)) != len(vocabulary):
            raise ValueError("vocabulary terms must be unique")
        self._index = {term: i for i, term in enumerate(vocabulary)}
        self.dimension = len(vocabulary)

    @classmethod
    def from_file(cls, path: str | Path) -> "MockEmbedder":
        return cls(json.loads(Path(path).read_text(encoding="utf-8")))

    def embed_text(self, text: str) -> list[float]:
        if not text:
            raise ValueError("cannot embed empty text")
        vec = [0.0] * self.dimension
        for token in _TOKEN_RE.findall(text.lower()):
            idx = self._index.get(token)
            if idx is not None:
                vec[idx] += 1.0
        norm = math.sqrt(sum(v * v for v in vec))
        if norm > 0.0:
            vec = [v / norm for v in vec]
        return vec


class RateLimitedGitHost:
    """Wraps a host client with a synchronized token-bucket rate limiter.

    Client instances stay shareable across workers: the only mutable state
    is guarded by a lock.
    """

    def __init__(self, inner: GitHostClient, max_calls: int, per_seconds: float,
                 clock: Callable[[], float] = time.monotonic):
        self._inner = inner
        self._max_calls = max_calls
        self._per_seconds = per_seconds
        self._clock = clock
        self._lock = threading.Lock()
        self._window_start = clock()
        self._calls = 0

    def _take_slot(self) -> None:
        with self._lock:
            now = self._clock()
            if now - self._window_start >= self._per_seconds:
                self._window_start = now
                self._calls = 0
            if self._calls >= self._max_calls:
                wait = self._per_seconds - (now - self._window_start)
                raise RateLimitError("host rate window exhausted", wait_hint_s=max(wait, 0.0))
            self._calls += 1

    def search_repositories(self, query: GitHostQuery):
        self._take_slot()
        return self._inner.search_repositories(query)

    def related_repositories(self, repo_id: str):
        self._take_slot()
        return self._inner.related_repositories(repo_id)
