"""Registry of execution-validated tools.

Backing store is an append-only JSON-lines file with an in-memory index;
registration is atomic (a line is written and flushed entirely or not at
all) and idempotent, with divergent re-registration for the same tool id
treated as a conflict. Only validated tools ever reach the store.

Domain assignment follows cosine similarity between the tool description
embedding and each domain definition embedding, keeping every domain at or
above the threshold — multi-label on purpose, overlapping disciplines are
the norm.
"""

from __future__ import annotations

import json
import math
import threading
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .clients import EmbeddingClient
from .errors import RegistryConflictError, UnknownToolError
from .funnel import DomainTaxonomy

SCHEMA_VERSION = 1

DEFAULT_DOMAIN_THRESHOLD = 0.5

# registered_at for deterministic runs; real-clock mode passes a timestamp
FIXED_EPOCH = "1970-01-01T00:00:00Z"


def cosine(u: list[float], v: list[float]) -> float:
    """Cosine similarity; zero vectors compare as 0, identical ones as 1."""
    if len(u) != len(v):
        raise ValueError("vector dimensions differ")
    if u == v:
        nonzero = any(x != 0.0 for x in u)
        return 1.0 if nonzero else 0.0
    dot = sum(a * b for a, b in zip(u, v))
    nu = math.sqrt(sum(a * a for a in u))
    nv = math.sqrt(sum(b * b for b in v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return dot / (nu * nv)


def tool_id_for(repo_id: str, commit_id: str) -> str:
    return f"{repo_id}@{commit_id}"


@dataclass
class ToolEntry:
    tool_id: str
    name: str
    description: str
    entrypoint: tuple[str, ...]
    image_digest: str
    tags: list[str] = field(default_factory=list)
    domains: list[tuple[str, float]] = field(default_factory=list)
    primary_language: str = "unknown"
    validated: bool = True
    pending_assignment: bool = False
    registered_at: str = FIXED_EPOCH

    def __post_init__(self) -> None:
        if not self.validated:
            raise ValueError("only execution-validated tools can become entries")

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "tool_id": self.tool_id,
            "name": self.name,
            "description": self.description,
            "entrypoint": list(self.entrypoint),
            "image_digest": self.image_digest,
            "tags": list(self.tags),
            "domains": [[d, s] for d, s in self.domains],
            "primary_language": self.primary_language,
            "validated": self.validated,
            "pending_assignment": self.pending_assignment,
            "registered_at": self.registered_at,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "ToolEntry":
        return cls(
            tool_id=d["tool_id"],
            name=d["name"],
            description=d.get("description", ""),
            entrypoint=tuple(d.get("entrypoint", [])),
            image_digest=d["image_digest"],
            tags=list(d.get("tags", [])),
            domains=[(x[0], float(x[1])) for x in d.get("domains", [])],
            primary_language=d.get("primary_language", "unknown"),
            validated=d.get("validated", True),
            pending_assignment=d.get("pending_assignment", False),
            registered_at=d.get("registered_at", FIXED_EPOCH),
        )

    def canonical_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")) + "\n"


def assign_domains(
    description: str,
    taxonomy: DomainTaxonomy,
    embedder: EmbeddingClient,
    threshold: float = DEFAULT_DOMAIN_THRESHOLD,
) -> list[tuple[str, float]]:
    """Domains whose definition embedding is at least ``threshold`` close."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    if not description:
        return []
    desc_vec = embedder.embed_text(description)
    assigned = []
    for domain_id, definition in taxonomy.definitions():
        if not definition:
            continue
        score = cosine(desc_vec, embedder.embed_text(definition))
        if score >= threshold:
            assigned.append((domain_id, score))
    assigned.sort(key=lambda pair: (-pair[1], pair[0]))
    return assigned


class ToolRegistry:
    """JSON-lines store plus in-memory index; writes serialized by a lock."""

    def __init__(self, store_path: str | Path):
        self._path = Path(store_path)
        self._lock = threading.Lock()
        self._entries: dict[str, ToolEntry] = {}
        if self._path.exists():
            for line in self._path.read_text(encoding="utf-8").splitlines():
                if not line.strip():
                    continue
                entry = ToolEntry.from_dict(json.loads(line))
                self._entries[entry.tool_id] = entry

    def __len__(self) -> int:
        return len(self._entries)

    def entries(self) -> list[ToolEntry]:
        return [self._entries[tid] for tid in sorted(self._entries)]

    def get(self, tool_id: str) -> ToolEntry:
        entry = self._entries.get(tool_id)
        if entry is None:
            raise UnknownToolError(f"no registered tool {tool_id!r}")
        return entry

    def register(self, entry: ToolEntry) -> ToolEntry:
        """Persist an entry; identical re-registration is a byte-level no-op."""
        with self._lock:
            existing = self._entries.get(entry.tool_id)
            if existing is not None:
                if existing.canonical_line() == entry.canonical_line():
                    return existing
                raise RegistryConflictError(
                    f"tool {entry.tool_id} already registered with different content"
                )
            self._path.parent.mkdir(parents=True, exist_ok=True)
            with self._path.open("a", encoding="utf-8") as fh:
                fh.write(entry.canonical_line())
                fh.flush()
            self._entries[entry.tool_id] = entry
            return entry

    def search(
        self,
        query: str,
        embedder: EmbeddingClient,
        domain: str | None = None,
        tag: str | None = None,
        language: str | None = None,
        limit: int = 20,
    ) -> list[tuple[float, ToolEntry]]:
        """Rank by description similarity; filters apply conjunctively."""
        candidates = []
        for entry in self.entries():
            if domain is not None and domain not in {d for d, _ in entry.domains}:
                continue
            if tag is not None and tag not in entry.tags:
                continue
            if language is not None and entry.primary_language != language:
                continue
            candidates.append(entry)
        if not query:
            return [(0.0, e) for e in candidates[:limit]]
        query_vec = embedder.embed_text(query)
        scored = [
            (cosine(query_vec, embedder.embed_text(e.description or e.name)), e)
            for e in candidates
        ]
        scored.sort(key=lambda pair: (-pair[0], pair[1].tool_id))
        return scored[:limit]

    def export_manifest(self, tool_id: str) -> str:
        """Byte-stable machine-readable manifest for one tool."""
        entry = self.get(tool_id)
        doc = {
            "schema_version": SCHEMA_VERSION,
            "tool_id": entry.tool_id,
            "name": entry.name,
            "description": entry.description,
            "entrypoint": list(entry.entrypoint),
            "image_digest": entry.image_digest,
            "domains": [[d, s] for d, s in entry.domains],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
