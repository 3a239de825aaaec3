"""Repository ingestion and evidence extraction.

Turns a checkout into an immutable snapshot, inventories build-system
manifests, profiles languages by byte share, and assembles the evidence
bundle that recipe inference works from. Everything repo-local here is a
pure function of the snapshot bytes; supplemental search is the one
client-backed step and degrades gracefully when the client fails.
"""

from __future__ import annotations

import hashlib
import re
import shutil
import subprocess
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from .clients import RepoMetadata, SearchClient, with_retries
from .errors import NetworkError, ResourceLimitError, RetryableClientError

SCHEMA_VERSION = 1

DEFAULT_FILE_CAP_BYTES = 64 * 1024
DEFAULT_REPO_CAP_BYTES = 2 * 1024 * 1024 * 1024
TRUNCATION_MARKER = "\n[truncated]"

FILE_KINDS = ("source", "doc", "manifest", "ci", "container_recipe", "data", "other")

# Byte-share language profiling uses this extension table. The mapping is a
# convention of this pipeline, not a claim about the ecosystems; ties in the
# argmax break lexicographically.
LANGUAGE_BY_EXTENSION = {
    ".py": "Python",
    ".ipynb": "Jupyter Notebook",
    ".c": "C",
    ".h": "C",
    ".cpp": "C++", ".cc": "C++", ".cxx": "C++", ".hpp": "C++",
    ".r": "R", ".R": "R",
    ".java": "Java",
    ".js": "JavaScript",
    ".ts": "TypeScript",
    ".go": "Go",
    ".rs": "Rust",
    ".f": "Fortran", ".f77": "Fortran", ".f90": "Fortran", ".f95": "Fortran", ".F90": "Fortran",
    ".jl": "Julia",
    ".m": "MATLAB",
    ".sh": "Shell",
    ".pl": "Perl",
    ".rb": "Ruby",
    ".scala": "Scala",
    ".cs": "C#",
    ".swift": "Swift",
    ".kt": "Kotlin",
    ".lua": "Lua",
    ".cu": "CUDA",
    ".hs": "Haskell",
    ".pas": "Pascal",
    ".tcl": "Tcl",
}

MANIFEST_KINDS = (
    "python_setup", "python_project", "python_requirements", "make", "cmake",
    "autotools", "node_package", "rust_manifest", "java_build",
    "container_recipe", "ci_workflow", "other",
)

# Exact-name rules first, then pattern rules; first match wins.
_MANIFEST_BY_NAME = {
    "setup.py": "python_setup",
    "setup.cfg": "python_setup",
    "pyproject.toml": "python_project",
    "makefile": "make",
    "gnumakefile": "make",
    "cmakelists.txt": "cmake",
    "configure.ac": "autotools",
    "configure.in": "autotools",
    "makefile.am": "autotools",
    "package.json": "node_package",
    "cargo.toml": "rust_manifest",
    "pom.xml": "java_build",
    "build.gradle": "java_build",
    "build.gradle.kts": "java_build",
    "dockerfile": "container_recipe",
    "containerfile": "container_recipe",
    "environment.yml": "other",
    "environment.yaml": "other",
    "pipfile": "other",
    "go.mod": "other",
    "meson.build": "other",
}

_CI_NAMES = {".gitlab-ci.yml", ".travis.yml", "azure-pipelines.yml", "jenkinsfile"}

_DOC_EXTENSIONS = {".md", ".rst", ".txt", ".adoc", ".tex"}
_DOC_BARE_NAMES = {"readme", "license", "copying", "changelog", "authors",
                   "contributing", "install", "notice", "citation"}
_DATA_EXTENSIONS = {".csv", ".tsv", ".json", ".yaml", ".yml", ".dat", ".npz",
                    ".h5", ".hdf5", ".fits", ".pdb", ".xyz", ".png", ".jpg",
                    ".svg", ".pkl", ".parquet", ".mat", ".nc", ".xml", ".toml"}

README_NAMES = ("readme.md", "readme.rst", "readme.txt", "readme")


def classify_manifest(rel_path: str) -> str | None:
    """Manifest kind for one path, or None when it is not a manifest."""
    p = Path(rel_path)
    name = p.name.lower()
    parts = [s.lower() for s in p.parts]
    if name in _CI_NAMES:
        return "ci_workflow"
    if ".github" in parts and "workflows" in parts and name.endswith((".yml", ".yaml")):
        return "ci_workflow"
    if name in _MANIFEST_BY_NAME:
        return _MANIFEST_BY_NAME[name]
    if name.endswith(".dockerfile"):
        return "container_recipe"
    if name.startswith("requirements") and name.endswith(".txt"):
        return "python_requirements"
    return None


def _language_for_suffix(suffix: str) -> str | None:
    return LANGUAGE_BY_EXTENSION.get(suffix) or LANGUAGE_BY_EXTENSION.get(suffix.lower())


def classify_file(rel_path: str) -> str:
    """File kind used by the snapshot index; manifest rules take priority."""
    manifest_kind = classify_manifest(rel_path)
    if manifest_kind == "ci_workflow":
        return "ci"
    if manifest_kind == "container_recipe":
        return "container_recipe"
    if manifest_kind is not None:
        return "manifest"
    p = Path(rel_path)
    if _language_for_suffix(p.suffix) is not None:
        return "source"
    if p.suffix.lower() in _DOC_EXTENSIONS or p.name.lower() in _DOC_BARE_NAMES:
        return "doc"
    if p.suffix.lower() in _DATA_EXTENSIONS:
        return "data"
    return "other"


@dataclass
class RepoSnapshot:
    """Immutable local checkout plus its file index."""

    repo_id: str
    checkout_path: Path
    commit_id: str
    file_index: list[tuple[str, int, str]]  # (relative path, size bytes, kind)

    def paths(self) -> list[str]:
        return [p for p, _, _ in self.file_index]

    def read_text(self, rel_path: str, cap: int | None = None) -> str:
        text = (self.checkout_path / rel_path).read_text(encoding="utf-8", errors="replace")
        if cap is not None and len(text.encode("utf-8")) > cap:
            text = text.encode("utf-8")[:cap].decode("utf-8", errors="ignore") + TRUNCATION_MARKER
        return text


@dataclass
class ArtifactInventory:
    """Build-system manifest census for one snapshot.

    ``artifact_count`` counts distinct build-system manifest files and
    deliberately excludes CI workflows and container recipes; it is the
    machine-readable proxy for how explicitly a repo states its build.
    """

    manifests: list[tuple[str, str]]  # (path, manifest_kind)
    artifact_count: int

    @property
    def tier(self) -> str:
        return artifact_tier(self.artifact_count)

    def kinds(self) -> set[str]:
        return {kind for _, kind in self.manifests}

    def paths_of_kind(self, kind: str) -> list[str]:
        return [p for p, k in self.manifests if k == kind]


def artifact_tier(artifact_count: int) -> str:
    if artifact_count == 0:
        return "unspecified"
    if artifact_count == 1:
        return "single"
    return "multi"


@dataclass
class EvidenceBundle:
    """Everything the recipe engines are allowed to look at for one repo."""

    repo_id: str
    readme_text: str = ""
    install_docs: list[tuple[str, str]] = field(default_factory=list)
    container_recipes: list[tuple[str, str]] = field(default_factory=list)
    ci_workflows: list[tuple[str, str]] = field(default_factory=list)
    manifest_excerpts: list[tuple[str, str, str]] = field(default_factory=list)  # (kind, path, text)
    supplemental: list[tuple[str, str]] = field(default_factory=list)
    language_profile: dict[str, float] = field(default_factory=dict)
    primary_language: str = "unknown"
    file_paths: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return {
            "schema_version": SCHEMA_VERSION,
            "repo_id": self.repo_id,
            "readme_text": self.readme_text,
            "install_docs": [list(t) for t in self.install_docs],
            "container_recipes": [list(t) for t in self.container_recipes],
            "ci_workflows": [list(t) for t in self.ci_workflows],
            "manifest_excerpts": [list(t) for t in self.manifest_excerpts],
            "supplemental": [list(t) for t in self.supplemental],
            "language_profile": dict(sorted(self.language_profile.items())),
            "primary_language": self.primary_language,
            "file_paths": list(self.file_paths),
            "flags": list(self.flags),
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "EvidenceBundle":
        return cls(
            repo_id=d["repo_id"],
            readme_text=d.get("readme_text", ""),
            install_docs=[tuple(t) for t in d.get("install_docs", [])],
            container_recipes=[tuple(t) for t in d.get("container_recipes", [])],
            ci_workflows=[tuple(t) for t in d.get("ci_workflows", [])],
            manifest_excerpts=[tuple(t) for t in d.get("manifest_excerpts", [])],
            supplemental=[tuple(t) for t in d.get("supplemental", [])],
            language_profile=dict(d.get("language_profile", {})),
            primary_language=d.get("primary_language", "unknown"),
            file_paths=list(d.get("file_paths", [])),
            flags=list(d.get("flags", [])),
        )


# ── Operations ────────────────────────────────────────────────────────


def _git_head(path: Path) -> str | None:
    if not (path / ".git").exists():
        return None
    try:
        out = subprocess.run(
            ["git", "-C", str(path), "rev-parse", "HEAD"],
            capture_output=True, text=True, timeout=30,
        )
    except (OSError, subprocess.TimeoutExpired):
        return None
    return out.stdout.strip() if out.returncode == 0 else None


def _content_commit_id(root: Path, index: list[tuple[str, int, str]]) -> str:
    h = hashlib.sha256()
    for rel, _, _ in index:
        h.update(rel.encode("utf-8"))
        h.update(b"\0")
        h.update((root / rel).read_bytes())
        h.update(b"\0")
    return h.hexdigest()[:12]


def _walk_index(root: Path) -> list[tuple[str, int, str]]:
    index = []
    for path in sorted(root.rglob("*")):
        if path.is_symlink():
            # recorded, never followed: resolving could escape the root
            rel = path.relative_to(root).as_posix()
            index.append((rel, 0, classify_file(rel)))
            continue
        if not path.is_file():
            continue
        rel_parts = path.relative_to(root).parts
        if rel_parts and rel_parts[0] == ".git":
            continue
        rel = path.relative_to(root).as_posix()
        index.append((rel, path.stat().st_size, classify_file(rel)))
    return index


def ingest(
    repo: RepoMetadata,
    source: str | Path | None = None,
    dest_root: str | Path | None = None,
    size_cap_bytes: int = DEFAULT_REPO_CAP_BYTES,
) -> RepoSnapshot:
    """Copy a checkout into a fresh directory and index every regular file.

    ``source`` defaults to the metadata's local_path. Remote URLs are not
    fetched here — cloning is a host concern — so a source that is not an
    existing directory raises a network-category error.
    """
    src = Path(source) if source is not None else (
        Path(repo.local_path) if repo.local_path else None
    )
    if src is None or not src.is_dir():
        raise NetworkError(f"source for {repo.repo_id} is not a local directory: {src}")

    total = sum(p.stat().st_size for p in src.rglob("*") if p.is_file() and not p.is_symlink())
    if total > size_cap_bytes:
        raise ResourceLimitError(
            f"{repo.repo_id} is {total} bytes, over the {size_cap_bytes} byte cap"
        )

    commit = _git_head(src)
    if dest_root is None:
        import tempfile
        dest = Path(tempfile.mkdtemp(prefix="dfsnap-"))
    else:
        safe = repo.repo_id.replace("/", "_")
        dest = Path(dest_root) / safe
        if dest.exists():
            shutil.rmtree(dest)
    shutil.copytree(src, dest, symlinks=True, dirs_exist_ok=True,
                    ignore=shutil.ignore_patterns(".git"))

    index = _walk_index(dest)
    if commit is None:
        commit = _content_commit_id(dest, [e for e in index if (dest / e[0]).is_file()])
    return RepoSnapshot(repo.repo_id, dest, commit, index)


def inventory_artifacts(snapshot: RepoSnapshot) -> ArtifactInventory:
    manifests = []
    for rel, _, _ in snapshot.file_index:
        kind = classify_manifest(rel)
        if kind is not None:
            manifests.append((rel, kind))
    count = sum(1 for _, k in manifests if k not in ("ci_workflow", "container_recipe"))
    return ArtifactInventory(manifests=manifests, artifact_count=count)


def detect_languages(snapshot: RepoSnapshot) -> dict[str, float]:
    """Byte share per recognized language; empty when nothing is recognized."""
    byte_counts: dict[str, int] = {}
    for rel, size, kind in snapshot.file_index:
        if kind != "source":
            continue
        lang = _language_for_suffix(Path(rel).suffix)
        if lang is None:
            continue
        byte_counts[lang] = byte_counts.get(lang, 0) + size
    total = sum(byte_counts.values())
    if total == 0:
        return {}
    return {lang: count / total for lang, count in byte_counts.items()}


def primary_language(profile: dict[str, float]) -> str:
    if not profile:
        return "unknown"
    return max(sorted(profile), key=lambda lang: profile[lang])


# markdown heading containing "install", or an RST-style underlined one
_INSTALL_HEADING = re.compile(
    r"(?im)"
    r"^\s{0,3}#{1,6}\s[^\n]*install[^\n]*$"
    r"|^[^\n]*install[^\n]*\n[=\-~^\"']{3,}\s*$"
)


def _has_install_heading(readme: str) -> bool:
    return bool(_INSTALL_HEADING.search(readme))


def needs_supplemental(inventory: ArtifactInventory, readme_text: str) -> bool:
    """Insufficiency test: search the web only when the repo itself is thin."""
    has_recipe = any(k == "container_recipe" for _, k in inventory.manifests)
    return (not has_recipe) and inventory.artifact_count <= 1 and not _has_install_heading(readme_text)


def build_evidence(
    snapshot: RepoSnapshot,
    inventory: ArtifactInventory,
    search: SearchClient | None = None,
    supplemental_budget: int = 5,
    file_cap_bytes: int = DEFAULT_FILE_CAP_BYTES,
) -> EvidenceBundle:
    bundle = EvidenceBundle(repo_id=snapshot.repo_id)
    bundle.file_paths = snapshot.paths()

    for rel, _, kind in snapshot.file_index:
        name = Path(rel).name.lower()
        if kind == "doc" and name in README_NAMES and "/" not in rel:
            if not bundle.readme_text:
                bundle.readme_text = snapshot.read_text(rel, cap=file_cap_bytes)
        elif kind == "doc" and "install" in name:
            bundle.install_docs.append((rel, snapshot.read_text(rel, cap=file_cap_bytes)))
        elif kind == "container_recipe":
            bundle.container_recipes.append((rel, snapshot.read_text(rel, cap=file_cap_bytes)))
        elif kind == "ci":
            bundle.ci_workflows.append((rel, snapshot.read_text(rel, cap=file_cap_bytes)))

    for rel, mkind in inventory.manifests:
        if mkind in ("ci_workflow", "container_recipe"):
            continue
        bundle.manifest_excerpts.append((mkind, rel, snapshot.read_text(rel, cap=file_cap_bytes)))

    bundle.language_profile = detect_languages(snapshot)
    bundle.primary_language = primary_language(bundle.language_profile)

    if search is not None and needs_supplemental(inventory, bundle.readme_text):
        name = snapshot.repo_id.rsplit("/", 1)[-1]
        query = f"how to install {name}"
        try:
            snippets = with_retries(lambda: search.fetch_supplemental(query))
            bundle.supplemental = snippets[:supplemental_budget]
        except RetryableClientError:
            bundle.flags.append("supplemental_search_failed")
    return bundle
