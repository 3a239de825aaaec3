"""Recipe inference: propose from evidence, critique, refine to stability.

The rule proposer deliberately trusts repository documentation first — the
install commands a README claims to work — and falls back to manifest
templates. That bias reproduces how a single pass fails on repos whose docs
have drifted from the tree. The rule reviewer then cross-checks the recipe
against the actual file index, the end-of-life image table, and the
dependency manifests, proposing concrete edits. The refine loop alternates
the two until the recipe stops changing or nothing blocks.
"""

from __future__ import annotations

import json
import re
import shlex
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from .analyzer import EvidenceBundle
from .buildspec import BuildSpec, parse_loose, render, validate_spec
from .clients import TextCompletionClient, complete_with_budget
from .errors import (
    BudgetExceededError,
    ProposalError,
    SpecValidationError,
)

DEFAULT_MAX_ROUNDS = 4

SEVERITIES = ("blocker", "warning")
ACTIONS = ("accepted", "edited", "regenerated")

NEEDS_REGENERATION = "needs-regeneration"

# Base image and dependency-install conventions per manifest kind; kinds
# earlier in this tuple win when a repo carries several.
_KIND_PRIORITY = (
    "python_project", "python_setup", "python_requirements", "cmake", "make",
    "autotools", "rust_manifest", "node_package", "java_build", "other",
)

_TEMPLATES: dict[str, dict[str, Any]] = {
    "python_project": {
        "base": ("python", "3.11-slim"),
        "steps": ("pip install .",),
    },
    "python_setup": {
        "base": ("python", "3.11-slim"),
        "steps": ("pip install .",),
    },
    "python_requirements": {
        "base": ("python", "3.11-slim"),
        "steps": ("pip install -r {path}",),
    },
    "cmake": {
        "base": ("debian", "bookworm"),
        "packages": ("build-essential", "cmake"),
        "steps": ("cmake -S . -B build", "cmake --build build"),
    },
    "make": {
        "base": ("debian", "bookworm"),
        "packages": ("build-essential",),
        "steps": ("make",),
    },
    "autotools": {
        "base": ("debian", "bookworm"),
        "packages": ("build-essential", "autoconf", "automake"),
        "steps": ("./configure", "make"),
    },
    "rust_manifest": {
        "base": ("rust", "1.79-slim"),
        "steps": ("cargo build --release",),
    },
    "node_package": {
        "base": ("node", "20-slim"),
        "steps": ("npm install",),
    },
    "java_build": {
        "base": ("maven", "3.9-eclipse-temurin-17"),
        "steps": ("mvn -q package",),
    },
}

_LANGUAGE_BASE = {
    "Python": ("python", "3.11-slim"),
    "R": ("r-base", "4.3.2"),
    "Julia": ("julia", "1.10"),
    "JavaScript": ("node", "20-slim"),
    "unknown": ("debian", "bookworm"),
}

# Pins applied when adopting a recipe that left its base image floating.
_FLOATING_TAG_PINS = {
    "python": "3.11-slim",
    "ubuntu": "22.04",
    "debian": "bookworm",
    "node": "20-slim",
    "rust": "1.79-slim",
}

_INTERP_BY_SUFFIX = {
    ".py": "python", ".r": "Rscript", ".jl": "julia", ".js": "node",
    ".sh": "sh", ".pl": "perl", ".rb": "ruby",
}

_SCRIPT_INTERPRETERS = {"python", "python3", "rscript", "node", "julia",
                        "bash", "sh", "ruby", "perl"}

_CMD_LINE = re.compile(
    r"^\s*\$?\s*(?:sudo\s+)?"
    r"(python3?|Rscript|node|julia|bash|sh|ruby|perl)\s+([\w./-]+\.\w+)(\s+[\w./=-]+)*\s*$"
)

_BUILDISH = re.compile(
    r"\b(pip3? install|npm (install|ci)|cargo build|make\b|cmake\b|mvn\b|gradle\b|"
    r"python3? setup\.py|\./configure|conda (install|env)|bash \S+|sh \S+|apt-get install)\b"
)

_FILE_TOKEN_SUFFIXES = {
    ".txt", ".py", ".sh", ".cfg", ".toml", ".json", ".yml", ".yaml", ".r",
    ".jl", ".pl", ".rb", ".js", ".ts", ".gradle", ".xml", ".am", ".ac", ".in",
}


def _eol_images() -> dict[str, str]:
    text = resources.files("deployforge.data").joinpath("eol_base_images.json").read_text("utf-8")
    return json.loads(text)


EOL_BASE_IMAGES = _eol_images()


@dataclass
class ReviewFinding:
    """One reviewer objection against a recipe field."""

    severity: str
    target: str
    claim: str
    evidence_ref: str
    proposed_edit: Any = None
    needs_regeneration: bool = False

    def __post_init__(self) -> None:
        if self.severity not in SEVERITIES:
            raise ValueError(f"unknown severity {self.severity!r}")
        if self.severity == "blocker" and self.proposed_edit is None and not self.needs_regeneration:
            raise ValueError("blocker findings need a proposed_edit or the regeneration marker")

    def to_dict(self) -> dict[str, Any]:
        return {
            "severity": self.severity,
            "target": self.target,
            "claim": self.claim,
            "evidence_ref": self.evidence_ref,
            "proposed_edit": _jsonable(self.proposed_edit),
            "needs_regeneration": self.needs_regeneration,
        }


def _jsonable(value: Any) -> Any:
    if isinstance(value, tuple):
        return [_jsonable(v) for v in value]
    if isinstance(value, list):
        return [_jsonable(v) for v in value]
    return value


@dataclass
class DebateTranscript:
    """Round-by-round record of the propose/review exchange."""

    rounds: list[dict[str, Any]] = field(default_factory=list)
    final_status: str = "unstable"
    flags: list[str] = field(default_factory=list)

    def add_round(self, spec_digest: str, findings: list[ReviewFinding], action: str) -> None:
        if action not in ACTIONS:
            raise ValueError(f"unknown action {action!r}")
        self.rounds.append({
            "spec_digest": spec_digest,
            "findings": [f.to_dict() for f in findings],
            "action": action,
        })

    def to_dict(self) -> dict[str, Any]:
        return {
            "rounds": list(self.rounds),
            "final_status": self.final_status,
            "flags": list(self.flags),
        }


# ── Evidence mining helpers ───────────────────────────────────────────


def _install_section(readme: str) -> str:
    """Text of the first install-ish section, or the whole readme."""
    lines = readme.splitlines()
    start = None
    for i, line in enumerate(lines):
        if re.match(r"^\s{0,3}#{1,6}\s[^\n]*install", line, re.IGNORECASE):
            start = i + 1
            break
    if start is None:
        return readme
    end = len(lines)
    for j in range(start, len(lines)):
        if re.match(r"^\s{0,3}#{1,6}\s", lines[j]):
            end = j
            break
    return "\n".join(lines[start:end])


def readme_install_commands(readme: str, cap: int = 6) -> list[str]:
    """Shell commands the documentation claims will install the tool."""
    section = _install_section(readme)
    commands = []
    in_block = False
    for raw in section.splitlines():
        line = raw.strip()
        if line.startswith("```"):
            in_block = not in_block
            continue
        candidate = None
        if line.startswith("$ "):
            candidate = line[2:].strip()
        elif in_block and line and not line.startswith("#"):
            candidate = line
        if candidate:
            candidate = re.sub(r"^sudo\s+", "", candidate)
            if _BUILDISH.search(candidate):
                commands.append(candidate)
        if len(commands) >= cap:
            break
    return commands


def readme_usage_command(readme: str) -> tuple[str, ...] | None:
    """First documented run command, e.g. ``python run_tool.py``."""
    for raw in readme.splitlines():
        m = _CMD_LINE.match(raw)
        if m and not _BUILDISH.search(raw):
            try:
                parts = shlex.split(raw.strip().lstrip("$ ").strip())
            except ValueError:
                continue
            if parts and parts[0] == "sudo":
                parts = parts[1:]
            return tuple(parts)
    return None


def guess_entrypoint(evidence: EvidenceBundle, trust_docs: bool = True) -> tuple[str, ...]:
    if trust_docs and evidence.readme_text:
        documented = readme_usage_command(evidence.readme_text)
        if documented:
            return documented
    name = evidence.repo_id.rsplit("/", 1)[-1]
    candidates = [
        "main.py", "run.py", "cli.py", "app.py", f"{name}.py",
        f"src/{name}.py", f"{name}/__main__.py", "index.js",
        f"{name}.R", f"{name}.jl", f"{name}.sh",
    ]
    files = set(evidence.file_paths)
    for rel in candidates:
        if rel in files:
            interp = _INTERP_BY_SUFFIX.get(Path(rel).suffix.lower(), "python")
            return (interp, rel)
    for rel in sorted(files):
        if rel.endswith(".py") and "/" not in rel:
            return ("python", rel)
    return ("./" + name,)


# ── Proposers ─────────────────────────────────────────────────────────


def _normalize_adopted(spec: BuildSpec) -> BuildSpec | None:
    """Pin a floating base image; give up (None) when it cannot be pinned."""
    name, tag = spec.base_image
    if tag == "latest" or not tag:
        pinned = _FLOATING_TAG_PINS.get(name)
        if pinned is None:
            return None
        spec = spec.with_field("base_image", (name, pinned))
    if not spec.entrypoint:
        return None
    if not spec.validate_cmd:
        spec = spec.with_field("validate_cmd", spec.entrypoint + ("--help",))
    return spec


def _adopt_existing_recipe(evidence: EvidenceBundle) -> BuildSpec | None:
    for _, text in evidence.container_recipes:
        loose = parse_loose(text)
        if loose is None:
            continue
        normalized = _normalize_adopted(loose)
        if normalized is None:
            continue
        try:
            validate_spec(normalized)
        except SpecValidationError:
            continue
        return normalized
    return None


def _sanitize_step(step: str) -> str:
    # documentation habitually omits the non-interactive flag
    return re.sub(r"\b(apt-get|apt|yum|dnf)\s+install\b(?!\s+-y)", r"\1 install -y", step)


class RuleProposer:
    """Deterministic template-based recipe generation."""

    def propose(self, evidence: EvidenceBundle,
                feedback: list[ReviewFinding] | None = None) -> BuildSpec:
        adopted = _adopt_existing_recipe(evidence)
        if adopted is not None:
            return adopted

        kinds = {}
        for kind, path, _ in evidence.manifest_excerpts:
            kinds.setdefault(kind, path)
        has_docs = bool(evidence.readme_text or evidence.install_docs or evidence.supplemental)
        if not kinds and not has_docs:
            raise ProposalError(f"no usable evidence for {evidence.repo_id}")

        top_kind = next((k for k in _KIND_PRIORITY if k in kinds), None)
        template = _TEMPLATES.get(top_kind or "", {})
        base = template.get("base") or _LANGUAGE_BASE.get(
            evidence.primary_language, _LANGUAGE_BASE["unknown"]
        )
        packages = tuple(template.get("packages", ()))
        template_steps = tuple(
            s.format(path=kinds.get(top_kind, "")) for s in template.get("steps", ())
        )

        doc_steps = tuple(
            _sanitize_step(s) for s in readme_install_commands(evidence.readme_text)
        )
        entrypoint = guess_entrypoint(evidence)

        for steps in ((doc_steps or template_steps), template_steps):
            spec = BuildSpec(
                base_image=base,
                system_packages=packages,
                build_steps=steps,
                entrypoint=entrypoint,
                validate_cmd=entrypoint + ("--help",),
            )
            try:
                validate_spec(spec)
                return spec
            except SpecValidationError:
                continue
        raise ProposalError(f"template recipe for {evidence.repo_id} failed validation")


class ModelProposer:
    """Recipe generation through a text-completion client."""

    def __init__(self, client: TextCompletionClient):
        self._client = client

    def _context(self, evidence: EvidenceBundle,
                 feedback: list[ReviewFinding] | None,
                 parse_error: str | None) -> dict[str, Any]:
        context: dict[str, Any] = {
            "task": "propose_recipe",
            "repo_id": evidence.repo_id,
            "readme": evidence.readme_text,
            "manifests": [[k, p] for k, p, _ in evidence.manifest_excerpts],
            "primary_language": evidence.primary_language,
        }
        if feedback:
            context["feedback"] = [f.to_dict() for f in feedback]
        if parse_error:
            context["parse_error"] = parse_error
        return context

    def propose(self, evidence: EvidenceBundle,
                feedback: list[ReviewFinding] | None = None) -> BuildSpec:
        parse_error = None
        for _ in range(2):  # one reprompt on unparseable output
            context = self._context(evidence, feedback, parse_error)
            try:
                exchange = complete_with_budget(self._client, "proposer", context)
            except BudgetExceededError as exc:
                raise ProposalError(f"proposer unavailable: {exc}") from exc
            loose = parse_loose(exchange.response_text)
            normalized = _normalize_adopted(loose) if loose is not None else None
            if normalized is not None:
                try:
                    validate_spec(normalized)
                    return normalized
                except SpecValidationError as exc:
                    parse_error = str(exc)
                    continue
            parse_error = "response did not contain a parseable recipe"
        raise ProposalError(
            f"model produced no parseable recipe for {evidence.repo_id}: {parse_error}"
        )


# ── Reviewers ─────────────────────────────────────────────────────────


def _file_tokens(step: str) -> list[str]:
    tokens = []
    for token in re.findall(r"[\w@%+=:,./-]+", step):
        if "://" in token or token.startswith("-"):
            continue
        if Path(token).suffix.lower() in _FILE_TOKEN_SUFFIXES:
            tokens.append(token.lstrip("./"))
    return tokens


def _entrypoint_script(vec: tuple[str, ...]) -> str | None:
    if not vec:
        return None
    head = vec[0].lower()
    if head in _SCRIPT_INTERPRETERS and len(vec) > 1:
        return vec[1].lstrip("./")
    if vec[0].startswith("./") and Path(vec[0]).suffix.lower() in _FILE_TOKEN_SUFFIXES:
        return vec[0][2:]
    return None


_DEPENDENCY_MARKERS = {
    "python_requirements": None,  # handled specially: path or full package list
    "python_project": re.compile(r"pip3? install"),
    "python_setup": re.compile(r"pip3? install|python3? setup\.py"),
    "node_package": re.compile(r"\bnpm (install|ci)\b"),
    "rust_manifest": re.compile(r"\bcargo (build|install)\b"),
    "java_build": re.compile(r"\b(mvn|gradle)\b"),
}

_DEPENDENCY_FIX = {
    "python_requirements": "pip install -r {path}",
    "python_project": "pip install .",
    "python_setup": "pip install .",
    "node_package": "npm install",
    "rust_manifest": "cargo build --release",
    "java_build": "mvn -q package",
}


def requirement_names(text: str) -> list[str]:
    names = []
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("-"):
            continue
        m = re.match(r"^[A-Za-z0-9][A-Za-z0-9._-]*", line)
        if m:
            names.append(m.group(0).lower())
    return names


class RuleReviewer:
    """Deterministic recipe critique against the evidence bundle.

    Emitted edits are cumulative: each build_steps edit is computed on top
    of the previous one in the same round, so applying them in order leaves
    a consistent step list.
    """

    def review(self, spec: BuildSpec, evidence: EvidenceBundle) -> list[ReviewFinding]:
        findings: list[ReviewFinding] = []
        files = set(evidence.file_paths)
        working_steps = list(spec.build_steps)

        # r1: every file a build step references must exist in the tree
        for step in list(working_steps):
            missing = [t for t in _file_tokens(step) if t not in files]
            if missing:
                working_steps = [s for s in working_steps if s != step]
                findings.append(ReviewFinding(
                    severity="blocker",
                    target="build_steps",
                    claim=f"step {step!r} references missing file(s): {', '.join(missing)}",
                    evidence_ref="file_index",
                    proposed_edit=tuple(working_steps),
                ))

        # r2: base image must not be end-of-life
        ref = f"{spec.base_image[0]}:{spec.base_image[1]}"
        if ref in EOL_BASE_IMAGES:
            replacement = tuple(EOL_BASE_IMAGES[ref].rsplit(":", 1))
            findings.append(ReviewFinding(
                severity="blocker",
                target="base_image",
                claim=f"base image {ref} is end-of-life; its package archives are unreliable",
                evidence_ref=(evidence.container_recipes[0][0]
                              if evidence.container_recipes else "file_index"),
                proposed_edit=replacement,
            ))

        # r3: dependencies declared by manifests must be installed by some step
        for kind, path, text in evidence.manifest_excerpts:
            if kind == "python_requirements":
                mentions_path = any(path in s for s in working_steps)
                needed = requirement_names(text)
                covered = all(
                    any(name in s.lower() for s in working_steps) for name in needed
                ) if needed else False
                if not mentions_path and not covered:
                    working_steps = working_steps + [f"pip install -r {path}"]
                    findings.append(ReviewFinding(
                        severity="blocker",
                        target="build_steps",
                        claim=f"packages from {path} are never installed",
                        evidence_ref=path,
                        proposed_edit=tuple(working_steps),
                    ))
            elif kind in _DEPENDENCY_MARKERS:
                marker = _DEPENDENCY_MARKERS[kind]
                if marker is not None and not any(marker.search(s) for s in working_steps):
                    fix = _DEPENDENCY_FIX[kind].format(path=path)
                    working_steps = working_steps + [fix]
                    findings.append(ReviewFinding(
                        severity="blocker",
                        target="build_steps",
                        claim=f"{kind} manifest {path} has no matching install step",
                        evidence_ref=path,
                        proposed_edit=tuple(working_steps),
                    ))

        # r4: a script entrypoint must point at a file that exists
        script = _entrypoint_script(spec.entrypoint)
        if script is not None and script not in files:
            replacement_ep = guess_entrypoint(evidence, trust_docs=False)
            replacement_script = _entrypoint_script(replacement_ep)
            if replacement_script is None or replacement_script not in files:
                findings.append(ReviewFinding(
                    severity="blocker",
                    target="entrypoint",
                    claim=f"entrypoint script {script!r} is not in the tree and no alternative was found",
                    evidence_ref="file_index",
                    needs_regeneration=True,
                ))
            else:
                findings.append(ReviewFinding(
                    severity="blocker",
                    target="entrypoint",
                    claim=f"entrypoint script {script!r} is not in the tree",
                    evidence_ref="file_index",
                    proposed_edit=replacement_ep,
                ))
                findings.append(ReviewFinding(
                    severity="blocker",
                    target="validate_cmd",
                    claim="validation command follows the replaced entrypoint",
                    evidence_ref="file_index",
                    proposed_edit=replacement_ep + ("--help",),
                ))
        return findings


class ModelReviewer:
    """Critique through a text-completion client.

    The client is expected to answer either the fixed no-objections phrase
    or a JSON array of findings; anything unparseable counts as silence.
    """

    def __init__(self, client: TextCompletionClient):
        self._client = client

    def review(self, spec: BuildSpec, evidence: EvidenceBundle) -> list[ReviewFinding]:
        context = {
            "task": "review_recipe",
            "repo_id": evidence.repo_id,
            "recipe": render(spec),
        }
        exchange = complete_with_budget(self._client, "reviewer", context)
        text = exchange.response_text.strip()
        if text.lower().startswith("no objection"):
            return []
        try:
            raw = json.loads(text)
        except json.JSONDecodeError:
            return []
        findings = []
        for item in raw if isinstance(raw, list) else []:
            try:
                findings.append(ReviewFinding(
                    severity=item.get("severity", "warning"),
                    target=item.get("target", ""),
                    claim=item.get("claim", ""),
                    evidence_ref=item.get("evidence_ref", "file_index"),
                    proposed_edit=item.get("proposed_edit"),
                    needs_regeneration=bool(item.get("needs_regeneration", False)),
                ))
            except ValueError:
                continue
        return findings


# ── Refinement loop ───────────────────────────────────────────────────

_TUPLE_FIELDS = {"system_packages", "build_steps", "entrypoint", "validate_cmd"}


def apply_edit(spec: BuildSpec, finding: ReviewFinding) -> BuildSpec:
    root = finding.target.split(".")[0].split("[")[0]
    value = finding.proposed_edit
    if root == "base_image":
        value = tuple(value)
    elif root in _TUPLE_FIELDS:
        value = tuple(value)
    elif root == "env_vars":
        value = tuple((k, v) for k, v in value)
    return spec.with_field(root, value)


def refine_loop(
    evidence: EvidenceBundle,
    proposer,
    reviewer,
    max_rounds: int = DEFAULT_MAX_ROUNDS,
) -> tuple[BuildSpec, DebateTranscript]:
    """Alternate proposal and review until stable or out of rounds.

    Stability: a round with zero blockers, or two consecutive identical
    recipe digests. On exhaustion the best-known recipe (fewest blockers,
    ties to the latest) is still returned so failure surfaces in execution
    rather than being silently dropped.
    """
    if max_rounds < 1:
        raise ValueError("max_rounds must be >= 1")
    transcript = DebateTranscript()

    spec = proposer.propose(evidence)
    best: tuple[int, int, BuildSpec] | None = None  # (blockers, round idx, spec)

    for round_idx in range(max_rounds):
        try:
            findings = reviewer.review(spec, evidence)
        except BudgetExceededError:
            findings = []
            if "unreviewed" not in transcript.flags:
                transcript.flags.append("unreviewed")
        blockers = [f for f in findings if f.severity == "blocker"]

        if best is None or len(blockers) <= best[0]:
            best = (len(blockers), round_idx, spec)

        if not blockers:
            transcript.add_round(spec.spec_digest, findings, "accepted")
            transcript.final_status = "stable"
            return spec, transcript

        if any(f.needs_regeneration for f in blockers):
            new_spec = proposer.propose(evidence, feedback=findings)
            action = "regenerated"
        else:
            new_spec = spec
            for f in blockers:
                if f.proposed_edit is not None:
                    new_spec = apply_edit(new_spec, f)
            action = "edited"
        transcript.add_round(spec.spec_digest, findings, action)

        if new_spec.spec_digest == spec.spec_digest:
            # converged on a fixed point, blockers notwithstanding
            transcript.final_status = "stable"
            transcript.flags.append("converged_with_blockers")
            return spec, transcript
        spec = new_spec

    transcript.final_status = "unstable"
    assert best is not None
    # the last edits were never reviewed; prefer them when they descend
    # from the best-known round, otherwise return that round's recipe
    if best[1] == max_rounds - 1:
        return spec, transcript
    return best[2], transcript
