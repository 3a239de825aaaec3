"""Container construction, minimal-command validation, failure taxonomy.

Two backends implement the same small adapter surface. The simulated one
resolves everything from a committed script keyed by recipe digest, which
is what makes full pipeline runs reproducible byte-for-byte. The engine
one shells out to docker/podman with enforced limits and validation run
with networking disabled; it reports InfrastructureError when no engine is
present, which is a substrate signal, never a tool failure.

Failure classification is a first-match scan over an ordered pattern table
shipped as package data; the ordering (network, permission, resource,
dependency_install, build_process) is the tie-break for overlapping logs.
"""

from __future__ import annotations

import hashlib
import json
import re
import shutil
import subprocess
import tempfile
import time
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Any, Protocol

from .buildspec import BuildSpec, render, validate_spec
from .errors import InfrastructureError

TIMEOUT_MARKER = "timeout"

FAILURE_CATEGORIES = (
    "build_process", "resource", "dependency_install", "permission", "network", "unknown",
)

DEFAULT_TIMEOUT_GRACE_S = 10.0


@dataclass(frozen=True)
class ExecutionLimits:
    cpu_slots: int = 1
    memory_bytes: int = 8 * 1024**3
    disk_bytes: int = 20 * 1024**3
    build_timeout_s: float = 3600.0
    validate_timeout_s: float = 300.0

    def __post_init__(self) -> None:
        for name in ("cpu_slots", "memory_bytes", "disk_bytes",
                     "build_timeout_s", "validate_timeout_s"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.validate_timeout_s > self.build_timeout_s:
            raise ValueError("validate_timeout_s must not exceed build_timeout_s")


@dataclass
class BuildResult:
    outcome: str  # "success" | "failure"
    build_duration_s: float
    log_path: str
    exit_status: int | str
    image_digest: str | None = None
    failure_category: str | None = None

    def __post_init__(self) -> None:
        if self.outcome == "success":
            if self.image_digest is None or self.failure_category is not None:
                raise ValueError("successful build needs a digest and no failure category")
        elif self.outcome == "failure":
            if self.failure_category not in FAILURE_CATEGORIES:
                raise ValueError(f"failed build needs exactly one category, got {self.failure_category!r}")
        else:
            raise ValueError(f"unknown outcome {self.outcome!r}")
        if self.build_duration_s < 0:
            raise ValueError("build_duration_s must be >= 0")


@dataclass
class ValidationResult:
    passed: bool
    exit_status: int | str
    duration_s: float
    log_excerpt: str

    def __post_init__(self) -> None:
        if self.passed != (self.exit_status == 0):
            raise ValueError("passed must mirror a zero exit status within the timeout")


# ── Failure classification ────────────────────────────────────────────


def _load_patterns() -> list[tuple[str, re.Pattern[str]]]:
    text = resources.files("deployforge.data").joinpath("failure_patterns.json").read_text("utf-8")
    return [(row["category"], re.compile(row["pattern"])) for row in json.loads(text)]


FAILURE_PATTERNS = _load_patterns()


def classify_failure(log_text: str, exit_info: int | str, phase: str) -> str:
    """First matching category for a failed attempt.

    Falls back on the exit information when no pattern fires: a timeout is
    a resource outcome, any other nonzero exit during the build phase is a
    build-process outcome, and whatever remains is unknown.
    """
    if phase not in ("build", "validate"):
        raise ValueError(f"unknown phase {phase!r}")
    if exit_info == 0:
        raise ValueError("nothing to classify: the attempt did not fail")
    for category, pattern in FAILURE_PATTERNS:
        if pattern.search(log_text):
            return category
    if exit_info == TIMEOUT_MARKER:
        return "resource"
    if phase == "build":
        return "build_process"
    return "unknown"


# ── Backend adapters ──────────────────────────────────────────────────


class Backend(Protocol):
    def build_image(self, spec: BuildSpec, limits: ExecutionLimits, log_dir: Path) -> BuildResult:
        ...

    def validate_tool(self, image_digest: str, validate_cmd: tuple[str, ...],
                      limits: ExecutionLimits) -> ValidationResult:
        ...


def derived_image_digest(spec_digest: str) -> str:
    return "sha256:" + hashlib.sha256(f"image\0{spec_digest}".encode("ascii")).hexdigest()


class SimulatedBackend:
    """Container engine stand-in scripted by recipe digest.

    Script entries: ``{"<spec digest>": {"outcome": "success"|"failure",
    "duration_s": float, "log_file"?: str, "log_text"?: str,
    "image_digest"?: str, "validate_exit"?: int|"timeout",
    "validate_duration_s"?: float, "validate_attempts_network"?: bool,
    "infrastructure_error"?: str}}``. A digest absent from the script is an
    infrastructure error: the fixtures are expected to be complete.
    """

    def __init__(self, script: dict[str, Any], script_dir: Path | None = None):
        self._script = script
        self._script_dir = script_dir
        self._images: dict[str, dict[str, Any]] = {}

    @classmethod
    def from_file(cls, path: str | Path) -> "SimulatedBackend":
        p = Path(path)
        return cls(json.loads(p.read_text(encoding="utf-8")), script_dir=p.parent)

    def _log_text(self, entry: dict[str, Any], digest: str) -> str:
        if "log_text" in entry:
            return entry["log_text"]
        if "log_file" in entry and self._script_dir is not None:
            return (self._script_dir / entry["log_file"]).read_text(encoding="utf-8")
        return f"[build] simulated build for {digest}\n[build] scripted outcome: {entry['outcome']}\n"

    def build_image(self, spec: BuildSpec, limits: ExecutionLimits, log_dir: Path) -> BuildResult:
        validate_spec(spec)
        digest = spec.spec_digest
        entry = self._script.get(digest)
        if entry is None:
            raise InfrastructureError(f"simulated backend has no script entry for {digest}")
        if "infrastructure_error" in entry:
            raise InfrastructureError(entry["infrastructure_error"])

        duration = float(entry.get("duration_s", 1.0))
        log_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_dir / f"{digest[:16]}.log"
        log_text = self._log_text(entry, digest)

        timed_out = duration > limits.build_timeout_s
        if timed_out:
            log_text += f"[build] build timed out after {limits.build_timeout_s:.0f}s\n"
            duration = limits.build_timeout_s
        log_path.write_text(log_text, encoding="utf-8")

        if entry["outcome"] == "success" and not timed_out:
            image_digest = entry.get("image_digest", derived_image_digest(digest))
            self._images[image_digest] = entry
            return BuildResult(
                outcome="success",
                build_duration_s=duration,
                log_path=str(log_path),
                exit_status=0,
                image_digest=image_digest,
            )
        exit_status: int | str = TIMEOUT_MARKER if timed_out else int(entry.get("exit_status", 1))
        return BuildResult(
            outcome="failure",
            build_duration_s=duration,
            log_path=str(log_path),
            exit_status=exit_status,
            failure_category=classify_failure(log_text, exit_status, "build"),
        )

    def _find_image(self, image_digest: str) -> dict[str, Any] | None:
        entry = self._images.get(image_digest)
        if entry is not None:
            return entry
        # a separate process may validate an image built earlier; the script
        # is the durable record of which images exist
        for digest, candidate in self._script.items():
            if candidate.get("outcome") != "success":
                continue
            if candidate.get("image_digest", derived_image_digest(digest)) == image_digest:
                return candidate
        return None

    def validate_tool(self, image_digest: str, validate_cmd: tuple[str, ...],
                      limits: ExecutionLimits) -> ValidationResult:
        entry = self._find_image(image_digest)
        if entry is None:
            raise InfrastructureError(f"image {image_digest} not present on simulated backend")
        if entry.get("validate_attempts_network"):
            # networking is always off during validation
            return ValidationResult(
                passed=False, exit_status=7, duration_s=0.1,
                log_excerpt="[validate] network disabled during validation: connection refused",
            )
        duration = float(entry.get("validate_duration_s", 0.5))
        exit_status: int | str = entry.get("validate_exit", 0)
        if duration > limits.validate_timeout_s or exit_status == TIMEOUT_MARKER:
            return ValidationResult(
                passed=False, exit_status=TIMEOUT_MARKER,
                duration_s=min(duration, limits.validate_timeout_s),
                log_excerpt=f"[validate] timed out after {limits.validate_timeout_s:.0f}s",
            )
        return ValidationResult(
            passed=exit_status == 0,
            exit_status=exit_status,
            duration_s=duration,
            log_excerpt=f"[validate] {' '.join(validate_cmd)} exited {exit_status}",
        )


class EngineBackend:
    """Thin adapter over a local docker/podman CLI."""

    def __init__(self, engine: str | None = None):
        self._engine = engine or self._detect()

    @staticmethod
    def _detect() -> str:
        for candidate in ("docker", "podman"):
            if shutil.which(candidate):
                return candidate
        raise InfrastructureError("no container engine (docker/podman) on PATH")

    def build_image(self, spec: BuildSpec, limits: ExecutionLimits, log_dir: Path) -> BuildResult:
        validate_spec(spec)
        digest = spec.spec_digest
        log_dir.mkdir(parents=True, exist_ok=True)
        log_path = log_dir / f"{digest[:16]}.log"
        tag = f"deployforge:{digest[:16]}"
        started = time.monotonic()
        with tempfile.TemporaryDirectory(prefix="dfbuild-") as ctx:
            (Path(ctx) / "Dockerfile").write_text(render(spec), encoding="utf-8")
            try:
                proc = subprocess.run(
                    [self._engine, "build", "--memory", str(limits.memory_bytes),
                     "-t", tag, ctx],
                    capture_output=True, text=True,
                    timeout=limits.build_timeout_s + DEFAULT_TIMEOUT_GRACE_S,
                )
                log_text = "".join(f"[build] {l}\n" for l in (proc.stdout + proc.stderr).splitlines())
                exit_status: int | str = proc.returncode
            except subprocess.TimeoutExpired as exc:
                out = (exc.stdout or b"").decode("utf-8", "replace") if isinstance(exc.stdout, bytes) else (exc.stdout or "")
                log_text = "".join(f"[build] {l}\n" for l in out.splitlines())
                log_text += f"[build] build timed out after {limits.build_timeout_s:.0f}s\n"
                exit_status = TIMEOUT_MARKER
            except OSError as exc:
                raise InfrastructureError(f"engine invocation failed: {exc}") from exc
        duration = min(time.monotonic() - started, limits.build_timeout_s)
        log_path.write_text(log_text, encoding="utf-8")
        if exit_status == 0:
            return BuildResult(
                outcome="success", build_duration_s=duration,
                log_path=str(log_path), exit_status=0, image_digest=tag,
            )
        return BuildResult(
            outcome="failure", build_duration_s=duration,
            log_path=str(log_path), exit_status=exit_status,
            failure_category=classify_failure(log_text, exit_status, "build"),
        )

    def validate_tool(self, image_digest: str, validate_cmd: tuple[str, ...],
                      limits: ExecutionLimits) -> ValidationResult:
        started = time.monotonic()
        try:
            proc = subprocess.run(
                [self._engine, "run", "--rm", "--network=none",
                 "--memory", str(limits.memory_bytes), "--entrypoint", validate_cmd[0],
                 image_digest, *validate_cmd[1:]],
                capture_output=True, text=True,
                timeout=limits.validate_timeout_s + DEFAULT_TIMEOUT_GRACE_S,
            )
            exit_status: int | str = proc.returncode
            excerpt = (proc.stdout + proc.stderr)[-2000:]
        except subprocess.TimeoutExpired:
            exit_status = TIMEOUT_MARKER
            excerpt = f"[validate] timed out after {limits.validate_timeout_s:.0f}s"
        except OSError as exc:
            raise InfrastructureError(f"engine invocation failed: {exc}") from exc
        duration = min(time.monotonic() - started, limits.validate_timeout_s)
        return ValidationResult(
            passed=exit_status == 0,
            exit_status=exit_status,
            duration_s=duration,
            log_excerpt=excerpt,
        )


def make_backend(kind: str, script_path: str | Path | None = None) -> Backend:
    if kind == "sim":
        if script_path is None:
            raise InfrastructureError("simulated backend needs a script file")
        return SimulatedBackend.from_file(script_path)
    if kind == "engine":
        return EngineBackend()
    raise InfrastructureError(f"unknown backend kind {kind!r}")
