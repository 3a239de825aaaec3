"""Container build recipes: the canonical data type of the pipeline.

A recipe renders to a deterministic, line-oriented text form using the
directive subset {FROM, ENV, WORKDIR, COPY, RUN, ENTRYPOINT}. Rendering is
bit-exact (UTF-8, LF) because the content digest is the identity used by
the simulated backend, the debate transcript, and the registry. The strict
parser is the exact inverse of the renderer; a separate lenient parser
adopts pre-existing container recipes found in repositories.

The validation command has no directive of its own in that subset, so it
rides in a structured trailing comment; parsers treat that comment as part
of the canonical form.
"""

from __future__ import annotations

import hashlib
import json
import re
import shlex
from dataclasses import dataclass, replace
from typing import Any

from .errors import RecipeParseError, SpecValidationError

# Canonical system-package install line; build_steps must not collide with it.
PKG_INSTALL_PREFIX = "apt-get update && apt-get install -y --no-install-recommends "

VALIDATE_COMMENT_PREFIX = "# validate: "

_IMAGE_NAME_RE = re.compile(r"^[a-z0-9][a-z0-9._/-]*$")
_IMAGE_TAG_RE = re.compile(r"^[A-Za-z0-9_][A-Za-z0-9._-]*$")
_ENV_KEY_RE = re.compile(r"^[A-Za-z_][A-Za-z0-9_]*$")
_ENV_SAFE_VALUE_RE = re.compile(r"^[A-Za-z0-9_.\-/:+=,@^%]*$")
_PACKAGE_RE = re.compile(r"^[A-Za-z0-9][A-Za-z0-9._+-]*$")
_WORKDIR_RE = re.compile(r"^/[^\s]*$")

# Steps that would stall a non-interactive build.
_INTERACTIVE_CHECKS = (
    ("package manager prompt",
     lambda s: re.search(r"\b(apt-get|apt|yum|dnf|zypper)\s+(?:\S+\s+)*install\b", s)
     and not re.search(r"(^|\s)(-y|--yes|--assume-?yes)\b", s)),
    ("interactive flag", lambda s: re.search(r"(^|\s)--interactive\b", s)),
    ("shell prompt read", lambda s: re.search(r"\bread\s+-p\b", s)),
)


@dataclass(frozen=True)
class BuildSpec:
    """One complete, renderable container build recipe."""

    base_image: tuple[str, str]  # (name, pinned tag)
    system_packages: tuple[str, ...] = ()
    env_vars: tuple[tuple[str, str], ...] = ()
    copy_source: bool = True
    workdir: str = "/work"
    build_steps: tuple[str, ...] = ()
    entrypoint: tuple[str, ...] = ()
    validate_cmd: tuple[str, ...] = ()

    @property
    def spec_digest(self) -> str:
        return hashlib.sha256(render(self).encode("utf-8")).hexdigest()

    def with_field(self, name: str, value: Any) -> "BuildSpec":
        return replace(self, **{name: value})


def validate_spec(spec: BuildSpec) -> None:
    """Raise SpecValidationError listing every violated invariant."""
    problems = []
    name, tag = spec.base_image
    if not name or not _IMAGE_NAME_RE.match(name):
        problems.append(f"bad base image name {name!r}")
    if not tag or not _IMAGE_TAG_RE.match(tag):
        problems.append(f"bad base image tag {tag!r}")
    elif tag == "latest":
        problems.append("base image tag must be pinned, not 'latest'")
    for pkg in spec.system_packages:
        if not _PACKAGE_RE.match(pkg):
            problems.append(f"bad system package name {pkg!r}")
    for key, value in spec.env_vars:
        if not _ENV_KEY_RE.match(key):
            problems.append(f"bad env key {key!r}")
        if "\n" in value:
            problems.append(f"env value for {key} contains a newline")
    if not _WORKDIR_RE.match(spec.workdir):
        problems.append(f"workdir must be an absolute path without spaces: {spec.workdir!r}")
    for step in spec.build_steps:
        if not step or "\n" in step:
            problems.append(f"empty or multi-line build step: {step!r}")
            continue
        if step.startswith(PKG_INSTALL_PREFIX.rstrip()):
            problems.append("build step collides with the canonical package install line")
        for reason, check in _INTERACTIVE_CHECKS:
            if check(step):
                problems.append(f"interactive build step ({reason}): {step!r}")
    if not spec.entrypoint or any(not part for part in spec.entrypoint):
        problems.append("entrypoint must be a non-empty command vector")
    if not spec.validate_cmd or any(not part for part in spec.validate_cmd):
        problems.append("validate_cmd must be a non-empty command vector")
    for vec in (spec.entrypoint, spec.validate_cmd):
        for part in vec:
            if "\n" in part:
                problems.append(f"command vector part contains newline: {part!r}")
    if problems:
        raise SpecValidationError("; ".join(problems))


def _render_env_value(value: str) -> str:
    if value and _ENV_SAFE_VALUE_RE.match(value):
        return value
    return json.dumps(value)


def _parse_env_value(raw: str) -> str:
    if raw.startswith('"'):
        return json.loads(raw)
    return raw


def render(spec: BuildSpec) -> str:
    """Canonical text form. Deterministic field order, one directive per line."""
    lines = [f"FROM {spec.base_image[0]}:{spec.base_image[1]}"]
    if spec.system_packages:
        lines.append("RUN " + PKG_INSTALL_PREFIX + " ".join(spec.system_packages))
    for key, value in spec.env_vars:
        lines.append(f"ENV {key}={_render_env_value(value)}")
    if spec.copy_source:
        lines.append(f"COPY . {spec.workdir}")
    lines.append(f"WORKDIR {spec.workdir}")
    for step in spec.build_steps:
        lines.append(f"RUN {step}")
    lines.append(f"ENTRYPOINT {json.dumps(list(spec.entrypoint))}")
    lines.append(VALIDATE_COMMENT_PREFIX + json.dumps(list(spec.validate_cmd)))
    return "\n".join(lines) + "\n"


def parse(text: str) -> BuildSpec:
    """Strict inverse of render(); rejects anything the renderer cannot emit."""
    lines = text.splitlines()
    if not lines:
        raise RecipeParseError("empty recipe")
    pos = 0

    def fail(msg: str) -> RecipeParseError:
        return RecipeParseError(f"line {pos + 1}: {msg}")

    if not lines[pos].startswith("FROM "):
        raise fail("expected FROM")
    ref = lines[pos][5:]
    if ":" not in ref:
        raise fail("base image tag missing")
    name, tag = ref.rsplit(":", 1)
    pos += 1

    packages: tuple[str, ...] = ()
    if pos < len(lines) and lines[pos].startswith("RUN " + PKG_INSTALL_PREFIX):
        tail = lines[pos][len("RUN " + PKG_INSTALL_PREFIX):]
        packages = tuple(tail.split(" ")) if tail else ()
        pos += 1

    env_vars = []
    while pos < len(lines) and lines[pos].startswith("ENV "):
        body = lines[pos][4:]
        if "=" not in body:
            raise fail("ENV must use KEY=value form")
        key, _, raw = body.partition("=")
        env_vars.append((key, _parse_env_value(raw)))
        pos += 1

    copy_source = False
    copy_dest = None
    if pos < len(lines) and lines[pos].startswith("COPY "):
        parts = lines[pos].split(" ")
        if len(parts) != 3 or parts[1] != ".":
            raise fail("canonical COPY is 'COPY . <workdir>'")
        copy_source = True
        copy_dest = parts[2]
        pos += 1

    if pos >= len(lines) or not lines[pos].startswith("WORKDIR "):
        raise fail("expected WORKDIR")
    workdir = lines[pos][8:]
    if copy_source and copy_dest != workdir:
        raise fail("COPY destination must equal WORKDIR")
    pos += 1

    steps = []
    while pos < len(lines) and lines[pos].startswith("RUN "):
        steps.append(lines[pos][4:])
        pos += 1

    def parse_json_vector(body: str, what: str) -> tuple[str, ...]:
        try:
            items = json.loads(body)
        except json.JSONDecodeError as exc:
            raise fail(f"{what} is not a JSON array: {exc}")
        if not isinstance(items, list) or not all(isinstance(x, str) for x in items):
            raise fail(f"{what} must be a JSON array of strings")
        return tuple(items)

    if pos >= len(lines) or not lines[pos].startswith("ENTRYPOINT "):
        raise fail("expected ENTRYPOINT")
    entrypoint = parse_json_vector(lines[pos][11:], "entrypoint")
    pos += 1

    if pos >= len(lines) or not lines[pos].startswith(VALIDATE_COMMENT_PREFIX):
        raise fail("expected validate command comment")
    validate_cmd = parse_json_vector(lines[pos][len(VALIDATE_COMMENT_PREFIX):], "validate command")
    pos += 1

    if pos != len(lines):
        raise fail("trailing content after validate comment")

    spec = BuildSpec(
        base_image=(name, tag),
        system_packages=packages,
        env_vars=tuple(env_vars),
        copy_source=copy_source,
        workdir=workdir,
        build_steps=tuple(steps),
        entrypoint=entrypoint,
        validate_cmd=validate_cmd,
    )
    validate_spec(spec)
    return spec


# ── Lenient adoption parser for recipes found in repositories ─────────

_APT_ONLY_RE = re.compile(
    r"^(?:apt-get update(?:\s*&&\s*)?)?apt-get install\s+(?:-\S+\s+)*(?P<pkgs>[A-Za-z0-9._+\- ]+?)\s*(?:&&\s*rm -rf /var/lib/apt/lists/\*)?$"
)


def parse_loose(text: str) -> BuildSpec | None:
    """Best-effort read of an arbitrary container recipe.

    Unknown directives are skipped; shell-form CMD/ENTRYPOINT are split with
    shlex. Returns None when no FROM line exists at all. The result is NOT
    validated; callers normalize and validate before adopting it.
    """
    base: tuple[str, str] | None = None
    packages: list[str] = []
    env_vars: list[tuple[str, str]] = []
    copy_source = False
    workdir = "/work"
    steps: list[str] = []
    entrypoint: tuple[str, ...] = ()
    validate_cmd: tuple[str, ...] = ()

    def parse_vector(body: str) -> tuple[str, ...]:
        body = body.strip()
        if body.startswith("["):
            try:
                return tuple(str(x) for x in json.loads(body))
            except json.JSONDecodeError:
                return ()
        try:
            return tuple(shlex.split(body))
        except ValueError:
            return ()

    for raw_line in text.splitlines():
        line = raw_line.strip()
        if line.startswith(VALIDATE_COMMENT_PREFIX):
            validate_cmd = parse_vector(line[len(VALIDATE_COMMENT_PREFIX):])
            continue
        if not line or line.startswith("#"):
            continue
        directive, _, body = line.partition(" ")
        directive = directive.upper()
        body = body.strip()
        if directive == "FROM" and base is None:
            ref = body.split(" ")[0]
            if ":" in ref:
                img_name, img_tag = ref.rsplit(":", 1)
            else:
                img_name, img_tag = ref, "latest"
            base = (img_name, img_tag)
        elif directive == "RUN":
            m = _APT_ONLY_RE.match(body)
            if m:
                packages.extend(m.group("pkgs").split())
            else:
                steps.append(body)
        elif directive == "ENV":
            if "=" in body:
                key, _, value = body.partition("=")
                env_vars.append((key.strip(), value.strip().strip('"')))
            else:
                key, _, value = body.partition(" ")
                env_vars.append((key, value.strip()))
        elif directive == "COPY" or directive == "ADD":
            copy_source = True
        elif directive == "WORKDIR":
            workdir = body
        elif directive in ("ENTRYPOINT", "CMD"):
            vec = parse_vector(body)
            if vec and not entrypoint:
                entrypoint = vec
            elif vec and directive == "ENTRYPOINT":
                entrypoint = vec

    if base is None:
        return None
    return BuildSpec(
        base_image=base,
        system_packages=tuple(packages),
        env_vars=tuple(env_vars),
        copy_source=copy_source,
        workdir=workdir,
        build_steps=tuple(steps),
        entrypoint=entrypoint,
        validate_cmd=validate_cmd,
    )
