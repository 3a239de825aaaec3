from __future__ import annotations

import json
import shutil

import pytest

from deployforge.buildspec import BuildSpec
from deployforge.errors import InfrastructureError, SpecValidationError
from deployforge.executor import (
    EngineBackend,
    ExecutionLimits,
    FAILURE_CATEGORIES,
    SimulatedBackend,
    TIMEOUT_MARKER,
    classify_failure,
    derived_image_digest,
    make_backend,
)


def _spec(entry=("python", "main.py")) -> BuildSpec:
    return BuildSpec(
        base_image=("python", "3.11-slim"),
        build_steps=("pip install -r requirements.txt",),
        entrypoint=entry,
        validate_cmd=entry + ("--help",),
    )


def _limits(**kw) -> ExecutionLimits:
    return ExecutionLimits(**kw)


def test_limits_invariants():
    with pytest.raises(ValueError):
        ExecutionLimits(cpu_slots=0)
    with pytest.raises(ValueError):
        ExecutionLimits(build_timeout_s=10.0, validate_timeout_s=20.0)


def test_simulated_success_is_scripted(tmp_path):
    spec = _spec()
    backend = SimulatedBackend({spec.spec_digest: {"outcome": "success", "duration_s": 42.5}})
    result = backend.build_image(spec, _limits(), tmp_path)
    assert result.outcome == "success"
    assert result.build_duration_s == 42.5
    assert result.image_digest == derived_image_digest(spec.spec_digest)
    assert result.failure_category is None
    log = (tmp_path / f"{spec.spec_digest[:16]}.log").read_text()
    assert log.startswith("[build]")


def test_simulated_failure_is_classified_from_log(tmp_path):
    spec = _spec()
    backend = SimulatedBackend({spec.spec_digest: {
        "outcome": "failure", "duration_s": 3.0, "exit_status": 1,
        "log_text": "[build] ERROR: No matching distribution found for ghost\n",
    }})
    result = backend.build_image(spec, _limits(), tmp_path)
    assert result.outcome == "failure"
    assert result.failure_category == "dependency_install"
    assert result.exit_status == 1


def test_simulated_backend_is_deterministic(tmp_path):
    spec = _spec()
    script = {spec.spec_digest: {"outcome": "success", "duration_s": 10.0}}
    a = SimulatedBackend(script).build_image(spec, _limits(), tmp_path / "a")
    b = SimulatedBackend(script).build_image(spec, _limits(), tmp_path / "b")
    assert (a.outcome, a.build_duration_s, a.image_digest, a.exit_status) == \
           (b.outcome, b.build_duration_s, b.image_digest, b.exit_status)


def test_unmapped_digest_is_infrastructure_error(tmp_path):
    backend = SimulatedBackend({})
    with pytest.raises(InfrastructureError):
        backend.build_image(_spec(), _limits(), tmp_path)


def test_invalid_spec_rejected_before_backend(tmp_path):
    bad = BuildSpec(base_image=("python", "latest"), entrypoint=("x",), validate_cmd=("x",))
    backend = SimulatedBackend({})
    with pytest.raises(SpecValidationError):
        backend.build_image(bad, _limits(), tmp_path)


def test_scripted_timeout_becomes_resource_failure(tmp_path):
    spec = _spec()
    backend = SimulatedBackend({spec.spec_digest: {"outcome": "success", "duration_s": 7200.0}})
    result = backend.build_image(spec, _limits(build_timeout_s=3600.0), tmp_path)
    assert result.outcome == "failure"
    assert result.exit_status == TIMEOUT_MARKER
    assert result.build_duration_s == 3600.0  # terminated at the limit
    assert result.failure_category == "resource"


def test_validation_exit_rules(tmp_path):
    spec = _spec()
    backend = SimulatedBackend({spec.spec_digest: {
        "outcome": "success", "duration_s": 5.0, "validate_exit": 0}})
    built = backend.build_image(spec, _limits(), tmp_path)
    ok = backend.validate_tool(built.image_digest, spec.validate_cmd, _limits())
    assert ok.passed and ok.exit_status == 0

    spec2 = _spec(("python", "other.py"))
    backend2 = SimulatedBackend({spec2.spec_digest: {
        "outcome": "success", "duration_s": 5.0, "validate_exit": 2}})
    built2 = backend2.build_image(spec2, _limits(), tmp_path)
    bad = backend2.validate_tool(built2.image_digest, spec2.validate_cmd, _limits())
    assert not bad.passed and bad.exit_status == 2


def test_validation_network_isolation(tmp_path):
    spec = _spec()
    backend = SimulatedBackend({spec.spec_digest: {
        "outcome": "success", "duration_s": 5.0, "validate_attempts_network": True}})
    built = backend.build_image(spec, _limits(), tmp_path)
    first = backend.validate_tool(built.image_digest, spec.validate_cmd, _limits())
    second = backend.validate_tool(built.image_digest, spec.validate_cmd, _limits())
    assert not first.passed
    assert "network disabled" in first.log_excerpt
    assert (first.passed, first.exit_status, first.log_excerpt) == \
           (second.passed, second.exit_status, second.log_excerpt)


def test_validation_timeout_marker(tmp_path):
    spec = _spec()
    backend = SimulatedBackend({spec.spec_digest: {
        "outcome": "success", "duration_s": 5.0, "validate_duration_s": 900.0}})
    built = backend.build_image(spec, _limits(validate_timeout_s=300.0), tmp_path)
    result = backend.validate_tool(built.image_digest, spec.validate_cmd, _limits())
    assert not result.passed
    assert result.exit_status == TIMEOUT_MARKER


def test_validation_of_missing_image_is_infrastructure(tmp_path):
    backend = SimulatedBackend({})
    with pytest.raises(InfrastructureError):
        backend.validate_tool("sha256:missing", ("x",), _limits())


def test_scripted_infrastructure_error(tmp_path):
    spec = _spec()
    backend = SimulatedBackend({spec.spec_digest: {
        "outcome": "success", "infrastructure_error": "engine daemon unreachable"}})
    with pytest.raises(InfrastructureError, match="daemon"):
        backend.build_image(spec, _limits(), tmp_path)


def test_classifier_first_match_ordering():
    log = "Could not resolve host: pypi.org\nERROR: No matching distribution found for x\n"
    assert classify_failure(log, 1, "build") == "network"  # network outranks dependency


def test_classifier_fallbacks():
    assert classify_failure("nothing to see", TIMEOUT_MARKER, "build") == "resource"
    assert classify_failure("nothing to see", 3, "build") == "build_process"
    assert classify_failure("nothing to see", 3, "validate") == "unknown"
    with pytest.raises(ValueError):
        classify_failure("fine", 0, "build")
    with pytest.raises(ValueError):
        classify_failure("fine", 1, "deploy")


def test_classifier_totality_over_corpus(fixtures):
    labels = json.loads((fixtures / "failure_logs" / "labels.json").read_text())
    for name, info in labels.items():
        log = (fixtures / "failure_logs" / name).read_text()
        got = classify_failure(log, info["exit"], info["phase"])
        assert got in FAILURE_CATEGORIES
        assert got == info["category"], name


@pytest.mark.skipif(shutil.which("docker") or shutil.which("podman"),
                    reason="a container engine is present")
def test_engine_backend_unavailable_is_infrastructure():
    with pytest.raises(InfrastructureError):
        EngineBackend()


def test_make_backend_dispatch(tmp_path, fixtures):
    backend = make_backend("sim", fixtures / "pipeline" / "sim_script.json")
    assert isinstance(backend, SimulatedBackend)
    with pytest.raises(InfrastructureError):
        make_backend("sim", None)
    with pytest.raises(InfrastructureError):
        make_backend("warp", None)
