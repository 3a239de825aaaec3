from __future__ import annotations

from pathlib import Path

import pytest

from deployforge.analyzer import EvidenceBundle, build_evidence, ingest, inventory_artifacts
from deployforge.buildspec import BuildSpec, render
from deployforge.clients import MockTextCompleter, RepoMetadata
from deployforge.errors import BudgetExceededError, ProposalError
from deployforge.specengine import (
    DebateTranscript,
    ModelProposer,
    ModelReviewer,
    ReviewFinding,
    RuleProposer,
    RuleReviewer,
    apply_edit,
    guess_entrypoint,
    readme_install_commands,
    readme_usage_command,
    refine_loop,
)

UPLIFT = Path(__file__).resolve().parent / "fixtures" / "uplift"


def _evidence_for(repo_dir: Path, tmp: Path) -> EvidenceBundle:
    meta = RepoMetadata(repo_id=f"fixture/{repo_dir.name}", url=repo_dir.name,
                        local_path=str(repo_dir))
    snapshot = ingest(meta, dest_root=tmp)
    return build_evidence(snapshot, inventory_artifacts(snapshot), search=None)


@pytest.fixture()
def evidence_loader(tmp_path):
    def load(name: str) -> EvidenceBundle:
        return _evidence_for(UPLIFT / name, tmp_path)
    return load


# ── Evidence mining ───────────────────────────────────────────────────


def test_install_commands_come_from_install_section_only():
    readme = (
        "# tool\n\n## Install\n\n```\npip install -r requirements.txt\nmake\n```\n"
        "\n## Usage\n\n```\npython main.py --fast\n```\n"
    )
    assert readme_install_commands(readme) == ["pip install -r requirements.txt", "make"]
    assert readme_usage_command(readme) == ("python", "main.py", "--fast")


def test_install_commands_strip_sudo_and_skip_prose():
    readme = "## Installation\n\nRun the following:\n\n```\nsudo make install\n```\n"
    assert readme_install_commands(readme) == ["make install"]


def test_usage_command_ignores_build_lines():
    readme = "```\nsh bootstrap.sh\npython analysis.py\n```\n"
    assert readme_usage_command(readme) == ("python", "analysis.py")


def test_entrypoint_guess_prefers_docs_then_files(evidence_loader):
    ev = evidence_loader("u14-staleentry")
    assert guess_entrypoint(ev) == ("python", "run_tool.py")  # trusts the stale doc
    assert guess_entrypoint(ev, trust_docs=False) == ("python", "main.py")


# ── Proposers ─────────────────────────────────────────────────────────


def test_rule_proposer_templates_requirements(evidence_loader):
    spec = RuleProposer().propose(evidence_loader("u01-pyreq"))
    assert spec.base_image == ("python", "3.11-slim")
    assert spec.build_steps == ("pip install -r requirements.txt",)
    assert spec.entrypoint == ("python", "main.py")
    assert spec.validate_cmd == ("python", "main.py", "--help")


def test_rule_proposer_adopts_existing_recipe(evidence_loader):
    spec = RuleProposer().propose(evidence_loader("u10-docker"))
    assert spec.base_image == ("python", "3.11-slim")
    assert spec.workdir == "/app"
    assert spec.entrypoint == ("python", "main.py")
    assert spec.build_steps == ("pip install -r requirements.txt",)


def test_rule_proposer_fails_without_evidence(evidence_loader):
    with pytest.raises(ProposalError):
        RuleProposer().propose(evidence_loader("u20-noevidence"))


def test_rule_proposer_sanitizes_interactive_doc_commands(tmp_path):
    ev = EvidenceBundle(
        repo_id="h/x",
        readme_text="## Install\n\n```\napt-get install libfoo-dev\n```\n",
        file_paths=["main.py"],
        primary_language="Python",
    )
    spec = RuleProposer().propose(ev)
    assert spec.build_steps == ("apt-get install -y libfoo-dev",)


def test_model_proposer_parses_and_validates():
    recipe = (
        "FROM python:3.11-slim\nWORKDIR /app\nCOPY . /app\n"
        "RUN pip install .\nCMD [\"python\", \"x.py\"]\n"
    )
    ev = EvidenceBundle(repo_id="h/x", readme_text="r", file_paths=["x.py"])
    proposer = ModelProposer(_scripted_completer(ev, recipe))
    spec = proposer.propose(ev)
    assert spec.entrypoint == ("python", "x.py")
    assert spec.validate_cmd == ("python", "x.py", "--help")


def _scripted_completer(ev: EvidenceBundle, *responses: str) -> MockTextCompleter:
    proposer = ModelProposer.__new__(ModelProposer)  # only for context building
    proposer._client = None
    table = {}
    parse_error = None
    for resp in responses:
        context = ModelProposer._context(proposer, ev, None, parse_error)
        table[MockTextCompleter.table_key("proposer", context)] = resp
        parse_error = "response did not contain a parseable recipe"
    return MockTextCompleter(table)


def test_model_proposer_reprompts_once_then_fails():
    ev = EvidenceBundle(repo_id="h/x", readme_text="r", file_paths=["x.py"])
    completer = _scripted_completer(ev, "gibberish", "still gibberish")
    with pytest.raises(ProposalError):
        ModelProposer(completer).propose(ev)


# ── Rule reviewer ─────────────────────────────────────────────────────


def test_reviewer_flags_missing_file_with_edit(evidence_loader):
    ev = evidence_loader("u12-staledoc")
    spec = RuleProposer().propose(ev)
    findings = RuleReviewer().review(spec, ev)
    blockers = [f for f in findings if f.severity == "blocker"]
    assert len(blockers) == 1
    assert "setup_env.sh" in blockers[0].claim
    assert blockers[0].target == "build_steps"
    assert blockers[0].proposed_edit == ("pip install -r requirements.txt",)


def test_reviewer_flags_eol_base_image(evidence_loader):
    ev = evidence_loader("u15-eolubuntu")
    spec = RuleProposer().propose(ev)
    findings = RuleReviewer().review(spec, ev)
    eol = [f for f in findings if f.target == "base_image"]
    assert len(eol) == 1
    assert eol[0].severity == "blocker"
    assert eol[0].proposed_edit == ("ubuntu", "22.04")


def test_reviewer_flags_uninstalled_requirements(evidence_loader):
    ev = evidence_loader("u17-missingdep")
    spec = RuleProposer().propose(ev)
    findings = RuleReviewer().review(spec, ev)
    dep = [f for f in findings if "requirements.txt" in f.claim]
    assert len(dep) == 1
    assert dep[0].proposed_edit == (
        "pip install numpy", "pip install -r requirements.txt")


def test_reviewer_replaces_stale_entrypoint_and_validate_cmd(evidence_loader):
    ev = evidence_loader("u14-staleentry")
    spec = RuleProposer().propose(ev)
    findings = {f.target: f for f in RuleReviewer().review(spec, ev)}
    assert findings["entrypoint"].proposed_edit == ("python", "main.py")
    assert findings["validate_cmd"].proposed_edit == ("python", "main.py", "--help")


def test_reviewer_requests_regeneration_when_no_alternative_exists():
    ev = EvidenceBundle(repo_id="h/x", readme_text="", file_paths=["data.csv"])
    spec = BuildSpec(base_image=("python", "3.11-slim"),
                     entrypoint=("python", "gone.py"),
                     validate_cmd=("python", "gone.py", "--help"))
    findings = RuleReviewer().review(spec, ev)
    regen = [f for f in findings if f.needs_regeneration]
    assert len(regen) == 1
    assert regen[0].severity == "blocker"


def test_reviewer_is_deterministic(evidence_loader):
    ev = evidence_loader("u12-staledoc")
    spec = RuleProposer().propose(ev)
    first = [f.to_dict() for f in RuleReviewer().review(spec, ev)]
    second = [f.to_dict() for f in RuleReviewer().review(spec, ev)]
    assert first == second


def test_blocker_findings_require_edit_or_regeneration():
    with pytest.raises(ValueError):
        ReviewFinding(severity="blocker", target="x", claim="c", evidence_ref="file_index")


def test_clean_spec_gets_no_findings(evidence_loader):
    ev = evidence_loader("u01-pyreq")
    spec = RuleProposer().propose(ev)
    assert RuleReviewer().review(spec, ev) == []


# ── Refinement loop ───────────────────────────────────────────────────


def test_loop_stable_first_round_when_clean(evidence_loader):
    ev = evidence_loader("u01-pyreq")
    spec, transcript = refine_loop(ev, RuleProposer(), RuleReviewer())
    assert transcript.final_status == "stable"
    assert len(transcript.rounds) == 1
    assert transcript.rounds[0]["action"] == "accepted"


def test_loop_fixes_stale_doc_in_two_rounds(evidence_loader):
    ev = evidence_loader("u12-staledoc")
    spec, transcript = refine_loop(ev, RuleProposer(), RuleReviewer())
    assert transcript.final_status == "stable"
    assert [r["action"] for r in transcript.rounds] == ["edited", "accepted"]
    assert spec.build_steps == ("pip install -r requirements.txt",)


class _AlwaysBlockReviewer:
    """Adversarial critic: objects to every recipe with a changing edit."""

    def __init__(self):
        self.round = 0

    def review(self, spec, evidence):
        self.round += 1
        return [ReviewFinding(
            severity="blocker", target="env_vars",
            claim=f"objection {self.round}", evidence_ref="file_index",
            proposed_edit=((f"OBJECTION_{self.round}", "1"),),
        )]


def test_loop_exhausts_rounds_against_adversarial_reviewer(evidence_loader):
    ev = evidence_loader("u01-pyreq")
    spec, transcript = refine_loop(ev, RuleProposer(), _AlwaysBlockReviewer(), max_rounds=4)
    assert transcript.final_status == "unstable"
    assert len(transcript.rounds) == 4
    assert all(r["action"] == "edited" for r in transcript.rounds)
    # best-effort recipe still comes back for an execution attempt
    assert spec.entrypoint == ("python", "main.py")


class _StaticEditReviewer:
    """Proposes the same edit forever; the loop must detect the fixed point."""

    def review(self, spec, evidence):
        return [ReviewFinding(
            severity="blocker", target="workdir", claim="pin the workdir",
            evidence_ref="file_index", proposed_edit="/work",
        )]


def test_loop_detects_digest_fixed_point(evidence_loader):
    ev = evidence_loader("u01-pyreq")
    spec, transcript = refine_loop(ev, RuleProposer(), _StaticEditReviewer(), max_rounds=4)
    # the edit does not change the recipe (workdir already /work): converged
    assert transcript.final_status == "stable"
    assert "converged_with_blockers" in transcript.flags
    assert len(transcript.rounds) == 1


def test_loop_monotone_blocker_shrinkage(evidence_loader, tmp_path):
    reviewer = RuleReviewer()
    for name in ("u12-staledoc", "u14-staleentry", "u15-eolubuntu",
                 "u17-missingdep", "u18-nodedep", "u19-rustdep"):
        ev = _evidence_for(UPLIFT / name, tmp_path)
        spec = RuleProposer().propose(ev)
        prev = {(f.target, f.claim) for f in reviewer.review(spec, ev)
                if f.severity == "blocker"}
        while prev:
            for f in reviewer.review(spec, ev):
                if f.severity == "blocker" and f.proposed_edit is not None:
                    spec = apply_edit(spec, f)
            cur = {(f.target, f.claim) for f in reviewer.review(spec, ev)
                   if f.severity == "blocker"}
            assert cur < prev  # strict subset each pass
            prev = cur


def test_loop_is_deterministic(evidence_loader):
    ev = evidence_loader("u16-eolpython")
    a_spec, a_tr = refine_loop(ev, RuleProposer(), RuleReviewer())
    b_spec, b_tr = refine_loop(ev, RuleProposer(), RuleReviewer())
    assert a_spec == b_spec
    assert a_tr.to_dict() == b_tr.to_dict()


class _BudgetedReviewer:
    def review(self, spec, evidence):
        raise BudgetExceededError("review budget spent")


def test_reviewer_budget_error_marks_transcript_unreviewed(evidence_loader):
    ev = evidence_loader("u01-pyreq")
    spec, transcript = refine_loop(ev, RuleProposer(), _BudgetedReviewer())
    assert transcript.final_status == "stable"
    assert "unreviewed" in transcript.flags
    assert render(spec)  # recipe still produced


def test_model_reviewer_silence_and_json_findings():
    ev = EvidenceBundle(repo_id="h/x", readme_text="", file_paths=["a.py"])
    spec = BuildSpec(base_image=("python", "3.11-slim"), entrypoint=("python", "a.py"),
                     validate_cmd=("python", "a.py", "--help"))
    context = {"task": "review_recipe", "repo_id": "h/x", "recipe": render(spec)}
    key = MockTextCompleter.table_key("reviewer", context)
    finding_json = ('[{"severity": "blocker", "target": "workdir", "claim": "use /srv",'
                    ' "evidence_ref": "file_index", "proposed_edit": "/srv"}]')
    reviewer = ModelReviewer(MockTextCompleter({key: finding_json}))
    findings = reviewer.review(spec, ev)
    assert len(findings) == 1
    assert findings[0].proposed_edit == "/srv"
    # unscripted context falls through to the no-objections default
    other = BuildSpec(base_image=("python", "3.11-slim"), entrypoint=("python", "a.py"),
                      validate_cmd=("python", "a.py", "--version"))
    assert ModelReviewer(MockTextCompleter({key: finding_json})).review(other, ev) == []


def test_transcript_round_bookkeeping():
    transcript = DebateTranscript()
    transcript.add_round("d1", [], "accepted")
    with pytest.raises(ValueError):
        transcript.add_round("d2", [], "exploded")
    assert transcript.rounds[0]["spec_digest"] == "d1"
