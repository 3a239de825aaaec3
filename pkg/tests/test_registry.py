from __future__ import annotations

import math

import pytest
from oracles import tf_cosine

from deployforge.clients import MockEmbedder
from deployforge.errors import RegistryConflictError, UnknownToolError
from deployforge.funnel import DomainTaxonomy
from deployforge.registry import (
    ToolEntry,
    ToolRegistry,
    assign_domains,
    cosine,
    tool_id_for,
)

MD_DEF = "molecular dynamics simulation of protein structures"
QC_DEF = "quantum chemistry electronic structure calculations"


@pytest.fixture()
def taxonomy() -> DomainTaxonomy:
    return DomainTaxonomy(domains=[
        ("d-md", "Molecular Dynamics", MD_DEF),
        ("d-qc", "Quantum Chemistry", QC_DEF),
    ])


@pytest.fixture()
def embedder(vocabulary) -> MockEmbedder:
    return MockEmbedder(vocabulary)


def _entry(tool_id="h/a@c0ffee", **kw) -> ToolEntry:
    defaults = dict(
        tool_id=tool_id,
        name="a",
        description="molecular dynamics simulation",
        entrypoint=("python", "a.py"),
        image_digest="sha256:" + "0" * 64,
    )
    defaults.update(kw)
    return ToolEntry(**defaults)


def test_cosine_reflexive_orthogonal_and_zero():
    assert cosine([0.5, 0.5], [0.5, 0.5]) == 1.0
    assert cosine([1.0, 0.0], [0.0, 1.0]) == 0.0
    assert cosine([0.0, 0.0], [1.0, 0.0]) == 0.0
    assert cosine([0.0, 0.0], [0.0, 0.0]) == 0.0
    with pytest.raises(ValueError):
        cosine([1.0], [1.0, 2.0])


def test_register_persists_and_is_idempotent(tmp_path):
    store = tmp_path / "registry.jsonl"
    registry = ToolRegistry(store)
    registry.register(_entry())
    before = store.read_bytes()
    registry.register(_entry())  # identical content: byte-level no-op
    assert store.read_bytes() == before
    assert len(ToolRegistry(store)) == 1


def test_register_conflict_on_divergent_content(tmp_path):
    registry = ToolRegistry(tmp_path / "registry.jsonl")
    registry.register(_entry())
    with pytest.raises(RegistryConflictError):
        registry.register(_entry(description="different text"))


def test_entries_are_validated_only():
    with pytest.raises(ValueError):
        ToolEntry(tool_id="x", name="x", description="", entrypoint=("x",),
                  image_digest="sha256:0", validated=False)


def test_store_roundtrip_preserves_entries(tmp_path):
    store = tmp_path / "registry.jsonl"
    registry = ToolRegistry(store)
    entry = _entry(domains=[("d-md", 0.75)], tags=["md"])
    registry.register(entry)
    reloaded = ToolRegistry(store).get(entry.tool_id)
    assert reloaded.canonical_line() == entry.canonical_line()


def test_tool_id_derivation():
    assert tool_id_for("github.com/lab/x", "abc123") == "github.com/lab/x@abc123"


def test_self_similar_description_scores_one(taxonomy, embedder):
    assigned = assign_domains(MD_DEF, taxonomy, embedder)
    scores = dict(assigned)
    assert scores["d-md"] == 1.0


def test_orthogonal_description_gets_no_domains(taxonomy, embedder):
    assert assign_domains("stellar photometry pipeline", taxonomy, embedder) == []


def test_mixed_description_matches_hand_computed_cosine(taxonomy, embedder, vocabulary):
    description = "protein folding simulation"
    assigned = dict(assign_domains(description, taxonomy, embedder))
    expected = 1.0 / math.sqrt(3.0)  # overlap {protein, simulation}; |u|=3 terms, |v|=4
    assert abs(assigned["d-md"] - expected) < 1e-12
    oracle = tf_cosine(description, MD_DEF, vocabulary)
    assert abs(assigned["d-md"] - oracle) < 1e-12
    assert "d-qc" not in assigned  # below threshold


def test_threshold_monotonicity(taxonomy, embedder):
    description = "protein folding simulation of molecular dynamics"
    sizes = []
    for threshold in (0.0, 0.25, 0.5, 0.75, 1.0):
        sizes.append(len(assign_domains(description, taxonomy, embedder, threshold)))
    assert sizes == sorted(sizes, reverse=True)


def test_threshold_bounds_checked(taxonomy, embedder):
    with pytest.raises(ValueError):
        assign_domains("x", taxonomy, embedder, threshold=1.5)


def test_search_ranks_exact_description_first(tmp_path, embedder):
    registry = ToolRegistry(tmp_path / "registry.jsonl")
    registry.register(_entry("h/a@1", description="molecular dynamics simulation"))
    registry.register(_entry("h/b@1", name="b", description="quantum chemistry toolkit"))
    registry.register(_entry("h/c@1", name="c", description="genome sequence alignment"))
    ranked = registry.search("molecular dynamics simulation", embedder)
    assert ranked[0][1].tool_id == "h/a@1"
    assert ranked[0][0] == 1.0


def test_search_filters_are_conjunctive(tmp_path, embedder):
    registry = ToolRegistry(tmp_path / "registry.jsonl")
    registry.register(_entry("h/a@1", domains=[("d-md", 0.9)], tags=["md"],
                             primary_language="Python"))
    registry.register(_entry("h/b@1", name="b", domains=[("d-md", 0.8)], tags=["viz"],
                             primary_language="C"))
    hits = registry.search("molecular", embedder, domain="d-md", tag="md")
    assert [e.tool_id for _, e in hits] == ["h/a@1"]
    assert registry.search("molecular", embedder, domain="d-xx") == []
    assert [e.tool_id for _, e in registry.search(
        "molecular", embedder, language="C")] == ["h/b@1"]


def test_search_matches_brute_force_ranking(tmp_path, embedder, vocabulary):
    descriptions = [
        "molecular dynamics simulation",
        "protein folding study",
        "quantum chemistry electronic structure",
        "genome sequence alignment toolkit",
        "fluid mesh solver",
        "climate model analysis",
        "particle imaging pipeline",
        "crystal lattice spectra",
        "neural network fitting",
        "astronomy photometry pipeline",
    ]
    registry = ToolRegistry(tmp_path / "registry.jsonl")
    for i, desc in enumerate(descriptions):
        registry.register(_entry(f"h/t{i:02d}@1", name=f"t{i:02d}", description=desc))
    query = "protein folding simulation"
    ranked = [(s, e.tool_id) for s, e in registry.search(query, embedder, limit=10)]
    brute = sorted(
        ((tf_cosine(query, desc, vocabulary), f"h/t{i:02d}@1")
         for i, desc in enumerate(descriptions)),
        key=lambda pair: (-pair[0], pair[1]),
    )
    assert [t for _, t in ranked] == [t for _, t in brute]
    for (got_s, _), (want_s, _) in zip(ranked, brute):
        assert abs(got_s - want_s) < 1e-12


def test_export_manifest_matches_golden_bytes(fixtures, tmp_path):
    golden = (fixtures / "pipeline" / "golden_manifest.json").read_bytes()
    registry_file = tmp_path / "registry.jsonl"
    registry_file.write_bytes((fixtures / "pipeline" / "golden_registry.jsonl").read_bytes())
    registry = ToolRegistry(registry_file)
    tool_id = next(t.tool_id for t in registry.entries() if "qchem" in t.tool_id)
    manifest = registry.export_manifest(tool_id)
    assert manifest.encode("utf-8") == golden
    assert registry.export_manifest(tool_id) == manifest  # byte-stable


def test_export_unknown_tool_errors(tmp_path):
    registry = ToolRegistry(tmp_path / "registry.jsonl")
    with pytest.raises(UnknownToolError):
        registry.export_manifest("h/none@1")


def test_store_never_contains_unvalidated_entries(fixtures, tmp_path):
    registry_file = tmp_path / "registry.jsonl"
    registry_file.write_bytes((fixtures / "pipeline" / "golden_registry.jsonl").read_bytes())
    assert all(e.validated for e in ToolRegistry(registry_file).entries())
