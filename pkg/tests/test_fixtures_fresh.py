"""Guard against drift between generated fixtures and the code that feeds them.

The completion table, the simulated-backend script, and the golden run
outputs are derived artifacts; if recipe rendering or evidence extraction
changes, they must be regenerated. This test regenerates everything into a
temp directory and compares bytes with what is committed.
"""

from __future__ import annotations

import make_fixtures


def test_generated_fixtures_are_fresh(fixtures, tmp_path):
    out = tmp_path / "regen"
    make_fixtures.generate(out)
    for rel in (
        "completions.json",
        "githost/labels.json",
        "pipeline/sim_script.json",
        "pipeline/golden_trace.jsonl",
        "pipeline/golden_registry.jsonl",
        "pipeline/golden_manifest.json",
    ):
        regenerated = (out / rel).read_bytes()
        committed = (fixtures / rel).read_bytes()
        assert regenerated == committed, (
            f"{rel} is stale; rerun tests/make_fixtures.py and commit the result"
        )
