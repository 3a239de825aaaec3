from __future__ import annotations

import json
from pathlib import Path

import pytest

import deployforge.clients

FIXTURES = Path(__file__).resolve().parent / "fixtures"


@pytest.fixture(autouse=True)
def _fast_retries(monkeypatch):
    """Retry backoff must not slow the suite down; the delays themselves
    are asserted separately with an injected sleep."""
    monkeypatch.setattr(deployforge.clients.time, "sleep", lambda _s: None)


@pytest.fixture(scope="session")
def fixtures() -> Path:
    return FIXTURES


@pytest.fixture(scope="session")
def vocabulary() -> list[str]:
    return json.loads((FIXTURES / "vocabulary.json").read_text())
