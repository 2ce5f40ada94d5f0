from __future__ import annotations

import sys
from pathlib import Path

import pytest
from hypothesis import settings

sys.path.insert(0, str(Path(__file__).parent))

settings.register_profile("default", max_examples=60, deadline=None)
settings.load_profile("default")

FIXTURES = Path(__file__).parent / "fixtures" / "transcripts"
TARGETS = (50, 100, 150, 200, 300, 500)


@pytest.fixture
def fixture_dir() -> Path:
    return FIXTURES


@pytest.fixture
def cell_targets() -> dict[str, int]:
    return {f"vp_{t}": t for t in TARGETS}


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(RESULTS):
            terminalreporter.write_line(line)
