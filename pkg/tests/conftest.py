import os
from pathlib import Path

import pytest

from idsr.experiments import reference_embedder


@pytest.fixture(scope="session")
def embedder(tmp_path_factory):
    """Frozen RGB embedder pretrained on a disjoint identity pool (about a minute, once per session)."""
    cache = os.environ.get("IDSR_EMBEDDER_CACHE")
    path = Path(cache) if cache else tmp_path_factory.mktemp("emb") / "embedder.frem"
    return reference_embedder(channels=3, cache=path)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(n, passed, detail)``."""

    def record(number, passed, detail):
        line = f"CRITERION {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
