from pathlib import Path

import pytest

from matef.library import ingest_binary
from matef.store import open_store
from matef.synth import synthetic_binaries

FIXTURES = Path(__file__).parent / "fixtures"

_criteria: list[tuple[str, bool, str]] = []


def record_criterion(name: str, passed: bool, detail: str = "") -> None:
    _criteria.append((name, passed, detail))


@pytest.fixture
def store(tmp_path):
    s = open_store(tmp_path)
    yield s
    s.close()


def add_binaries(store, count: int, seed: int = 0, tag: str = "network_artefacts") -> list[str]:
    """Ingest ``count`` inert synthetic binaries and return their hashes in creation order."""
    return [ingest_binary(store, b, "synthetic", [tag]).md5 for b in synthetic_binaries(count, seed)]


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in _criteria:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}" + (f"  ({detail})" if detail else ""))
