import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from conewave import corpus  # noqa: E402

ROOT = Path(__file__).resolve().parents[1]
SCENES = ROOT / "scenes"


@pytest.fixture(scope="session")
def surfaces():
    return corpus.surfaces()


@pytest.fixture(scope="session")
def square(surfaces):
    return surfaces["unit-square"]


@pytest.fixture(scope="session")
def fig1(surfaces):
    return surfaces["figure1"]


@pytest.fixture(scope="session")
def slit(surfaces):
    return surfaces["slit-cover"]


CRITERIA = {}  # number -> (passed, seconds, detail), filled by test_acceptance


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(CRITERIA):
        ok, secs, detail = CRITERIA[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {secs:7.1f} s  {detail}")
