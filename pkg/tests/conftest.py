import json
from pathlib import Path

import pytest

from headprobe import corpus as C
from headprobe import model as mm

GOLDEN = Path(__file__).parent / "golden"


@pytest.fixture(scope="session")
def planted():
    return mm.default_model()


@pytest.fixture(scope="session")
def detuned():
    return mm.detuned_model()


@pytest.fixture(scope="session")
def inert():
    return mm.build_model(mm.ModelConfig(), [])


@pytest.fixture(scope="session")
def small_corpus():
    return C.generate_corpus(C.CorpusConfig(num_mains=40), seed=3)


@pytest.fixture(scope="session")
def scene7():
    doc = json.loads((GOLDEN / "scene_seed7.json").read_text())
    objs = tuple(C.Obj(k, c, s, o, r, q) for k, c, s, o, r, q in doc["objects"])
    return C.Scene(doc["grid_size"], objs, tuple(tuple(f) for f in doc["facts"]))


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
