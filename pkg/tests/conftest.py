from pathlib import Path

import numpy as np
import pytest

from csgos.scene import Extent, Pose2H, Scene, SceneObject, load_scene

DATA = Path(__file__).resolve().parents[1] / "src" / "csgos" / "data"
SCENES = DATA / "scenes"
FIXTURES = Path(__file__).parent / "data"


def obj(oid, cat, x, y, z=0.5, mobility="stationary", r=0.3):
    return SceneObject(oid, cat, mobility, Pose2H(x, y, z), r)


def read_pgm_text(text):
    """Plain (P2) PGM text to an int array, rows top to bottom."""
    tokens = text.split()
    assert tokens[0] == "P2"
    w, h = int(tokens[1]), int(tokens[2])
    return np.array([int(t) for t in tokens[4:]]).reshape(h, w)


def room(objects, size=6.0, receptacles=(), walls=(), name="test"):
    return Scene(tuple(objects), tuple(receptacles), Extent(0.0, 0.0, size, size), tuple(walls), name=name)


@pytest.fixture(scope="session")
def kitchen():
    return load_scene(SCENES / "kitchen_small.json")


@pytest.fixture(scope="session")
def two_rooms():
    return load_scene(SCENES / "two_rooms.json")


_acceptance: dict[str, str] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py" not in report.nodeid:
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        name = report.nodeid.split("::", 1)[1]
        if _acceptance.get(name) != "FAIL":
            _acceptance[name] = "PASS" if report.passed else "FAIL"


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name, verdict in _acceptance.items():
        terminalreporter.write_line(f"{verdict}  {name}")
