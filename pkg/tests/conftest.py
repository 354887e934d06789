import numpy as np
import pytest

from diffusionnet.geometry import BumpySphereConfig, Shape, bumpy_sphere, icosphere, normalized
from diffusionnet.operators import compute_operators

# criterion lines collected by test_acceptance.py
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def sphere2():
    return Shape(icosphere(2), name="icosphere2")


@pytest.fixture(scope="session")
def bumpy_small():
    return normalized(bumpy_sphere(BumpySphereConfig(subdiv=2), seed=3))


@pytest.fixture(scope="session")
def bumpy_small_ops(bumpy_small):
    return compute_operators(bumpy_small, k=32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


@pytest.fixture(autouse=True)
def _isolated_stamp(tmp_path, monkeypatch):
    monkeypatch.setenv("DIFFUSIONNET_STAMP_DIR", str(tmp_path / "stamp"))
