from __future__ import annotations

from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=60,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"
MNIST_IMAGES = DATA / "mnist5k-images-idx3-ubyte.gz"
MNIST_LABELS = DATA / "mnist5k-labels-idx1-ubyte.gz"


@pytest.fixture(scope="session")
def mnist5k():
    from sparsenn.data import load_idx
    return load_idx(MNIST_IMAGES, MNIST_LABELS, name="mnist5k")


# -- acceptance summary ---------------------------------------------------------

def pytest_configure(config):
    config._acceptance_lines = []


@pytest.fixture
def criterion(request):
    """``criterion(n, ok, detail)`` records and prints one PASS/FAIL line."""
    lines = request.config._acceptance_lines

    def record(n: int, ok: bool, detail: str) -> bool:
        line = f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
