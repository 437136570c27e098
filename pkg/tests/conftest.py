import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from immunoattn.datasets import ProteinRecord  # noqa: E402
from immunoattn.embedio import EmbeddingBundle  # noqa: E402

_criteria: list[tuple[str, str]] = []


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(name): acceptance criterion reported in the summary")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    report = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker and report.when == "call":
        _criteria.append((marker.args[0], "PASS" if report.passed else "FAIL"))


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for name, status in _criteria:
        terminalreporter.write_line(f"[{status}] {name}")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def random_bundle(rng, L, d, rid="x"):
    return EmbeddingBundle(
        rid,
        rng.normal(size=(L, d)).astype(np.float32),
        rng.integers(0, 20, L),
        rng.integers(0, 4096, L),
    )


@pytest.fixture
def records():
    return [
        ProteinRecord("p1", "MKTAYIAKQRQISFVKSHFSRQLEERLGL", 1, "bacteria"),
        ProteinRecord("p2", "GSHMLEDPVDAFQEAHKRLLEEAGKIWYD", 0, "bacteria"),
        ProteinRecord("p3", "ACDEFGHIKLMNPQRSTVWYACDEFGHIK", 1, "virus"),
    ]
