import time

import numpy as np
import pytest

from emfv.core import MeanVector
from emfv.index import Band, BandedIndex
from emfv.synth import THREE_PERSON_BANDS


@pytest.fixture
def three_bands():
    return tuple(Band(p, a, b) for p, (a, b) in THREE_PERSON_BANDS.items())


@pytest.fixture
def three_index(three_bands):
    """Index holding exactly the three reported bands; the mean is a dummy
    1-D point so probes can be given as distances."""
    return BandedIndex(MeanVector(np.zeros(1), 3), three_bands, 1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def three_gallery():
    from emfv.synth import banded_gallery

    return banded_gallery(THREE_PERSON_BANDS, 8, 64, seed=3)


@pytest.fixture(scope="session")
def three_vector_index(three_gallery):
    """Index built from real vectors whose bands equal the reported ranges."""
    from emfv.index import build_index

    return build_index(three_gallery, margin=0.0)


_ACCEPTANCE: list[str] = []


class _Criterion:
    """Times one acceptance criterion and records a single pass/fail line."""

    def __init__(self, number, title, budget_s=None):
        self.number, self.title, self.budget_s = number, title, budget_s
        self.detail = ""

    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, exc_type, exc, tb):
        elapsed = time.perf_counter() - self.t0
        over = self.budget_s is not None and elapsed >= self.budget_s
        ok = exc_type is None and not over
        note = self.detail if exc_type is None else f"{exc_type.__name__}: {exc}".splitlines()[0]
        if over and exc_type is None:
            note += f" (over budget {self.budget_s:g}s)"
        line = (f"[{'PASS' if ok else 'FAIL'}] criterion {self.number}: {self.title}"
                f" | {note} | {elapsed:.2f}s")
        _ACCEPTANCE.append(line)
        print(line)
        if over and exc_type is None:
            raise AssertionError(line)
        return False


@pytest.fixture
def criterion():
    return _Criterion


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
