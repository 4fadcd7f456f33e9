import time
from dataclasses import dataclass

import numpy as np
import pytest

from eh2d.model import NonlinearitySpec, simple_model

_RESULTS = []


@dataclass
class Criterion:
    label: str
    metric: str
    value: float
    threshold: float
    passed: bool
    seconds: float
    budget: float

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        return (
            f"{status} {self.label}: {self.metric} = {self.value:.4g} (threshold {self.threshold:.4g}), "
            f"{self.seconds:.2f}s of {self.budget:g}s"
        )


class Recorder:
    """Time one acceptance criterion and record its outcome."""

    def __init__(self, label: str, budget: float):
        self.label = label
        self.budget = budget
        self.t0 = time.perf_counter()

    def elapsed(self) -> float:
        return time.perf_counter() - self.t0

    def finish(self, metric: str, value: float, threshold: float, passed: bool) -> Criterion:
        secs = self.elapsed()
        crit = Criterion(self.label, metric, float(value), float(threshold), bool(passed) and secs < self.budget, secs, self.budget)
        _RESULTS.append(crit)
        return crit


@pytest.fixture
def criterion():
    return Recorder


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for crit in sorted(_RESULTS, key=lambda c: int(c.label.split()[0].lstrip("AC"))):
        terminalreporter.write_line(crit.line())


@pytest.fixture
def scalar_model():
    """Scalar plant on a 6x6 grid with one delay-free channel."""
    return simple_model(5, 0.5, 0.3, 1.0, 0.5, 1.0, [{"C": 1.0, "R": 0.5}])


@pytest.fixture
def two_channel_model():
    """n = 2 with a delayed second channel and both nonlinearities present."""
    g = NonlinearitySpec(np.array([[0.1, 0.0]]), np.array([[0.1, 0.1]]))
    h = NonlinearitySpec(np.array([[0.1]]), np.array([[0.2, 0.0]]))
    return simple_model(
        8,
        [[0.45, 0.05], [0.0, 0.40]],
        [[0.35, 0.0], [0.05, 0.30]],
        [[0.3], [0.2]],
        [[0.2], [0.3]],
        [[1.0]],
        [
            {"C": [[1.0, 0.5]], "R": [[0.4]], "h": h},
            {"C": [[0.3, 1.0]], "R": [[0.6]], "delay": (1, 2)},
        ],
        g=g,
        mean=np.array([0.5, -0.5]),
        cov=0.5 * np.eye(2),
    )
