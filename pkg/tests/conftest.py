import numpy as np
import pytest
from hypothesis import HealthCheck, settings

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def max_rel_error(analytic, numeric) -> float:
    """max |a - n| normalised by the largest gradient magnitude in the tensor."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0), 1e-8)
    return float(np.abs(a - n).max(initial=0.0) / scale)


class TabularStepper:
    """Stepper whose logits depend only on the decoded prefix (lookup table)."""

    def __init__(self, table: dict, vocab_size: int, n: int = 1, default=None):
        self.table = table
        self.vocab_size = vocab_size
        self.n = n
        self.default = default if default is not None else np.zeros(vocab_size)

    def start(self):
        return [None] * self.n

    def step(self, state, prev):
        prefixes = [() if p is None else p + (int(t),) for p, t in zip(state, prev)]
        logits = np.stack([np.asarray(self.table.get(p, self.default), dtype=np.float64) for p in prefixes])
        return logits, prefixes

    def select(self, state, rows):
        return [state[i] for i in rows]


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def report_criterion(number: int, passed: bool, detail: str) -> None:
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
