import numpy as np
import pytest

from eflab.sequence import MixedSequence, Vocabulary

A, B, C = 0, 1, 2


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def vocab():
    return Vocabulary(4)


def seq(*elements, prompt_len=0, max_len=None):
    return MixedSequence(tuple(elements), prompt_len, max_len)


_CRITERIA_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record a MetricReport-like line; all lines are echoed in the terminal summary."""
    lines = request.config.stash.setdefault(_CRITERIA_KEY, [])

    def record(label: str, report) -> None:
        line = f"{label} {report.line()}"
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_CRITERIA_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
