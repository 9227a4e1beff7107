import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from bicnn.text import Report  # noqa: E402

FILLER = "the study was compared with prior images and nothing new is seen today".split()


def keyword_corpus(n: int = 60, seed: int = 0) -> list[Report]:
    """Two classes separated by a single keyword hidden among filler words."""
    rng = np.random.default_rng(seed)
    reports = []
    for i in range(n):
        label = i % 2
        words = list(rng.choice(FILLER, size=rng.integers(4, 10)))
        words.insert(rng.integers(len(words) + 1), ["calcified", "effusion"][label])
        reports.append(Report.from_text(f"r{i}", " ".join(words) + ".", label))
    return reports


@pytest.fixture
def toy_reports():
    return keyword_corpus()


def pytest_terminal_summary(terminalreporter):
    import criteria

    if criteria.LINES:
        terminalreporter.section("acceptance criteria")
        for line in criteria.LINES:
            terminalreporter.write_line(line)
