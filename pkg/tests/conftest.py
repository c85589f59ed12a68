from pathlib import Path

import numpy as np
import pytest

from varipred.csvio import ingest
from varipred.data import BetweenData, Design, DesignKind, RepeatedData

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture
def fixtures_dir() -> Path:
    return FIXTURES


@pytest.fixture
def three_subject():
    """3 subjects, 2-4 observations each, a within covariate and a between covariate."""
    return ingest(FIXTURES / "within3.csv", FIXTURES / "between3.csv")


@pytest.fixture
def three_subject_mediation():
    return ingest(FIXTURES / "within3.csv", FIXTURES / "between3_med.csv", mediation=True)


def small_dataset(seed: int = 0, n: int = 12, k: int = 4, mediation: bool = False):
    rng = np.random.default_rng(seed)
    mu = rng.normal(5, 1, n)
    sig = rng.gamma(4, 0.5, n)
    subj = np.repeat(np.arange(n), k)
    v = rng.normal(mu[subj], sig[subj])
    y = 1.0 + 0.8 * sig + 0.3 * mu + rng.normal(0, 1, n)
    m = None
    if mediation:
        m = y.copy()
        y = 2.0 + 0.5 * m - 0.4 * sig + rng.normal(0, 1, n)
    return RepeatedData(subj, v), BetweenData(y, m)


DESIGNS = [Design(DesignKind.V_TO_Y, True), Design(DesignKind.V_TO_Y, False),
           Design(DesignKind.V_TO_M_TO_Y, True), Design(DesignKind.V_TO_M_TO_Y, False)]


ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion check."""

    def record(number: int, ok: bool, detail: str) -> bool:
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
