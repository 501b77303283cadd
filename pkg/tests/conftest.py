import pytest

from cardiokit.features import features_from_records
from cardiokit.ingest import generate_synthetic_cohort


@pytest.fixture(scope="session")
def cohort6():
    """Six noisy synthetic subjects at 1 kHz."""
    return generate_synthetic_cohort(6, 90, 1000.0, seed=3, snr_db=20.0)


@pytest.fixture(scope="session")
def matrix6(cohort6):
    m, dropped = features_from_records(cohort6[0])
    assert dropped == 0
    return m

# acceptance verdicts, printed once at the end of the run
VERDICTS: dict[int, tuple[str, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(VERDICTS):
        verdict, detail = VERDICTS[n]
        terminalreporter.write_line(f"criterion {n:2d}: {verdict}  {detail}")
