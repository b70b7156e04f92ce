import pytest

from veinbwr import synth

# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def small_dataset():
    """6 identities x 4 samples, enough for every end-to-end code path."""
    return synth.synthesize(6, 4, 11)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
