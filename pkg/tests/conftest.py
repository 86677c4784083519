import pytest

from detloss.gradcheck import sample_box_pairs

# (criterion number, title, passed, detail) filled in by test_acceptance.py
ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def box_pairs():
    return sample_box_pairs(1200, seed=2024)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for number, title, passed, detail in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'} criterion {number}: {title} ({detail})")
