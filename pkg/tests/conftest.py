import pytest

# (criterion number, passed, detail) rows reported by the acceptance tests
CRITERIA = []


@pytest.fixture
def record_criterion():
    def record(number, passed, detail):
        CRITERIA.append((number, bool(passed), detail))
        print(f"criterion {number}: {'PASS' if passed else 'FAIL'} ({detail})")
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number, passed, detail in sorted(CRITERIA, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}")
