import pytest

# (number, title) -> (passed, detail); filled by the acceptance tests
ACCEPTANCE_RESULTS = {}


def record(number, title, passed, detail=""):
    ACCEPTANCE_RESULTS[(number, title)] = (bool(passed), detail)
    line = f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {title}  {detail}"
    print(line)
    return line


@pytest.fixture
def acceptance():
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), (passed, detail) in sorted(ACCEPTANCE_RESULTS.items()):
        terminalreporter.write_line(f"[criterion {number:>2}] {'PASS' if passed else 'FAIL'}  {title}  {detail}")
