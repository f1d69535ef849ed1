import pytest

VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Print and collect one PASS/FAIL line per acceptance check, then assert it."""

    def record(criterion, ok: bool, detail: str):
        line = f"[criterion {criterion}] {'PASS' if ok else 'FAIL'}: {detail}"
        print(line)
        VERDICTS.append(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in VERDICTS:
            terminalreporter.write_line(line)
