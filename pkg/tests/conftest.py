import pytest

_LINES = []


def record_criterion(number, ok: bool, detail: str) -> bool:
    line = f"CRITERION {number}: {'PASS' if ok else 'FAIL'} | {detail}"
    _LINES.append(line)
    print(line, flush=True)
    return ok


@pytest.fixture
def criterion():
    return record_criterion


def pytest_terminal_summary(terminalreporter):
    if _LINES:
        terminalreporter.section("acceptance criteria")
        for line in _LINES:
            terminalreporter.write_line(line)
