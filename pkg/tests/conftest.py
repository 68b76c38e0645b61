import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def verdict():
    """Record one PASS/FAIL line; the lines are echoed at the end of the run."""
    def record(number: int, title: str, ok: bool, detail: str, seconds: float):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}: {detail} [{seconds:.2f} s]"
        _VERDICTS.append(line)
        print(line)
        return ok
    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS):
            terminalreporter.write_line(line)
