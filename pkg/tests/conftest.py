"""Collects acceptance-criterion verdicts and prints them at the end of the run."""

import pytest

_VERDICTS: list[str] = []


@pytest.fixture
def criterion():
    """``criterion(number, title, ok, detail)`` records and prints one verdict line, then asserts ``ok``."""

    def record(number: int, title: str, ok: bool, detail: str = "") -> None:
        line = f"criterion {number} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        _VERDICTS.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter):
    if _VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
