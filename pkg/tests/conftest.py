"""Shared fixtures: the acceptance summary printed after the run."""

import pytest

_SUMMARY = []


@pytest.fixture(scope="session")
def acceptance():
    """Record one summary line per acceptance check, then assert it."""

    def record(index: int, label: str, passed: bool, detail: str = ""):
        mark = "PASS" if passed else "FAIL"
        line = f"[{index:2d}] {label}: {mark}"
        if detail:
            line += f"  ({detail})"
        _SUMMARY.append((index, line))
        assert passed, f"{label}: {detail}"

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not _SUMMARY:
        return
    terminalreporter.section("acceptance summary")
    for _, line in sorted(_SUMMARY):
        terminalreporter.write_line(line)
