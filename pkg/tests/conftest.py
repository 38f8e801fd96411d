import pytest

_criterion_lines = []


@pytest.fixture
def criterion_report():
    """Record and print one pass/fail line per acceptance criterion."""

    def _report(number, passed, text):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {text}"
        _criterion_lines.append(line)
        print(line)
        return passed

    return _report


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if _criterion_lines:
        terminalreporter.section("acceptance criteria")
        for line in _criterion_lines:
            terminalreporter.write_line(line)
