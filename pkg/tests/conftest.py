import pytest

_ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report(request):
    """Call ``report(number, title, ok, elapsed, detail)`` once per criterion."""
    def report(number, title, ok, elapsed, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  ({elapsed:.1f} s)  {detail}".rstrip()
        _ACCEPTANCE_LINES.append(line)
        print(line)
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(_ACCEPTANCE_LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
