import pytest

_LINES: list[tuple[str, bool, str]] = []


class Criterion:
    """Records one pass/fail line for the acceptance summary, then asserts."""

    def __call__(self, name: str, ok: bool, detail: str = "") -> None:
        _LINES.append((name, bool(ok), detail))
        assert ok, f"{name}: {detail}"


@pytest.fixture
def criterion():
    return Criterion()


def pytest_terminal_summary(terminalreporter):
    if not _LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in _LINES:
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  {name}  {detail}")
