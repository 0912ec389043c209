import pytest

_VERDICTS: list[str] = []


class Verdicts:
    """Collects one PASS/FAIL line per acceptance criterion for the terminal summary."""

    def record(self, number: int, title: str, ok: bool, detail: str) -> bool:
        _VERDICTS.append(f"{'PASS' if ok else 'FAIL'} [{number:>2}] {title}: {detail}")
        return ok


@pytest.fixture(scope="session")
def verdicts():
    return Verdicts()


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in sorted(_VERDICTS, key=lambda s: int(s.split("[")[1].split("]")[0])):
        terminalreporter.write_line(line)
