import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_verdicts: list[str] = []


def record_verdict(line: str) -> None:
    print(line)
    _verdicts.append(line)


def pytest_terminal_summary(terminalreporter):
    if _verdicts:
        terminalreporter.section("acceptance criteria")
        for line in _verdicts:
            terminalreporter.write_line(line)
