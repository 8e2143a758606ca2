import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

_verdicts: dict[int, tuple[bool, str]] = {}


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion; a criterion fails if any of its checks fails."""

    def record(number: int, ok: bool, detail: str) -> bool:
        prev_ok, prev_detail = _verdicts.get(number, (True, ""))
        joined = f"{prev_detail}; {detail}" if prev_detail else detail
        _verdicts[number] = (prev_ok and ok, joined)
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'} {detail}")
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_verdicts):
        ok, detail = _verdicts[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'}  criterion {n}: {detail}")
