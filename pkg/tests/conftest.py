import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

from marl_curiosity.nn import tune_allocator  # noqa: E402

tune_allocator()

# Acceptance checks append (criterion, passed, detail) here; printed at session end.
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for name, ok, detail in ACCEPTANCE_LINES:
        label = ok if isinstance(ok, str) else ("PASS" if ok else "FAIL")
        terminalreporter.write_line(f"{label}  {name}: {detail}")
