"""Replay the acceptance scorecard after the normal pytest report so the
one-line verdict per criterion is visible without -s."""

import sys


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    if mod is None or not getattr(mod, "REPORT", None):
        return
    terminalreporter.write_sep("-", "acceptance scorecard")
    for line in mod.REPORT:
        terminalreporter.write_line(line)
