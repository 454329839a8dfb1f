"""Shared pytest wiring: re-emit acceptance verdict lines after the run.

The acceptance tests print one pass/fail line per criterion; default output
capture would swallow those, so they are replayed in the terminal summary.
"""

import sys


def pytest_terminal_summary(terminalreporter):
    lines = []
    for name, mod in list(sys.modules.items()):
        if name.rpartition(".")[2] == "test_acceptance":
            lines = getattr(mod, "VERDICT_LINES", [])
            if lines:
                break
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
