import os
import sys

# make the oracle helpers importable as a plain module
sys.path.insert(0, os.path.dirname(__file__))


def pytest_terminal_summary(terminalreporter):
    from report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(LINES):
            terminalreporter.write_line(LINES[n])
