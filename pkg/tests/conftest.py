"""Shared pytest plumbing: prints the acceptance-criterion result lines
in the terminal summary, where output capture cannot hide them.
"""

import sys


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = []
    for name, mod in list(sys.modules.items()):
        if name.rsplit(".", 1)[-1] == "test_acceptance":
            lines = getattr(mod, "RESULTS", [])
            if lines:
                break
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for line in lines:
        terminalreporter.write_line(line)
