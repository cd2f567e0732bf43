"""Shared pytest plumbing: collects the acceptance suite's one-line
verdicts and echoes them in the terminal summary, where they stay
visible even though pytest captures per-test stdout."""

ACCEPTANCE_LINES = []


def record(line: str) -> None:
    ACCEPTANCE_LINES.append(line)


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
