# one line per acceptance criterion, filled by test_acceptance.py
ACCEPTANCE_LINES = []


def _order(line):
    label = line.split()[1].rstrip(":")
    digits = "".join(c for c in label if c.isdigit())
    return int(digits), label


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=_order):
            terminalreporter.write_line(line)
