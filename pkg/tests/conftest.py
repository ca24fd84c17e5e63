def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """Echo the acceptance criteria verdicts collected during the run."""
    try:
        from test_acceptance import REPORT_LINES
    except ImportError:
        return
    if REPORT_LINES:
        terminalreporter.write_sep("-", "acceptance criteria")
        for line in REPORT_LINES:
            terminalreporter.write_line(line)
