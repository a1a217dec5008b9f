import re


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    """One pass/fail line per acceptance criterion, aggregated over its tests."""
    results = {}
    for outcome in ("passed", "failed"):
        for report in terminalreporter.stats.get(outcome, []):
            match = re.search(r"test_criterion_(\d+)", report.nodeid)
            if match:
                n = int(match.group(1))
                results[n] = results.get(n, True) and outcome == "passed"
    if results:
        terminalreporter.write_sep("-", "acceptance criteria")
        for n in sorted(results):
            terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if results[n] else 'FAIL'}")
