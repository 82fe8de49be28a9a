"""Collects acceptance verdicts and prints one line per criterion after the run."""
import verdicts


def pytest_terminal_summary(terminalreporter):
    if not verdicts.EXPECTED & verdicts.SEEN:
        return
    terminalreporter.section("acceptance criteria")
    for num in sorted(verdicts.SEEN):
        ok, detail = verdicts.RESULTS.get(num, (False, "did not complete"))
        terminalreporter.write_line(f"criterion {num}: {'PASS' if ok else 'FAIL'}  {detail}")
