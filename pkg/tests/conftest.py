import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).parent))

_criteria: dict = {}


def pytest_runtest_logreport(report):
    """Remember the outcome of every acceptance criterion test."""
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    failed = report.failed
    if report.when == "call" or failed:
        prev = _criteria.get(name, "PASS")
        _criteria[name] = "FAIL" if failed or prev == "FAIL" else ("SKIP" if report.skipped else "PASS")


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for name in sorted(_criteria, key=lambda s: int(s.split("_")[2])):
        num = name.split("_")[2]
        label = " ".join(name.split("_")[3:])
        tr.write_line(f"criterion {num} ({label}): {_criteria[name]}")
