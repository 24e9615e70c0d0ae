import os

import pytest

from manifold_forecast import pipeline

# Monte-Carlo runs for the table reproductions; the stated tolerances assume 100.
ACCEPTANCE_RUNS = int(os.environ.get("MF_ACCEPTANCE_RUNS", "100"))

_REPORT = {}


def record(criterion, passed, detail=""):
    """Store one PASS/FAIL line for the end-of-session acceptance summary."""
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}" + (f"  {detail}" if detail else "")
    _REPORT[criterion] = line
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if not _REPORT:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_REPORT):
        terminalreporter.write_line(_REPORT[key])


def _table(name):
    return pipeline.run_experiment(pipeline.load_preset(name), n_runs=ACCEPTANCE_RUNS)


@pytest.fixture(scope="session")
def table1():
    return _table("table1")


@pytest.fixture(scope="session")
def table2():
    return _table("table2")


@pytest.fixture(scope="session")
def table3():
    return _table("table3")
