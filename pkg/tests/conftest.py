import time

import pytest

from fmo_petasim.calibrate import TimingRecord
from fmo_petasim.fragments import WorkloadShape

# Published GAMESS-FMO timings: single IBM p5 node and a 16-CPU Xeon cluster.
IBM_ROWS = [
    # n_f, n_d, n_es, monomer, scf-dimer, es-dimer, elapsed
    (106, 690, 4875, 1356, 2037, 398, 3799),
    (561, 4192, 152888, 13364, 20689, 13772, 47886),
    (1122, 8416, 620465, 40005, 70465, 55955, 166601),
    (2244, 16832, 2499814, 140810, 186901, 208627, 536898),
]
XEON_ROWS = [
    (106, 690, 4875, 1030.4, 1677.4, 293.1, 3003.5),
    (561, 4192, 152888, 10808.9, 17517.6, 9594.8, 38065.9),
    (1122, 8416, 620465, 33989.2, 50819.2, 39133.4, 126330.9),
]


def _records(machine, k, rows):
    return [
        TimingRecord(machine, k, WorkloadShape(n_f, 17, n_d, n_es), tm, td, te, tt)
        for n_f, n_d, n_es, tm, td, te, tt in rows
    ]


@pytest.fixture
def ibm_records():
    return _records("ibm", 1, IBM_ROWS)


@pytest.fixture
def xeon_records():
    return _records("xeon", 16, XEON_ROWS)


@pytest.fixture
def published_records(ibm_records, xeon_records):
    return ibm_records + xeon_records


# --- acceptance reporting ---------------------------------------------------------

_ACCEPTANCE_KEY = pytest.StashKey[list]()


_START_KEY = pytest.StashKey[float]()


def pytest_configure(config):
    config.stash[_ACCEPTANCE_KEY] = []
    config.stash[_START_KEY] = time.perf_counter()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion.

    Usage: ``acceptance(number, ok, detail)``. The line is echoed immediately
    and repeated in the terminal summary.
    """
    lines = request.config.stash[_ACCEPTANCE_KEY]
    reporter = request.config.pluginmanager.get_plugin("terminalreporter")

    def record(number, ok, detail):
        line = f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        if reporter is not None:
            reporter.write_line("")
            reporter.write_line(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
        wall = time.perf_counter() - config.stash[_START_KEY]
        verdict = "PASS" if wall < 60 else "FAIL"
        terminalreporter.write_line(f"criterion 8 (runtime): {verdict}  whole session {wall:.1f} s (bound 60 s)")
