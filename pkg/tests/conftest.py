import os

import pytest
from hypothesis import HealthCheck, settings

from pvtrack.pv_model import cs6p_250p_array, derive_base_params

settings.register_profile(
    "default",
    deadline=None,
    max_examples=int(os.environ.get("HYPOTHESIS_MAX_EXAMPLES", "60")),
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


@pytest.fixture(scope="session")
def array_sheet():
    return cs6p_250p_array()


@pytest.fixture(scope="session")
def base(array_sheet):
    return derive_base_params(array_sheet)


# acceptance reporting: one PASS/FAIL line per criterion ---------------------------

_CRITERIA: dict[int, list] = {}


def pytest_runtest_makereport(item, call):
    mark = item.get_closest_marker("criterion")
    if mark is None or call.when != "call":
        return
    n, title = mark.args
    measured = "; ".join(str(v) for k, v in item.user_properties if k == "measured")
    _CRITERIA.setdefault(n, [title, []])[1].append((item.name, call.excinfo is None, measured))


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    tr = terminalreporter
    tr.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        title, parts = _CRITERIA[n]
        ok = all(p[1] for p in parts)
        tr.write_line(f"C{n:<2} {'PASS' if ok else 'FAIL'}  {title}")
        for name, passed, measured in parts:
            tr.write_line(f"      {'ok  ' if passed else 'FAIL'} {name}{': ' + measured if measured else ''}")
