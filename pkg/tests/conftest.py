import pytest

from edgestream.model import ELEC_SCHEMA, StreamTuple


@pytest.fixture
def elec():
    return ELEC_SCHEMA


@pytest.fixture
def elec_tuple():
    return StreamTuple(1, 1_700_000_000_000_000_000,
                       ("2023-01-01", 7, 5, 0.6, 0.42, 0.003, 0.42, 0.41))


# -- acceptance criteria bookkeeping ----------------------------------------------
# Tests marked ``criterion(n, title)`` are folded into one verdict per criterion
# and printed at the end of the run.

_verdicts: dict = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion covered by the test")


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    mark = item.get_closest_marker("criterion")
    if mark is None or (rep.when != "call" and not rep.failed):
        return
    number, title = mark.args
    entry = _verdicts.setdefault(number, {"title": title, "passed": 0, "failed": 0, "notes": []})
    entry["failed" if rep.failed else "passed"] += 1
    entry["notes"].extend(v for k, v in item.user_properties if k == "observed")


def pytest_terminal_summary(terminalreporter):
    if not _verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_verdicts):
        v = _verdicts[number]
        verdict = "PASS" if v["failed"] == 0 else "FAIL"
        notes = f"  [{'; '.join(v['notes'])}]" if v["notes"] else ""
        terminalreporter.write_line(f"criterion {number}: {verdict}  {v['title']}{notes}")
