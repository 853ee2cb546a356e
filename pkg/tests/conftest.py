import pytest

_CRITERIA: dict[int, tuple[str, list[str]]] = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number n")


@pytest.hookimpl(wrapper=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    mark = item.get_closest_marker("criterion")
    if mark is not None and (rep.when == "call" or rep.failed):
        n = mark.args[0]
        prev, details = _CRITERIA.get(n, ("PASS", []))
        details = details + [v for k, v in item.user_properties if k == "detail" and v not in details]
        _CRITERIA[n] = ("FAIL" if rep.failed or prev == "FAIL" else "PASS", details)
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        status, details = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n}: {status}" + (f"  ({'; '.join(details)})" if details else ""))
