import pytest

_VERDICTS = {}


def _key(item):
    mark = item.get_closest_marker("criterion")
    return (mark.args[0], mark.args[1]) if mark else (None, None)


@pytest.fixture
def verdict(request):
    """``verdict(ok, detail)`` records the measured outcome of the test's acceptance criterion."""
    key, title = _key(request.node)

    def record(ok, detail):
        _VERDICTS[key] = (bool(ok), f"{title}: {detail}")
        return ok

    return record


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n, title): numbered acceptance criterion")


def pytest_collection_modifyitems(config, items):
    for item in items:
        key, title = _key(item)
        if key is not None:
            _VERDICTS.setdefault(key, (None, title))


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    key, title = _key(item)
    if key is None or rep.when != "call":
        return
    ok, detail = _VERDICTS.get(key, (None, title))
    if rep.failed and ok is not False:
        # crashed or failed an assertion the verdict did not cover
        _VERDICTS[key] = (False, f"{detail} [{call.excinfo.typename if call.excinfo else 'failed'}]")


def pytest_terminal_summary(terminalreporter):
    if not _VERDICTS:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_VERDICTS):
        ok, detail = _VERDICTS[key]
        status = "PASS" if ok else ("NOT RUN" if ok is None else "FAIL")
        terminalreporter.write_line(f"criterion {key}: {status}  {detail}")
