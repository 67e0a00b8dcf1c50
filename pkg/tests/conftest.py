"""Collects acceptance-criterion outcomes and prints one line per criterion."""

import pytest

_RESULTS = {}


def pytest_runtest_makereport(item, call):
    marker = item.get_closest_marker("criterion")
    if marker is None or call.when not in ("setup", "call"):
        return
    number, title = marker.args
    failed = call.excinfo is not None
    if call.when == "setup" and not failed:
        return
    detail = "; ".join(v for k, v in item.user_properties if k == "detail")
    prev = _RESULTS.get(number)
    ok = not failed and (prev is None or prev[1])
    _RESULTS[number] = (title, ok, detail if not prev else "; ".join(filter(None, (prev[2], detail))))


def pytest_terminal_summary(terminalreporter):
    if not _RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_RESULTS):
        title, ok, detail = _RESULTS[number]
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}"
        terminalreporter.write_line(line + (f" ({detail})" if detail else ""))


@pytest.fixture
def detail(request):
    """Attach a short measurement to the criterion line."""

    def add(text):
        request.node.user_properties.append(("detail", text))

    return add
