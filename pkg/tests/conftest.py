import pytest

_ACCEPTANCE: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion.

    The test calls ``criterion(n, title, detail)`` once it has its numbers; the
    line is marked FAIL unless the test body finishes without an assertion error.
    """
    state = {}

    def record(number: int, title: str, detail: str) -> None:
        state.update(number=number, title=title, detail=detail)

    yield record
    if state:
        rep = getattr(request.node, "rep_call", None)
        ok = rep is not None and rep.passed
        _ACCEPTANCE[state["number"]] = (
            f"[{'PASS' if ok else 'FAIL'}] criterion {state['number']}: {state['title']} ({state['detail']})"
        )


@pytest.hookimpl(wrapper=True, tryfirst=True)
def pytest_runtest_makereport(item, call):
    rep = yield
    if rep.when == "call":
        item.rep_call = rep
    return rep


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_ACCEPTANCE):
        terminalreporter.write_line(_ACCEPTANCE[number])
