import pytest

CRITERIA_KEY = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA_KEY] = {}


@pytest.fixture
def criterion(request):
    """Record one part of an acceptance criterion: criterion(number, passed, detail)."""
    store = request.config.stash[CRITERIA_KEY]

    def record(number: int, passed, detail: str):
        store.setdefault(number, []).append((passed, detail))
        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(CRITERIA_KEY, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(store):
        parts = store[number]
        ok = all(p is not False for p, _ in parts)
        detail = "; ".join(d for _, d in parts)
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
