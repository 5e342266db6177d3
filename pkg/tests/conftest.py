import pytest

_VERDICTS = pytest.StashKey[dict]()


@pytest.fixture
def criterion(request):
    """Register one part of an acceptance criterion; call the result when it passes.

    A criterion reads PASS only when every registered part has passed.
    """
    verdicts = request.config.stash.setdefault(_VERDICTS, {})

    def record(number, title):
        entry = verdicts.setdefault(number, {"title": title, "started": 0, "passed": 0})
        entry["started"] += 1

        def passed():
            entry["passed"] += 1

        return passed

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    verdicts = config.stash.get(_VERDICTS, {})
    if not verdicts:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(verdicts):
        entry = verdicts[number]
        verdict = "PASS" if entry["passed"] == entry["started"] else "FAIL"
        terminalreporter.write_line(f"{verdict} criterion {number}: {entry['title']}")
