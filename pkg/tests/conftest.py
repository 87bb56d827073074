import pytest

CRITERIA = pytest.StashKey[dict]()


def pytest_configure(config):
    config.stash[CRITERIA] = {}


@pytest.fixture(scope="session")
def criterion_log(request):
    """``log(number, title, passed, detail)`` records one acceptance line for the terminal summary."""
    store = request.config.stash[CRITERIA]

    def log(number: int, title: str, passed: bool, detail: str) -> None:
        line = f"criterion {number} {title}: {'PASS' if passed else 'FAIL'} ({detail})"
        store[number] = line
        print(line)

    return log


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(CRITERIA, {})
    if store:
        terminalreporter.write_sep("=", "acceptance criteria")
        for k in sorted(store):
            terminalreporter.write_line(store[k])
