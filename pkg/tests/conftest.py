import pytest
from hypothesis import settings

# compiled kernels make the first example slow
settings.register_profile("default", deadline=None)
settings.load_profile("default")

_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[_LINES] = []


@pytest.fixture
def criterion(request):
    """Record one pass/fail line for an acceptance criterion."""
    def log(number: int, ok: bool, detail: str) -> bool:
        request.config.stash[_LINES].append((number, f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"))
        print(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return log


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, text in sorted(lines):
            terminalreporter.write_line(text)
