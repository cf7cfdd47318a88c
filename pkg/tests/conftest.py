import contextlib

CRITERIA: dict[int, tuple[bool, str]] = {}


@contextlib.contextmanager
def criterion(number: int, text: str):
    """Record the outcome of one acceptance criterion for the end-of-run summary."""
    try:
        yield
    except BaseException:
        CRITERIA[number] = (False, text)
        print(f"FAIL criterion {number}: {text}")
        raise
    CRITERIA[number] = (True, text)
    print(f"PASS criterion {number}: {text}")


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(CRITERIA):
        ok, text = CRITERIA[n]
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {n}: {text}")
