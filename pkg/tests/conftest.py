import contextlib
import time

import pytest

_CRITERIA = {}


class _Record:
    def __init__(self, number, title):
        self.number = number
        self.title = title
        self.detail = ""
        self.passed = False


@pytest.fixture
def criterion():
    """Context manager that records one acceptance criterion's outcome.

    The body sets ``rec.detail``; any exception marks the criterion failed and
    is re-raised so the test fails too.
    """
    @contextlib.contextmanager
    def run(number, title):
        rec = _Record(number, title)
        _CRITERIA[number] = rec
        t0 = time.perf_counter()
        try:
            yield rec
        except BaseException as exc:
            rec.detail = f"{rec.detail}  [{type(exc).__name__}: {str(exc).splitlines()[0] if str(exc) else ''}]"
            raise
        else:
            rec.passed = True
        finally:
            rec.detail = f"{rec.detail}  ({time.perf_counter() - t0:.1f} s)".strip()

    return run


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(_CRITERIA):
        rec = _CRITERIA[number]
        status = "PASS" if rec.passed else "FAIL"
        terminalreporter.write_line(f"criterion {number:2d} {status}  {rec.title}: {rec.detail}")
