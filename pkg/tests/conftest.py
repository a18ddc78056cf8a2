import contextlib

import pytest

# criterion number -> (passed, detail); filled by the acceptance tests
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def criterion():
    """Context manager recording one acceptance line: PASS unless the body raises."""

    @contextlib.contextmanager
    def run(number: int, title: str):
        notes: list[str] = []
        try:
            yield notes
        except BaseException as exc:
            ACCEPTANCE[number] = (False, f"{title}: {' '.join(notes)} {type(exc).__name__}: "
                                         f"{str(exc).splitlines()[0] if str(exc) else ''}".strip())
            print(f"ACCEPTANCE {number} FAIL {ACCEPTANCE[number][1]}")
            raise
        ACCEPTANCE[number] = (True, f"{title}: {' '.join(notes)}".strip())
        print(f"ACCEPTANCE {number} PASS {ACCEPTANCE[number][1]}")

    return run


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {detail}")
