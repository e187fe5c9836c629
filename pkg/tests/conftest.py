import pytest

ACCEPTANCE: dict[int, tuple[str, str, str]] = {}


class Recorder:
    def __call__(self, number: int, name: str, passed: bool | None, detail: str = "") -> bool | None:
        status = "SKIP" if passed is None else ("PASS" if passed else "FAIL")
        ACCEPTANCE[number] = (name, status, detail)
        return passed


@pytest.fixture(scope="session")
def acceptance():
    return Recorder()


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        name, status, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{status}] criterion {number}: {name}" + (f" ({detail})" if detail else ""))
