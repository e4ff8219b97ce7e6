import numpy as np
import pytest


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# verdicts of the acceptance suite, printed after the run
ACCEPTANCE: dict[str, tuple[bool, str]] = {}


def record(criterion: str, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (ok, detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for criterion in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[criterion]
        terminalreporter.write_line(f"ACCEPTANCE {criterion} {'PASS' if ok else 'FAIL'}: {detail}")
