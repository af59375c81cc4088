import pytest

from msanet.tensor import set_deterministic

# filled by test_acceptance; one (criterion, passed, detail) entry per criterion
ACCEPTANCE: list[tuple[int, bool, str]] = []


@pytest.fixture(autouse=True, scope="session")
def _deterministic_blas():
    set_deterministic(True)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for num, ok, detail in sorted(ACCEPTANCE):
        terminalreporter.write_line(f"{'PASS' if ok else 'FAIL'} criterion {num}: {detail}")
