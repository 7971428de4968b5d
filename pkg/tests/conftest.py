import pytest

from profileqm.solver import _backend

ACCEPTANCE_LINES: list = []

KERNELS = ["python"] + (["compiled"] if _backend.compiled is not None else [])


@pytest.fixture(params=KERNELS)
def kernel(request):
    """Every available active-set kernel, by name."""
    return request.param


@pytest.fixture
def record_criterion():
    """Record one acceptance line; the summary is printed at session end."""
    def record(number: int, passed: bool, detail: str):
        line = f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
