import pytest
import torch

# single-threaded runs keep timings and float reductions reproducible
torch.set_num_threads(1)

ACCEPTANCE_RESULTS = []


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(ACCEPTANCE_RESULTS, key=lambda r: str(r[0])):
        terminalreporter.write_line(f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}")


@pytest.fixture(scope="session")
def acceptance_log():
    return ACCEPTANCE_RESULTS
