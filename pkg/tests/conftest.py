import pytest
import torch

from ctxseg.numerics import set_precision


@pytest.fixture(autouse=True)
def _float32_default():
    set_precision("float32")
    yield
    set_precision("float32")


def pytest_configure(config):
    torch.set_num_threads(1)


# one line per acceptance criterion, printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
