import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def float64_default():
    """Oracle and gradient tests run in double precision."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(prev)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance verdict lines, repeated in the terminal summary
VERDICTS = []


@pytest.fixture
def verdict(capsys):
    def emit(n, title, ok, detail=""):
        line = f"ACCEPTANCE {n:>2} {'PASS' if ok else 'FAIL'}: {title}" + (f" ({detail})" if detail else "")
        VERDICTS.append(line)
        with capsys.disabled():
            print("\n" + line)
        return ok
    return emit


def pytest_terminal_summary(terminalreporter):
    if VERDICTS:
        terminalreporter.section("acceptance criteria")
        for line in sorted(VERDICTS, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
