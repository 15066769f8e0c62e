import numpy as np
import pytest

from mdse import tensor as T


def numeric_gradient(f, x, h=1e-5):
    """Central differences of scalar f() over every entry of tensor x (the independent oracle)."""
    g = np.zeros_like(x.data)
    it = np.nditer(x.data, flags=["multi_index"])
    with T.no_grad():
        for _ in it:
            i = it.multi_index
            old = x.data[i]
            x.data[i] = old + h
            fp = f().item()
            x.data[i] = old - h
            fm = f().item()
            x.data[i] = old
            g[i] = (fp - fm) / (2 * h)
    return g


def max_rel_error(a, b, floor=1e-10):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)))


@pytest.fixture
def rng():
    return np.random.Generator(np.random.PCG64(1234))


@pytest.fixture(scope="session")
def synthetic16(tmp_path_factory):
    from mdse.data import make_synthetic

    return make_synthetic(tmp_path_factory.mktemp("syn16"), 16, seed=0)


# ---------------------------------------------------------------- acceptance reporting

ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
