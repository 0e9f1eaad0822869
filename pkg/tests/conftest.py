import numpy as np
import pytest

from mixvi.tensor_ad import Tape, Variable


def numeric_grad(f, x: np.ndarray, h: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar function f at x."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in np.ndindex(x.shape):
        old = x[i]
        x[i] = old + h
        fp = f(x)
        x[i] = old - h
        fm = f(x)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def tape_grad(build, *values):
    """Gradients of the scalar build(*leaves) with respect to each leaf."""
    leaves = [Variable(np.array(v, dtype=np.float64), requires_grad=True) for v in values]
    with Tape() as tape:
        out = build(*leaves)
        grads = tape.backward(out, leaves)
    return float(out.value), [grads[v] for v in leaves]


def assert_grad_close(analytic, numeric, rtol=1e-4, floor=1e-8):
    analytic = np.asarray(analytic)
    numeric = np.asarray(numeric)
    mask = np.abs(analytic) > floor
    rel = np.abs(analytic - numeric)[mask] / np.abs(analytic)[mask]
    assert rel.size == 0 or rel.max() < rtol, f"max relative error {rel.max():.3g}"
    # coordinates with vanishing analytic gradient must also be tiny numerically
    assert np.all(np.abs(numeric[~mask]) < 1e-5)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = pytest.StashKey[list]()


def pytest_configure(config):
    config.stash[ACCEPTANCE_LINES] = []


@pytest.fixture(scope="session")
def acceptance_report(pytestconfig):
    """Record one verdict line per acceptance criterion; printed at the end of the session."""
    lines = pytestconfig.stash[ACCEPTANCE_LINES]

    def record(criterion: str, ok: bool, detail: str) -> bool:
        lines.append(f"{'PASS' if ok else 'FAIL'}  {criterion}  [{detail}]")
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_LINES, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
