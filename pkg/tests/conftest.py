import numpy as np
import pytest

from cass import tensorcore as tc

# filled by the acceptance tests, echoed at the end of the run
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def numeric_grad(fn, arrays, step=1e-6):
    """Central finite differences of scalar ``fn(*arrays)`` w.r.t. each array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        it = np.nditer(a, flags=["multi_index"])
        for _ in it:
            i = it.multi_index
            old = a[i]
            a[i] = old + step
            hi = fn(*arrays)
            a[i] = old - step
            lo = fn(*arrays)
            a[i] = old
            g[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def analytic_grad(build, arrays):
    """Gradients of ``build(*tensors)`` through the tape."""
    leaves = [tc.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with tc.Graph() as g:
        out = build(*leaves)
        g.backward(out)
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]


def rel_error(a, b):
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_gradients(build, arrays, tol=1e-5, step=1e-6):
    arrays = [np.array(a, dtype=np.float64) for a in arrays]

    def value(*xs):
        return float(build(*[tc.Tensor(x) for x in xs]).data)

    num = numeric_grad(value, arrays, step)
    ana = analytic_grad(build, arrays)
    return max(rel_error(n, a) for n, a in zip(num, ana))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
