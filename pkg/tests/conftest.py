import sys

import numpy as np
import pytest

from cdtlearn import tensor as T

FD_STEP = 1e-6


def numeric_grad(f, x, h=FD_STEP):
    """Central finite differences of scalar ``f`` (taking a numpy array) at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2 * h)
    return g


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(b)), np.max(np.abs(a)), 1e-8))


def autograd(f, *arrays):
    """Reverse-mode gradients of scalar ``f(*tensors)`` w.r.t. every argument."""
    ts = [T.Tensor(a, requires_grad=True) for a in arrays]
    out = f(*ts)
    return [g.data for g in T.grad(out, ts)]


def check_grad(f, *arrays, tol=1e-4):
    """Assert reverse-mode gradients of ``f`` match central differences for each argument."""
    grads = autograd(f, *arrays)
    for k, a in enumerate(arrays):
        def fk(x, k=k):
            args = [T.Tensor(v) for v in arrays]
            args[k] = T.Tensor(x)
            return f(*args).item()

        num = numeric_grad(fk, a)
        err = rel_err(grads[k], num)
        assert err < tol, f"argument {k}: relative error {err:.2e}"
    return grads


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    results = getattr(module, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(results):
        terminalreporter.write_line(results[n])
