import numpy as np
import pytest

from eir.tensor import Tensor


def numeric_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function of an array."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = fn(x)
        flat[i] = old - h
        fm = fn(x)
        flat[i] = old
        gf[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    """Max relative error with an absolute floor for near-zero entries."""
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-6)))


def check_grad(build, *arrays, h=1e-5):
    """Compare tape gradients of ``build(*tensors)`` against finite differences.

    Returns the largest relative error over all inputs.
    """
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    loss = build(*tensors)
    loss.backward()
    worst = 0.0
    for k, a in enumerate(arrays):
        work = [x.copy() for x in arrays]

        def f(xk, k=k):
            work[k] = xk
            return build(*[Tensor(w) for w in work]).item()

        num = numeric_grad(f, work[k].copy(), h)
        worst = max(worst, rel_error(tensors[k].grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


_ACCEPTANCE_KEY = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record a line for the acceptance summary: ``criterion(n, ok, detail)``; ``ok=None`` means skipped."""
    lines = request.config.stash.setdefault(_ACCEPTANCE_KEY, [])

    def record(number: int, ok, detail: str) -> bool:
        lines.append((number, ok, detail))
        return bool(ok)

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE_KEY, [])
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for number, ok, detail in sorted(lines, key=lambda t: t[0]):
        status = "SKIP" if ok is None else "PASS" if ok else "FAIL"
        terminalreporter.write_line(f"{status} criterion {number}: {detail}")
