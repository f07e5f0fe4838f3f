import numpy as np
import pytest

from dimreid import numerics as nx


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def fd_check(fn, inputs, eps=1e-5):
    """Max relative error of tape gradients of ``sum(fn(*inputs))`` against
    central differences, over every input entry."""
    tensors = [nx.Tensor(a.copy(), requires_grad=True) for a in inputs]
    with nx.Tape() as tape:
        loss = nx.reduce_sum(fn(*tensors))
    grads = nx.backward(loss, tape)
    worst = 0.0
    with nx.no_tape():
        for t in tensors:
            for idx in np.ndindex(t.shape):
                old = t.data[idx]
                t.data[idx] = old + eps
                hi = float(nx.reduce_sum(fn(*tensors)).data)
                t.data[idx] = old - eps
                lo = float(nx.reduce_sum(fn(*tensors)).data)
                t.data[idx] = old
                num = (hi - lo) / (2 * eps)
                ana = grads[t][idx] if t in grads else 0.0
                worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), 1e-8))
    return worst


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import RESULTS
    except ImportError:
        return
    if RESULTS:
        terminalreporter.section("acceptance criteria")
        for line in RESULTS:
            terminalreporter.write_line(line)
