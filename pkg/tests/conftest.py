import numpy as np
import pytest

from scmil import numerics as nx
from scmil.bag_data import SyntheticConfig, generate_synthetic_cohort

FD_STEP = 1e-5


def central_difference(f, x, h=FD_STEP):
    """Gradient of scalar f at array x by central differences (x is restored)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_err(a, b, floor=1e-8):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def check_op_gradient(op, arrays, seed=0):
    """Compare tape gradients of sum(R * op(*inputs)) with central differences.

    Returns the worst relative error over all inputs.
    """
    rng = np.random.default_rng(seed)
    tensors = [nx.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with nx.Tape() as tape:
        out = op(*tensors)
        weights = rng.standard_normal(out.shape)
        loss = nx.sum_all(nx.mul(out, weights))
    tape.backward(loss)
    worst = 0.0
    for t in tensors:
        def f():
            return float((op(*[nx.Tensor(u.value) for u in tensors]).value * weights).sum())
        numeric = central_difference(f, t.value)
        analytic = t.grad if t.grad is not None else np.zeros_like(t.value)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


def check_param_gradient(loss_fn, params):
    """Compare tape gradients of the scalar ``loss_fn()`` wrt ``params`` with central differences."""
    for p in params:
        p.grad = None
    with nx.Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        numeric = central_difference(lambda: loss_fn().item(), p.value)
        analytic = p.grad if p.grad is not None else np.zeros_like(p.value)
        worst = max(worst, rel_err(analytic, numeric))
    return worst


@pytest.fixture(scope="session")
def small_cohort():
    cfg = SyntheticConfig(n_patients=30, patches_per_bag=(20, 60), d=8, seed=3)
    bags, records = generate_synthetic_cohort(cfg)
    return {b.patient_id: b for b in bags}, records


# ---------------------------------------------------------------- acceptance report

ACCEPTANCE_LINES = []


def record_criterion(number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
