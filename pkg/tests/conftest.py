import numpy as np
import pytest

from qflow import autodiff as ad


def numeric_grads(fn, params, eps=1e-5):
    """Central differences of scalar fn() w.r.t. every entry of every param."""
    out = []
    for p in params:
        g = np.zeros_like(p.data)
        it = np.nditer(p.data, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = p.data[idx]
            p.data[idx] = orig + eps
            up = fn().item()
            p.data[idx] = orig - eps
            down = fn().item()
            p.data[idx] = orig
            g[idx] = (up - down) / (2 * eps)
        out.append(g)
    return out


def max_rel_error(analytic, numeric, floor=1e-6):
    err = 0.0
    for a, n in zip(analytic, numeric):
        scale = np.maximum(np.abs(a) + np.abs(n), floor)
        err = max(err, float(np.max(np.abs(a - n) / scale)))
    return err


def check_grads(fn, params, eps=1e-5):
    loss = fn()
    g = ad.grad_backward(loss, params)
    return max_rel_error([g[id(p)] for p in params], numeric_grads(fn, params, eps))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting ---------------------------------------------------------

ACCEPTANCE: dict = {}


def record_criterion(number: int, passed: bool, detail: str) -> None:
    ACCEPTANCE[number] = (bool(passed), detail)
    print(f"criterion {number}: {'PASS' if passed else 'FAIL'} - {detail}")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"criterion {number:2d}: {'PASS' if passed else 'FAIL'} - {detail}")
