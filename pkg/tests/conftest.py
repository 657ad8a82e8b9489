import numpy as np
import pytest

from offline_rlhf import numerics as nx
from offline_rlhf.model import ModelConfig, init_params


def finite_difference(f, x: np.ndarray, idx, h: float = 1e-5) -> float:
    """Central difference of scalar ``f`` at ``x[idx]``; ``x`` is restored afterwards."""
    old = x[idx]
    x[idx] = old + h
    up = f()
    x[idx] = old - h
    down = f()
    x[idx] = old
    return (up - down) / (2 * h)


def grad_check(loss_fn, params, n_coords: int = 6, seed: int = 0, h: float = 1e-5) -> dict[str, float]:
    """Norm-wise relative error between analytic and central-difference grads.

    Samples ``n_coords`` coordinates from every parameter tensor.  Returns
    ``name -> relative error``.
    """
    nx.zero_grad(params.tensors.values())
    loss = loss_fn(params)
    nx.backward(loss)
    analytic = {k: t.grad.copy() for k, t in params.tensors.items()}
    nx.zero_grad(params.tensors.values())
    rng = np.random.default_rng(seed)
    errors = {}

    def value():
        with nx.no_grad():
            return loss_fn(params).item()

    for name, t in params.tensors.items():
        flat = t.data.reshape(-1)
        picks = rng.choice(flat.size, size=min(n_coords, flat.size), replace=False)
        a, n = [], []
        for p in picks:
            idx = np.unravel_index(p, t.data.shape)
            a.append(analytic[name][idx])
            n.append(finite_difference(value, t.data, idx, h))
        a, n = np.array(a), np.array(n)
        denom = max(np.linalg.norm(a), np.linalg.norm(n))
        errors[name] = 0.0 if denom < 1e-12 else float(np.linalg.norm(a - n) / denom)
    return errors


@pytest.fixture
def tiny_cfg():
    return ModelConfig(d_model=16, n_heads=2, n_layers=2, d_ff=32, max_seq_len=96)


@pytest.fixture
def tiny_params(tiny_cfg):
    params = init_params(tiny_cfg, seed=3)
    # spread the weights so gradients are not vanishingly small
    rng = np.random.default_rng(7)
    arrays = {k: v + rng.normal(0, 0.2, v.shape) for k, v in params.arrays().items()}
    return params.with_arrays(arrays)


# --- acceptance reporting -------------------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


@pytest.fixture(scope="session")
def report_criterion():
    """Record (and print) one PASS/FAIL line per acceptance criterion."""

    def record(number: int, passed: bool, detail: str) -> bool:
        line = f"[{'PASS' if passed else 'FAIL'}] criterion {number}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion ")[1].split(":")[0])):
            terminalreporter.write_line(line)
