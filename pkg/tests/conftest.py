import numpy as np
import pytest
import torch


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)


def finite_difference_check(fn, x, n_probe=12, eps=1e-6, rtol=1e-3, seed=0):
    """Compare autograd's gradient of scalar ``fn(x)`` with central differences.

    Probes a random subset of coordinates; ``x`` must be float64.
    """
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    grad = x.grad.detach().reshape(-1)
    gen = torch.Generator().manual_seed(seed)
    idx = torch.randperm(x.numel(), generator=gen)[:n_probe]
    flat = x.detach().reshape(-1)
    for i in idx.tolist():
        plus, minus = flat.clone(), flat.clone()
        plus[i] += eps
        minus[i] -= eps
        with torch.no_grad():
            fd = (fn(plus.reshape(x.shape)) - fn(minus.reshape(x.shape))) / (2 * eps)
        an = grad[i]
        scale = max(abs(float(fd)), abs(float(an)), 1e-6)
        assert abs(float(fd) - float(an)) <= rtol * scale + 1e-8, (i, float(fd), float(an))
    return grad


# pass/fail lines from test_acceptance.py, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
