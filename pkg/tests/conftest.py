import warnings

import numpy as np
import pytest

from vwn import numcore as nc


@pytest.fixture(autouse=True)
def _fresh_tape():
    nc.current_tape().clear()
    nc.flop_counter.enabled = False
    nc.flop_counter.reset()
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        yield
    nc.current_tape().clear()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def param(data) -> nc.Tensor:
    return nc.Tensor(data, requires_grad=True)


def check_grads(loss_fn, tensors, tol=1e-4):
    """Tape gradient vs. central differences for every tensor; returns the worst error."""
    for t in tensors:
        t.grad = None
    nc.backward(loss_fn())
    worst = 0.0
    for t in tensors:
        analytic = t.grad if t.grad is not None else np.zeros(t.shape)
        numeric = nc.finite_difference_grad(loss_fn, t)
        worst = max(worst, nc.gradcheck_error(analytic, numeric))
    assert worst < tol, worst
    return worst
