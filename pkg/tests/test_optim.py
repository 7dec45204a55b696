import math

import numpy as np
import pytest

from satd.errors import ScheduleError
from satd.optim import AdamW, cosine_lr, multistep_lr
from satd.tensor import Tensor


def adamw_reference(p, grads, lr, betas, eps, wd):
    """Plain-loop AdamW for comparison."""
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    for t, g in enumerate(grads, start=1):
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        p = p * (1 - lr * wd)
        p = p - lr * (m / (1 - betas[0] ** t)) / (np.sqrt(v / (1 - betas[1] ** t)) + eps)
    return p


def test_adamw_matches_reference_loop():
    rng = np.random.default_rng(0)
    p0 = rng.normal(size=(3, 2))
    grads = [rng.normal(size=(3, 2)) for _ in range(7)]
    w = Tensor(p0.copy(), requires_grad=True)
    opt = AdamW([w], weight_decay=0.05)
    for g in grads:
        w.grad = g.copy()
        opt.step(1e-2)
    np.testing.assert_allclose(w.data, adamw_reference(p0, grads, 1e-2, (0.9, 0.999), 1e-8, 0.05), rtol=0, atol=1e-14)


def test_zero_lr_leaves_weights_unchanged():
    w = Tensor(np.arange(4.0), requires_grad=True)
    opt = AdamW([w], weight_decay=0.1)
    w.grad = np.ones(4)
    opt.step(0.0)
    np.testing.assert_array_equal(w.data, np.arange(4.0))
    assert opt.t == 1


def test_state_roundtrip():
    w = Tensor(np.ones(3), requires_grad=True)
    opt = AdamW([w])
    w.grad = np.array([1.0, -2.0, 3.0])
    opt.step(0.1)
    other = AdamW([Tensor(np.ones(3), requires_grad=True)])
    other.load_state_arrays(opt.state_arrays())
    assert other.t == 1
    np.testing.assert_array_equal(other.m[0], opt.m[0])
    np.testing.assert_array_equal(other.v[0], opt.v[0])


def test_owns():
    a, b = Tensor([1.0]), Tensor([2.0])
    opt = AdamW([a])
    assert opt.owns([a]) and not opt.owns([a, b]) and not opt.owns([b])


def test_cosine_lr_examples():
    assert cosine_lr(0, 100, 5e-4) == 5e-4
    assert abs(cosine_lr(100, 100, 5e-4)) < 1e-20
    assert math.isclose(cosine_lr(50, 100, 5e-4), 2.5e-4, rel_tol=1e-12)


@pytest.mark.parametrize("step,total", [(101, 100), (-1, 10), (0, 0)])
def test_cosine_lr_rejects_out_of_range(step, total):
    with pytest.raises(ScheduleError):
        cosine_lr(step, total, 1.0)


def test_multistep_lr():
    assert multistep_lr(0, 1e-4, [18, 27]) == 1e-4
    assert math.isclose(multistep_lr(18, 1e-4, [18, 27]), 1e-5)
    assert math.isclose(multistep_lr(29, 1e-4, [18, 27]), 1e-6)
