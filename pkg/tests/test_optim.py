import numpy as np
import pytest

from duodet.errors import NumericError
from duodet.optim import SGD
from duodet.tensor import Parameter


def make_param(value, pid="p"):
    p = Parameter(np.array(value, dtype=np.float64), pid)
    return p


class TestSGD:
    def test_zero_lr_leaves_params_unchanged(self):
        p = make_param([2.0, -1.0])
        p.grad = np.array([5.0, -3.0])
        SGD([p], lr=0.0, momentum=0.9).step()
        assert np.array_equal(p.data, [2.0, -1.0])

    def test_plain_step(self):
        p = make_param([2.0])
        p.grad = np.array([1.0])
        SGD([p], lr=0.1).step()
        assert p.data[0] == pytest.approx(1.9, abs=0)

    def test_momentum_matches_hand_unrolled_recursion(self):
        lr, mom = 0.1, 0.9
        p = make_param([1.0])
        opt = SGD([p], lr=lr, momentum=mom)
        g1, g2 = 0.5, -0.25
        p.grad = np.array([g1])
        opt.step()
        p.grad = np.array([g2])
        opt.step()
        v1 = g1
        x1 = 1.0 - lr * v1
        v2 = mom * v1 + g2
        x2 = x1 - lr * v2
        assert p.data[0] == x2

    def test_weight_decay_enters_gradient(self):
        p = make_param([2.0])
        p.grad = np.array([0.0])
        SGD([p], lr=0.1, weight_decay=0.5).step()
        # effective grad = 0 + 0.5*2.0 = 1.0
        assert p.data[0] == pytest.approx(2.0 - 0.1 * 1.0)

    def test_nan_gradient_aborts_without_touching_params(self):
        a = make_param([1.0], "a")
        b = make_param([1.0], "b")
        a.grad = np.array([0.5])
        b.grad = np.array([np.nan])
        opt = SGD([a, b], lr=0.1)
        with pytest.raises(NumericError, match="'b'"):
            opt.step()
        assert a.data[0] == 1.0 and b.data[0] == 1.0

    def test_params_without_grad_skipped(self):
        p = make_param([3.0])
        SGD([p], lr=0.1).step()
        assert p.data[0] == 3.0

    def test_zero_grad(self):
        p = make_param([1.0])
        p.grad = np.array([1.0])
        opt = SGD([p], lr=0.1)
        opt.zero_grad()
        assert p.grad is None

    def test_duplicate_ids_rejected(self):
        with pytest.raises(ValueError):
            SGD([make_param([0.0], "x"), make_param([1.0], "x")], lr=0.1)
