import math

import numpy as np
import pytest

from abd.model import ScanError, selective_scan
from abd.model import autodiff as ad
from abd.model.autodiff import Tensor
from abd.model.scan import selective_scan_op


def loop_oracle(x, delta, A, B, C, D):
    L, d = x.shape
    N = A.shape[1]
    h = [[0.0] * N for _ in range(d)]
    y = np.zeros((L, d))
    for t in range(L):
        for i in range(d):
            acc = 0.0
            for n in range(N):
                h[i][n] = math.exp(delta[t, i] * A[i, n]) * h[i][n] + delta[t, i] * B[t, n] * x[t, i]
                acc += C[t, n] * h[i][n]
            y[t, i] = acc + D[i] * x[t, i]
    return y


def random_instance(rng, L, d, N):
    return (rng.normal(size=(L, d)), np.log1p(np.exp(rng.normal(size=(L, d)))),
            -np.exp(rng.normal(size=(d, N))), rng.normal(size=(L, N)), rng.normal(size=(L, N)),
            rng.normal(size=d))


def test_matches_loop_oracle_100_instances():
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(100):
        L, d, N = rng.integers(1, 33), rng.integers(1, 9), rng.integers(1, 9)
        args = random_instance(rng, L, d, N)
        worst = max(worst, float(np.max(np.abs(selective_scan(*args) - loop_oracle(*args)))))
    assert worst <= 1e-12


def test_batched_matches_per_sequence():
    rng = np.random.default_rng(1)
    items = [random_instance(rng, 7, 3, 4) for _ in range(3)]
    A, D = items[0][2], items[0][5]
    x, delta, B, C = (np.stack([it[j] for it in items]) for j in (0, 1, 3, 4))
    y = selective_scan(x, delta, A, B, C, D)
    for b, it in enumerate(items):
        np.testing.assert_allclose(y[b], selective_scan(it[0], it[1], A, it[3], it[4], D), rtol=0, atol=1e-14)


def test_zero_delta_limit():
    rng = np.random.default_rng(2)
    x, _, A, B, C, D = random_instance(rng, 9, 4, 3)
    y = selective_scan(x, np.zeros_like(x), A, B, C, D)
    np.testing.assert_array_equal(y, D * x)


def test_single_step_closed_form():
    one = np.ones((1, 1))
    y = selective_scan(2 * one, one, -one, one, one, np.zeros(1))
    assert y[0, 0] == 2.0


def test_non_finite_reports_position():
    x = np.ones((4, 2))
    delta = np.ones((4, 2))
    A = np.full((2, 1), 50.0)  # growing state overflows
    B = np.full((4, 1), 1e300)
    with pytest.raises(ScanError, match=r"t=\d+"):
        selective_scan(x, delta, A, B, np.ones((4, 1)), np.zeros(2))


def test_op_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    raw = random_instance(rng, 5, 2, 3)
    ts = [Tensor(a, requires_grad=True) for a in raw]
    w = rng.normal(size=(5, 2))
    out = selective_scan_op(*ts)
    ad.sum_all(ad.mul(out, Tensor(w))).backward()
    for k, t in enumerate(ts):
        base = [a.copy() for a in raw]
        flat = base[k].reshape(-1)
        for j in range(flat.size):
            o = flat[j]
            flat[j] = o + 1e-6
            up = np.sum(selective_scan(*base) * w)
            flat[j] = o - 1e-6
            dn = np.sum(selective_scan(*base) * w)
            flat[j] = o
            assert t.grad.reshape(-1)[j] == pytest.approx((up - dn) / 2e-6, rel=1e-5, abs=1e-7)
