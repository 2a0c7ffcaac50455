"""Selective state-space scan.

Per channel ``d`` and state ``n``::

    h[t, d, n] = exp(delta[t, d] * A[d, n]) * h[t-1, d, n] + delta[t, d] * B[t, n] * x[t, d]
    y[t, d]    = sum_n C[t, n] * h[t, d, n] + D[d] * x[t, d]

with ``h[-1] = 0``. Any number of leading batch axes is allowed on ``x``,
``delta``, ``B`` and ``C``. The recurrence runs sequentially in time; each step
is vectorized over batch, channels and states.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, make


class ScanError(FloatingPointError):
    pass


def _check_finite(h: np.ndarray) -> None:
    """``h`` is time-major: (L, ..., d, N)."""
    if np.all(np.isfinite(h)):
        return
    bad = np.argwhere(~np.isfinite(h))
    # report the earliest time step
    first = bad[np.argmin(bad[:, 0])]
    t, d, n = int(first[0]), int(first[-2]), int(first[-1])
    raise ScanError(f"non-finite selective-scan state at t={t}, d={d}, n={n}")


def _time_major(a: np.ndarray, axis: int) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(a, axis, 0))


def scan_forward(x, delta, A, B, C, D):
    """Returns ``(y, h, decay)``; ``h`` and ``decay`` are time-major (L, ..., d, N)."""
    x = np.asarray(x)
    delta = np.asarray(delta)
    xt, dt = _time_major(x, -2), _time_major(delta, -2)
    Bt, Ct = _time_major(np.asarray(B), -2), _time_major(np.asarray(C), -2)
    decay = np.exp(dt[..., None] * A)
    # h starts as the drive term and is updated in place
    h = (dt * xt)[..., None] * Bt[..., None, :]
    with np.errstate(over="ignore", invalid="ignore"):
        for t in range(1, len(h)):
            h[t] += decay[t] * h[t - 1]
    _check_finite(h)
    y = np.einsum("l...dn,l...n->l...d", h, Ct)
    y = np.moveaxis(y, 0, -2) + D * x
    return y, h, decay


def selective_scan(x, delta, A, B, C, D) -> np.ndarray:
    """Plain-array selective scan; shapes (L, d), (L, d), (d, N), (L, N), (L, N), (d,).

    ``x``, ``delta``, ``B`` and ``C`` may carry leading batch axes; ``A`` and ``D`` are shared.
    """
    return scan_forward(x, delta, A, B, C, D)[0]


def scan_backward(g, x, delta, A, B, C, D, h, decay):
    """Gradients of the scan given the output gradient ``g`` and the time-major forward cache."""
    gt, xt, dt = _time_major(g, -2), _time_major(x, -2), _time_major(delta, -2)
    Bt, Ct = _time_major(B, -2), _time_major(C, -2)
    # gradient reaching h[t] from y[t], then carried back through decay
    gh = gt[..., None] * Ct[..., None, :]
    for t in range(len(gh) - 2, -1, -1):
        gh[t] += decay[t + 1] * gh[t + 1]
    through_decay = np.zeros_like(h)
    through_decay[1:] = gh[1:] * h[:-1] * decay[1:]

    d, N = h.shape[-2:]
    gA = np.einsum("ldn,ld->dn", through_decay.reshape(-1, d, N), dt.reshape(-1, d))
    ghB = np.einsum("l...dn,l...n->l...d", gh, Bt)
    gdelta = np.einsum("l...dn,dn->l...d", through_decay, A) + ghB * xt
    gB = np.einsum("l...dn,l...d->l...n", gh, dt * xt)
    gC = np.einsum("l...d,l...dn->l...n", gt, h)
    gx = ghB * dt
    back = lambda a: np.moveaxis(a, 0, -2)
    gD = (g * x).sum(axis=tuple(range(x.ndim - 1)))
    return back(gx) + g * D, back(gdelta), gA, back(gB), back(gC), gD


def selective_scan_op(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor, D: Tensor) -> Tensor:
    """Differentiable selective scan."""
    y, h, decay = scan_forward(x.data, delta.data, A.data, B.data, C.data, D.data)

    def bw(g):
        return scan_backward(g, x.data, delta.data, A.data, B.data, C.data, D.data, h, decay)
    return make(y, (x, delta, A, B, C, D), bw)
