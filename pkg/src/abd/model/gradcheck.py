"""Central finite-difference check of reverse-mode gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff
from .autodiff import Tensor


class NonFiniteGradient(FloatingPointError):
    pass


def backward_and_collect(loss: Tensor, params: dict[str, Tensor]) -> dict[str, np.ndarray]:
    """Run backward from ``loss`` and return a gradient (zeros if untouched) per parameter."""
    for p in params.values():
        p.zero_grad()
    loss.backward()
    grads = {}
    for name, p in params.items():
        g = p.grad if p.grad is not None else np.zeros_like(p.data)
        if not np.all(np.isfinite(g)):
            raise NonFiniteGradient(f"non-finite gradient for parameter {name!r}")
        grads[name] = g
    return grads


@dataclass
class GradCheckResult:
    max_rel_error: float
    n_checked: int
    per_param: dict[str, float] = field(default_factory=dict)
    worst: tuple[str, tuple[int, ...]] | None = None


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(loss_fn: Callable[[], Tensor], params: dict[str, Tensor], eps: float = 1e-5,
                    fraction: float = 0.01, min_per_param: int = 1, seed: int = 0,
                    floor: float = 1e-8, extended: bool = True) -> GradCheckResult:
    """Compare backward gradients with central differences on sampled entries.

    ``fraction`` of all scalar parameters is sampled, with at least
    ``min_per_param`` entries from every tensor so each parameter family is
    covered. ``loss_fn`` must rebuild the graph and be deterministic.

    With ``extended`` the perturbed losses are evaluated in ``np.longdouble``;
    in fp64 the cancellation in ``L(w + eps) - L(w - eps)`` leaves an absolute
    error near 1e-11, which swamps gradients smaller than about 1e-5.
    """
    grads = backward_and_collect(loss_fn(), params)
    rng = np.random.default_rng(seed)
    total = sum(p.data.size for p in params.values())
    budget = max(int(np.ceil(fraction * total)), 1)
    picks: dict[str, set[int]] = {}
    names = list(params)
    for name in names:
        n = params[name].data.size
        k = min(min_per_param, n)
        picks[name] = set(rng.choice(n, size=k, replace=False).tolist())
    sizes = np.array([params[n].data.size for n in names], dtype=float)
    while sum(len(s) for s in picks.values()) < budget:
        name = names[rng.choice(len(names), p=sizes / sizes.sum())]
        picks[name].add(int(rng.integers(params[name].data.size)))

    fd_dtype = np.longdouble if extended else np.float64
    saved = {name: p.data for name, p in params.items()}
    result = GradCheckResult(0.0, 0)
    try:
        with autodiff.precision(fd_dtype):
            for name in names:
                params[name].data = saved[name].astype(fd_dtype)
            for name in names:
                result.per_param[name] = _check_param(loss_fn, params[name], sorted(picks[name]),
                                                      grads[name], eps, floor, name, result)
    finally:
        for name in names:
            params[name].data = saved[name]
    return result


def _check_param(loss_fn, p: Tensor, entries, grad, eps, floor, name, result) -> float:
    flat = p.data.reshape(-1)
    worst = 0.0
    step = p.data.dtype.type(eps)
    for j in entries:
        orig = flat[j]
        flat[j] = orig + step
        up = loss_fn().data
        flat[j] = orig - step
        down = loss_fn().data
        flat[j] = orig
        numeric = float((up - down) / (2 * step))
        analytic = float(grad.reshape(-1)[j])
        err = relative_error(analytic, numeric, floor)
        worst = max(worst, err)
        result.n_checked += 1
        if err >= result.max_rel_error:
            result.max_rel_error = err
            result.worst = (name, tuple(int(i) for i in np.unravel_index(j, p.shape)))
    return worst
