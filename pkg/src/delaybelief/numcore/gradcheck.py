from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .core import DArray, NumericalError, Tape


def grad_check(fn: Callable[..., DArray], inputs: Sequence[np.ndarray], eps: float = 1e-5,
               floor: float = 1e-6) -> float:
    """Worst relative error between tape gradients and central differences.

    ``fn`` takes one DArray per entry of ``inputs`` and returns a scalar.
    The relative error of a component is ``|a - n| / max(|a|, |n|, floor)``,
    so components whose true gradient is zero are judged absolutely.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    base = [np.array(x, dtype=np.float64) for x in inputs]
    leaves = [DArray(x.copy(), requires_grad=True) for x in base]
    with Tape() as tape:
        out = fn(*leaves)
    tape.backward(out)
    analytic = [leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data) for leaf in leaves]

    def evaluate(arrays):
        val = fn(*[DArray(a) for a in arrays]).data
        if not np.isfinite(val).all():
            raise NumericalError("grad_check: non-finite function value")
        return float(val.reshape(-1)[0])

    worst = 0.0
    for k, x in enumerate(base):
        flat = x.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = evaluate(base)
            flat[j] = orig - eps
            f_minus = evaluate(base)
            flat[j] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            a = analytic[k].reshape(-1)[j]
            if not np.isfinite(a):
                raise NumericalError("grad_check: non-finite analytic gradient")
            err = abs(a - num) / max(abs(a), abs(num), floor)
            worst = max(worst, err)
    return worst


def grad_check_params(loss_fn: Callable[[], DArray], params: Sequence[DArray],
                      n_probe: int | None = None, rng: np.random.Generator | None = None,
                      eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Like :func:`grad_check` but for a loss closing over module parameters.

    Perturbs entries of ``params`` in place (restoring them afterwards); with
    ``n_probe`` set, checks that many entries per parameter chosen by ``rng``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        out = loss_fn()
    tape.backward(out)
    analytic = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        picks = range(flat.size)
        if n_probe is not None and flat.size > n_probe:
            picks = (rng or np.random.default_rng(0)).choice(flat.size, n_probe, replace=False)
        for j in picks:
            orig = flat[j]
            flat[j] = orig + eps
            f_plus = loss_fn().item()
            flat[j] = orig - eps
            f_minus = loss_fn().item()
            flat[j] = orig
            num = (f_plus - f_minus) / (2.0 * eps)
            a = g.reshape(-1)[j]
            worst = max(worst, abs(a - num) / max(abs(a), abs(num), floor))
    for p in params:
        p.grad = None
    return worst
