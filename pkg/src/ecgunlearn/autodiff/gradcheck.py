"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .tensor import Tensor, backward, check_finite, fresh_tape, no_grad


@dataclass
class GradCheck:
    max_rel_err: float
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: list = field(default_factory=list)


def _scalar(out) -> float:
    val = out.item() if isinstance(out, Tensor) else float(np.asarray(out).reshape(-1)[0])
    if not np.isfinite(val):
        raise FloatingPointError("non-finite function value during gradient check")
    return val


def gradcheck_report(fn, point, step: float = 1e-5, kink_tol: float = 1e-2) -> GradCheck:
    """Compare autodiff gradient of scalar ``fn`` at ``point`` with central differences.

    Per-coordinate error is |g_a - g_n| / max(1, |g_a|, |g_n|). A coordinate
    whose one-sided slopes disagree by more than ``kink_tol`` (relative) sits
    on a non-differentiable point and is left out of the maximum; its index
    is listed in ``excluded``.
    """
    x0 = np.array(point, dtype=np.float64)
    check_finite(x0, "gradcheck point")
    with fresh_tape():
        x = Tensor(x0, requires_grad=True)
        out = fn(x)
        _scalar(out)
        backward(out)
    g_a = x.grad

    flat = x0.reshape(-1)
    g_n = np.zeros_like(flat)
    excluded = []
    with no_grad():
        f0 = _scalar(fn(Tensor(x0)))
        for i in range(flat.size):
            xp, xm = flat.copy(), flat.copy()
            xp[i] += step
            xm[i] -= step
            fp = _scalar(fn(Tensor(xp.reshape(x0.shape))))
            fm = _scalar(fn(Tensor(xm.reshape(x0.shape))))
            g_n[i] = (fp - fm) / (2 * step)
            right, left = (fp - f0) / step, (f0 - fm) / step
            if abs(right - left) > kink_tol * max(1.0, abs(right), abs(left)):
                excluded.append(np.unravel_index(i, x0.shape))
    g_n = g_n.reshape(x0.shape)
    err = np.abs(g_a - g_n) / np.maximum(1.0, np.maximum(np.abs(g_a), np.abs(g_n)))
    for idx in excluded:
        err[idx] = 0.0
    return GradCheck(float(err.max()), g_a, g_n, excluded)


def finite_diff_gradcheck(fn, point, step: float = 1e-5) -> float:
    """Max relative error between autodiff and central-difference gradients."""
    return gradcheck_report(fn, point, step).max_rel_err
