"""Central finite-difference gradient oracle.

The oracle only ever calls the forward path of a function, so it stays
independent of the vjp implementations it is used to check.  Errors are
reported as the max absolute deviation normalized by the largest gradient
magnitude across the compared buffers (a global relative error), which is
robust when individual entries are near zero.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, backward


def fd_gradient(fn, tensors, index, step):
    """Central-difference gradient of scalar ``fn(*tensors)`` w.r.t. one input.

    ``fn`` must be a pure function of the tensor values.  Each coordinate of
    ``tensors[index]`` is displaced by ``+-step`` and the scalar output is
    differenced; nothing from the reverse-mode machinery is touched.  The
    forward evaluations run in float64 whatever the checked dtype is — the
    headroom the engine's 64-bit mode exists for.
    """
    base = [t.data.astype(np.float64) for t in tensors]
    target = base[index]
    grad = np.zeros_like(target, dtype=np.float64)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = float(fn(*[Tensor(b) for b in base]).data)
        flat[i] = orig - step
        lo = float(fn(*[Tensor(b) for b in base]).data)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return grad


def check_gradients(fn, tensors, step=None):
    """Compare reverse-mode gradients of ``fn`` against finite differences.

    Returns the worst global relative error over all inputs that require
    gradients.  ``step`` defaults to 1e-4 in float64 and 1e-2 in float32,
    where rounding noise in the forward pass dominates smaller steps.
    """
    if step is None:
        step = 1e-4 if tensors[0].dtype == np.float64 else 1e-2
    for t in tensors:
        t.zero_grad()
    loss = fn(*tensors)
    backward(loss, leaves=tensors)
    worst = 0.0
    for i, t in enumerate(tensors):
        if not t.requires_grad:
            continue
        num = fd_gradient(fn, tensors, i, step)
        ana = np.asarray(t.grad, dtype=np.float64)
        scale = max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(ana - num).max() / scale))
    return worst
