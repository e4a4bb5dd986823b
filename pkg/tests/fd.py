"""Central finite-difference gradient oracle, independent of the tape."""

import numpy as np

from tapd.numkit import Tape, backward


def fd_grad(fn, arrays, wrt, h=1e-5):
    """d(fn)/d(arrays[wrt]) by central differences, elementwise.

    fn takes the raw arrays and returns a float; the tape is never involved.
    """
    base = [np.array(a, dtype=np.float64) for a in arrays]
    target = base[wrt]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        hi = fn(*base)
        flat[i] = orig - h
        lo = fn(*base)
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * h)
    return grad


def tape_grad(build, tensors):
    """Gradients of a scalar tape computation w.r.t. the given leaf tensors."""
    with Tape() as tape:
        loss = build(*tensors)
    backward(loss, tape)
    return [t.grad.copy() if t.grad is not None else None for t in tensors]


def rel_err(a, b):
    denom = max(np.abs(a).max(initial=0.0), np.abs(b).max(initial=0.0), 1e-8)
    return np.abs(a - b).max(initial=0.0) / denom
