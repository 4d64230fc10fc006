"""Central finite-difference checking of reverse-mode gradients."""

import numpy as np

from .autodiff import Tape, Tensor, backward


def fd_gradient(f, arrays, index, h=1e-6):
    """Central-difference gradient of scalar ``f(*arrays)`` w.r.t. one operand.

    ``f`` must accept plain numpy arrays and return a float.  Every entry of
    ``arrays[index]`` is perturbed by ±h in turn.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    target = arrays[index]
    grad = np.zeros_like(target)
    flat = target.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(*arrays)
        flat[i] = orig - h
        fm = f(*arrays)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def rel_error(a, b, floor=1e-8):
    """Scale-free gradient discrepancy: ||a-b|| / max(||a||, ||b||, floor)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = max(np.linalg.norm(a.ravel()), np.linalg.norm(b.ravel()), floor)
    return np.linalg.norm((a - b).ravel()) / denom


def check_op(build_loss, arrays, h=1e-6):
    """Compare reverse-mode and finite-difference gradients of one operation.

    ``build_loss(*tensors)`` maps tracked Tensors to a scalar loss Tensor;
    it is re-run on perturbed plain arrays for the finite differences.
    Returns the worst relative error over all operands.
    """
    tensors = [Tensor(a) for a in arrays]
    with Tape() as tape:
        tape.watch(*tensors)
        loss = build_loss(*tensors)
        grads = backward(loss, tensors)

    def f(*arrs):
        return float(build_loss(*[Tensor(a) for a in arrs]).data)

    worst = 0.0
    for i, t in enumerate(tensors):
        fd = fd_gradient(f, arrays, i, h=h)
        worst = max(worst, rel_error(grads[t], fd))
    return worst
