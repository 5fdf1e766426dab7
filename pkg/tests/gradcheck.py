"""Central finite-difference gradient oracle used across the test suite.

Stays independent of the engine's backward pass: it only calls forward
computations, perturbing raw numpy buffers directly.
"""

import numpy as np

from wenlex.tensor import Tape, Tensor


def numeric_grad(f, tensors, index, h=1e-5):
    """Central finite differences of scalar f(*tensors) w.r.t. tensors[index]."""
    target = tensors[index]
    base = target.data.copy()
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    src = target.data.reshape(-1)
    for i in range(src.size):
        orig = src[i]
        src[i] = orig + h
        hi = f(*tensors).item()
        src[i] = orig - h
        lo = f(*tensors).item()
        src[i] = orig
        flat[i] = (hi - lo) / (2.0 * h)
    target.data = base
    return grad


def rel_err(a, b):
    denom = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return np.linalg.norm(a - b) / denom


def check_grads(f, tensors, tol=1e-6, h=1e-5):
    """Assert autodiff grads of scalar f against finite differences."""
    for t in tensors:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        out = f(*tensors)
    tape.backward(out)
    for i, t in enumerate(tensors):
        num = numeric_grad(f, tensors, i, h=h)
        got = t.grad if t.grad is not None else np.zeros_like(t.data)
        err = rel_err(got, num)
        assert err < tol, f"gradient mismatch on arg {i}: rel err {err:.3e} >= {tol}"


def rand_tensor(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale)
