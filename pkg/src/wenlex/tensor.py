"""Minimal reverse-mode autodiff over dense float64 arrays.

Every trainable computation in the package runs through the ops in this
module. Ops executed under an active ``Tape`` are recorded and can be
differentiated with ``Tape.backward``. A restricted second-order path is
available through ``grad_of_output_wrt_input``, which re-expresses the
backward pass of a scalar in tape ops so that a penalty on a gradient norm
can itself be backpropagated (needed for the critic's gradient penalty).
"""

import threading

import numpy as np


class ShapeError(ValueError):
    """Operand shapes incompatible with the requested operation."""


class NonFiniteError(FloatingPointError):
    """An engine operation produced NaN or Inf."""


_STACK = threading.local()


def _tape_stack():
    if not hasattr(_STACK, "tapes"):
        _STACK.tapes = []
    return _STACK.tapes


def _active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def current_tape():
    """The innermost active tape, or None outside any ``with Tape()`` block."""
    return _active_tape()


def _check_finite(data, op):
    if not np.all(np.isfinite(data)):
        raise NonFiniteError(f"{op} produced non-finite values")


class Tensor:
    """Dense float64 array participating in tape-based differentiation."""

    __slots__ = ("data", "requires_grad", "grad")
    __array_priority__ = 100  # keep numpy from hijacking dunder ops

    def __init__(self, data, requires_grad=False):
        arr = np.asarray(data, dtype=np.float64)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor initialized with non-finite values")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ShapeError(f"item() on non-scalar tensor of shape {self.data.shape}")

    def detached(self):
        """View of the same data outside the gradient graph."""
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    # operator sugar; full op set lives at module level
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


class Node:
    """One recorded operation: output, inputs, and its vector-Jacobian product."""

    __slots__ = ("op", "inputs", "output", "vjp", "symbolic_vjp")

    def __init__(self, op, inputs, output, vjp, symbolic_vjp=None):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.vjp = vjp
        self.symbolic_vjp = symbolic_vjp


class Tape:
    """Append-only operation record; backward walks it once in reverse order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        popped = _tape_stack().pop()
        assert popped is self
        return False

    def backward(self, output, seed=None):
        """Accumulate grads of ``output`` (scalar unless ``seed`` given) into leaves."""
        if seed is None:
            if output.data.size != 1:
                raise ShapeError("backward without seed requires a scalar output")
            seed = np.ones_like(output.data)
        grads = {id(output): np.asarray(seed, dtype=np.float64)}
        produced = {id(n.output) for n in self.nodes}
        if id(output) not in produced and not output.requires_grad:
            raise ValueError("output was not produced on this tape")
        for node in reversed(self.nodes):
            g_out = grads.pop(id(node.output), None)
            if g_out is None:
                continue
            for inp, g in zip(node.inputs, node.vjp(g_out)):
                if g is None:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                if inp.requires_grad and id(inp) not in produced:
                    inp.grad = g.copy() if inp.grad is None else inp.grad + g


def _record(op, inputs, out_data, vjp, symbolic_vjp=None):
    out = Tensor(out_data)  # constructor validates finiteness
    tape = _active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.nodes.append(Node(op, inputs, out, vjp, symbolic_vjp))
    return out


def _binary_shapes(a, b, op):
    if a.shape == b.shape:
        return
    if a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} (equal or scalar only)")


def _unbroadcast(g, shape):
    # inverse of scalar-with-tensor broadcasting
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape)) == 1 else g.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    def svjp(c):
        return _sym_unbroadcast(c, a.shape), _sym_unbroadcast(c, b.shape)

    return _record("add", (a, b), out, vjp, svjp)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    def svjp(c):
        return _sym_unbroadcast(c, a.shape), _sym_unbroadcast(mul(c, -1.0), b.shape)

    return _record("sub", (a, b), out, vjp, svjp)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes(a, b, "mul")
    out = a.data * b.data

    def vjp(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    def svjp(c):
        return _sym_unbroadcast(mul(c, b), a.shape), _sym_unbroadcast(mul(c, a), b.shape)

    return _record("mul", (a, b), out, vjp, svjp)


def relu(x):
    x = as_tensor(x)
    mask = x.data > 0
    out = np.where(mask, x.data, 0.0)

    def vjp(g):
        return (g * mask,)

    def svjp(c):
        return (mul(c, Tensor(mask.astype(np.float64))),)

    return _record("relu", (x,), out, vjp, svjp)


def leaky_relu(x, alpha=0.2):
    x = as_tensor(x)
    slope = np.where(x.data > 0, 1.0, alpha)
    out = x.data * slope

    def vjp(g):
        return (g * slope,)

    def svjp(c):
        return (mul(c, Tensor(slope)),)

    return _record("leaky_relu", (x,), out, vjp, svjp)


def tanh(x):
    x = as_tensor(x)
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return _record("tanh", (x,), out, vjp)


def sigmoid(x):
    x = as_tensor(x)
    out = 1.0 / (1.0 + np.exp(-x.data))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _record("sigmoid", (x,), out, vjp)


def exp(x):
    x = as_tensor(x)
    out = np.exp(x.data)
    _check_finite(out, "exp")

    def vjp(g):
        return (g * out,)

    return _record("exp", (x,), out, vjp)


def log1p(x):
    x = as_tensor(x)
    if np.any(x.data <= -1.0):
        raise ValueError("log1p domain error: value <= -1")
    out = np.log1p(x.data)

    def vjp(g):
        return (g / (1.0 + x.data),)

    return _record("log1p", (x,), out, vjp)


def square(x):
    x = as_tensor(x)
    out = x.data * x.data

    def vjp(g):
        return (g * 2.0 * x.data,)

    def svjp(c):
        return (mul(mul(c, x), 2.0),)

    return _record("square", (x,), out, vjp, svjp)


def sqrt(x):
    x = as_tensor(x)
    if np.any(x.data < 0):
        raise ValueError("sqrt domain error: negative value")
    out = np.sqrt(x.data)

    def vjp(g):
        return (g * 0.5 / np.maximum(out, 1e-300),)

    return _record("sqrt", (x,), out, vjp)


# ---------------------------------------------------------------------------
# structural ops

def reshape(x, shape):
    x = as_tensor(x)
    old = x.shape
    out = x.data.reshape(shape)

    def vjp(g):
        return (g.reshape(old),)

    def svjp(c):
        return (reshape(c, old),)

    return _record("reshape", (x,), out, vjp, svjp)


def transpose(x):
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise ShapeError("transpose expects a 2-d tensor")
    out = x.data.T.copy()

    def vjp(g):
        return (g.T.copy(),)

    def svjp(c):
        return (transpose(c),)

    return _record("transpose", (x,), out, vjp, svjp)


def concat(tensors, axis=0):
    tensors = tuple(as_tensor(t) for t in tensors)
    out = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(
            np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
            for i in range(len(tensors))
        )

    def svjp(c):
        return tuple(
            slice_axis(c, axis, int(offsets[i]), int(offsets[i + 1]))
            for i in range(len(tensors))
        )

    return _record("concat", tensors, out, vjp, svjp)


def slice_axis(x, axis, start, stop):
    x = as_tensor(x)
    idx = [slice(None)] * x.data.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = x.data[idx].copy()

    def vjp(g):
        full = np.zeros_like(x.data)
        full[idx] = g
        return (full,)

    def svjp(c):
        return (_pad_like(c, x.shape, axis, start),)

    return _record("slice", (x,), out, vjp, svjp)


def _pad_like(c, shape, axis, start):
    # embed cotangent slice back into a zero tensor of the original shape
    pieces = []
    if start > 0:
        lead = list(shape)
        lead[axis] = start
        pieces.append(Tensor(np.zeros(lead)))
    pieces.append(c)
    stop = start + c.shape[axis]
    if stop < shape[axis]:
        trail = list(shape)
        trail[axis] = shape[axis] - stop
        pieces.append(Tensor(np.zeros(trail)))
    return concat(pieces, axis=axis) if len(pieces) > 1 else c


def broadcast_to(x, shape):
    """Numpy-style broadcast with sum-over-broadcast-axes backward."""
    x = as_tensor(x)
    shape = tuple(shape)
    out = np.broadcast_to(x.data, shape).copy()
    lead = len(shape) - x.data.ndim
    padded = (1,) * lead + x.shape
    axes = tuple(range(lead)) + tuple(
        i for i in range(lead, len(shape)) if padded[i] == 1 and shape[i] != 1
    )

    def vjp(g):
        reduced = np.sum(g, axis=axes, keepdims=True) if axes else g
        return (reduced.reshape(x.shape),)

    def svjp(c):
        if x.data.ndim != 0 and lead and len(axes) == lead:
            return (reshape(sum_(c, axis=tuple(range(lead))), x.shape),)
        raise NotImplementedError("symbolic broadcast vjp beyond leading axes")

    return _record("broadcast_to", (x,), out, vjp, svjp)


# ---------------------------------------------------------------------------
# matmul and reductions

def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: {a.shape} x {b.shape}")
    out = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    def svjp(c):
        return matmul(c, transpose(b)), matmul(transpose(a), c)

    return _record("matmul", (a, b), out, vjp, svjp)


def _norm_axis(x, axis):
    if axis is None:
        return tuple(range(x.data.ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % max(x.data.ndim, 1) for a in axis)


def _check_nonempty(x, axes, op):
    for a in axes:
        if x.data.ndim and x.shape[a] == 0:
            raise ShapeError(f"{op}: empty reduction axis {a}")
    if x.data.size == 0:
        raise ShapeError(f"{op}: empty tensor")


def sum_(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(x, axis)
    _check_nonempty(x, axes, "sum")
    out = np.sum(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims or not axes else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.shape).copy(),)

    def svjp(c):
        # scalar cotangents cover every second-order path in this artifact
        if c.size != 1 and c.shape != x.shape:
            raise NotImplementedError("symbolic sum vjp for partial reductions")
        return (_sym_expand(c, x.shape),)

    return _record("sum", (x,), out, vjp, svjp)


def _sym_expand(c, shape):
    # broadcast a scalar (or same-shape) cotangent via mul with constant ones
    if c.shape == tuple(shape):
        return c
    return mul(Tensor(np.ones(shape)), c)


def _sym_unbroadcast(c, shape):
    if c.shape == tuple(shape):
        return c
    if int(np.prod(shape)) == 1:
        return reshape(sum_(c), shape)
    return reshape(c, shape)


def mean(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(x, axis)
    _check_nonempty(x, axes, "mean")
    count = int(np.prod([x.shape[a] for a in axes])) if x.data.ndim else 1
    out = np.mean(x.data, axis=axes, keepdims=keepdims)

    def vjp(g):
        gg = g if keepdims or not axes else np.expand_dims(g, axes)
        return (np.broadcast_to(gg, x.shape).copy() / count,)

    def svjp(c):
        if c.size != 1 and c.shape != x.shape:
            raise NotImplementedError("symbolic mean vjp for partial reductions")
        return (_sym_expand(mul(c, 1.0 / count), x.shape),)

    return _record("mean", (x,), out, vjp, svjp)


def l2_norm(x, axis=None, keepdims=False):
    x = as_tensor(x)
    axes = _norm_axis(x, axis)
    _check_nonempty(x, axes, "l2_norm")
    out = np.sqrt(np.sum(x.data * x.data, axis=axes, keepdims=keepdims))

    def vjp(g):
        gg = g if keepdims or not axes else np.expand_dims(g, axes)
        nn = out if keepdims or not axes else np.expand_dims(out, axes)
        return (x.data * (gg / np.maximum(nn, 1e-300)),)

    return _record("l2_norm", (x,), out, vjp)


def log_softmax(x):
    """Numerically stable log-softmax over the last axis."""
    x = as_tensor(x)
    shifted = x.data - np.max(x.data, axis=-1, keepdims=True)
    lse = np.log(np.sum(np.exp(shifted), axis=-1, keepdims=True))
    out = shifted - lse

    def vjp(g):
        soft = np.exp(out)
        return (g - soft * np.sum(g, axis=-1, keepdims=True),)

    return _record("log_softmax", (x,), out, vjp)


# ---------------------------------------------------------------------------
# convolutions

def _conv_out_extent(h, k, s, p):
    return (h + 2 * p - k) // s + 1


def _im2col(x, kh, kw, stride, pad):
    b, c, h, w = x.shape
    oh = _conv_out_extent(h, kh, stride, pad)
    ow = _conv_out_extent(w, kw, stride, pad)
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    cols = np.empty((b, c, kh, kw, oh, ow), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride]
    return cols


def _col2im(cols, x_shape, stride, pad):
    b, c, h, w = x_shape
    _, _, kh, kw, oh, ow = cols.shape
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            xp[:, :, i : i + oh * stride : stride, j : j + ow * stride : stride] += cols[:, :, i, j]
    return xp[:, :, pad : pad + h, pad : pad + w]


def conv2d(x, kernel, bias=None, stride=1, padding=0):
    """Cross-correlation of (b,c,h,w) input with an (oc,ic,kh,kw) kernel."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    b, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if ic != c:
        raise ShapeError(f"conv2d: input channels {c} != kernel channels {ic}")
    if kh > h + 2 * padding or kw > w + 2 * padding:
        raise ShapeError("conv2d: kernel larger than padded input")
    oh, ow = _conv_out_extent(h, kh, stride, padding), _conv_out_extent(w, kw, stride, padding)
    if oh < 1 or ow < 1:
        raise ShapeError("conv2d: no valid output positions")
    cols = _im2col(x.data, kh, kw, stride, padding)
    out = np.einsum("bcijuv,ocij->bouv", cols, kernel.data, optimize=True)
    inputs = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, oc, 1, 1)
        inputs = (x, kernel, bias)

    def vjp(g):
        gcols = np.einsum("bouv,ocij->bcijuv", g, kernel.data, optimize=True)
        gx = _col2im(gcols, x.shape, stride, padding)
        gk = np.einsum("bcijuv,bouv->ocij", cols, g, optimize=True)
        if bias is not None:
            return gx, gk, np.sum(g, axis=(0, 2, 3))
        return gx, gk

    return _record("conv2d", inputs, out, vjp)


def conv_transpose2d(x, kernel, bias=None, stride=2, padding=0):
    """Adjoint of ``conv2d`` with the same (oc,ic,kh,kw) kernel.

    Maps (b,oc,h,w) to (b,ic,(h-1)*stride - 2*padding + kh, ...).
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if stride < 1:
        raise ShapeError("conv_transpose2d: stride must be >= 1")
    b, c, h, w = x.shape
    oc, ic, kh, kw = kernel.shape
    if c != oc:
        raise ShapeError(f"conv_transpose2d: input channels {c} != kernel out-channels {oc}")
    out_h = (h - 1) * stride - 2 * padding + kh
    out_w = (w - 1) * stride - 2 * padding + kw
    if out_h < 1 or out_w < 1:
        raise ShapeError("conv_transpose2d: non-positive output extent")
    cols = np.einsum("bouv,ocij->bcijuv", x.data, kernel.data, optimize=True)
    out = _col2im(cols, (b, ic, out_h, out_w), stride, padding)
    inputs = (x, kernel)
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data.reshape(1, ic, 1, 1)
        inputs = (x, kernel, bias)

    def vjp(g):
        gcols = _im2col(g, kh, kw, stride, padding)
        gx = np.einsum("bcijuv,ocij->bouv", gcols, kernel.data, optimize=True)
        gk = np.einsum("bcijuv,bouv->ocij", gcols, x.data, optimize=True)
        if bias is not None:
            return gx, gk, np.sum(g, axis=(0, 2, 3))
        return gx, gk

    return _record("conv_transpose2d", inputs, out, vjp)


def batchnorm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Batch normalization over all axes except channel axis 1.

    ``running_mean``/``running_var`` are plain numpy arrays mutated in place
    during training; eval mode reads them without touching anything.
    """
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    axes = tuple(a for a in range(x.data.ndim) if a != 1)
    shape = [1] * x.data.ndim
    shape[1] = x.shape[1]
    n = int(np.prod([x.shape[a] for a in axes]))
    if training:
        if x.shape[0] < 2:
            raise ShapeError("batchnorm: train mode requires batch size >= 2")
        m = np.mean(x.data, axis=axes)
        v = np.var(x.data, axis=axes)
        running_mean *= 1.0 - momentum
        running_mean += momentum * m
        running_var *= 1.0 - momentum
        running_var += momentum * v
    else:
        m, v = running_mean, running_var
    inv = 1.0 / np.sqrt(v + eps)
    xhat = (x.data - m.reshape(shape)) * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    def vjp(g):
        gg = gamma.data.reshape(shape)
        gbeta = np.sum(g, axis=axes)
        ggamma = np.sum(g * xhat, axis=axes)
        if training:
            gx = (gg * inv.reshape(shape) / n) * (
                n * g - gbeta.reshape(shape) - xhat * ggamma.reshape(shape)
            )
        else:
            gx = g * gg * inv.reshape(shape)
        return gx, ggamma, gbeta

    return _record("batchnorm", (x, gamma, beta), out, vjp)


# ---------------------------------------------------------------------------
# restricted double backward

def grad_of_output_wrt_input(tape, output, input_):
    """Gradient of a scalar ``output`` w.r.t. ``input_`` as a new tape node.

    The reverse sweep is built out of ordinary tape ops, so downstream
    penalties on the returned tensor remain differentiable (e.g. w.r.t. the
    critic's weights). Only ops that define a symbolic VJP participate;
    piecewise-linear activation masks are treated as locally constant.
    """
    if output.data.size != 1:
        raise ShapeError("grad_of_output_wrt_input: output must be scalar")
    nodes = list(tape.nodes)
    if not any(inp is input_ for n in nodes for inp in n.inputs):
        raise ValueError("input is not on the tape")
    cot = {id(output): Tensor(np.ones_like(output.data))}
    seen_output = False
    for node in reversed(nodes):
        if node.output is output:
            seen_output = True
        c = cot.pop(id(node.output), None)
        if c is None:
            continue
        if node.symbolic_vjp is None:
            raise NotImplementedError(f"double backward unsupported through op '{node.op}'")
        for inp, g in zip(node.inputs, node.symbolic_vjp(c)):
            if g is None:
                continue
            key = id(inp)
            cot[key] = g if key not in cot else add(cot[key], g)
    if not seen_output:
        raise ValueError("output was not produced on this tape")
    result = cot.get(id(input_))
    if result is None:
        raise ValueError("input does not influence output on this tape")
    return result
