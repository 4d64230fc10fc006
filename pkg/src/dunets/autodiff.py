"""Reverse-mode automatic differentiation over dense float64 arrays.

A ``Tape`` records every differentiable operation of one forward pass in
execution order; ``backward`` replays the record in reverse, summing
gradient contributions over fan-out.  Tensors without an open tape are
constants and cost nothing extra, so inference reuses the same code paths.

Operations accept either the exact shapes they document or the same shapes
with one extra leading batch axis; gradients of broadcast operands are
reduced over the added axes.
"""

import numpy as np


class ShapeError(ValueError):
    """Operand shapes violate an operation's contract."""


class Tape:
    """Ordered record of one forward pass.

    Use as a context manager around a forward/backward pair; leaving the
    block closes the tape and drops the recorded graph, so later operations
    on the same tensors run as plain numpy.
    """

    def __init__(self):
        self._records = []  # (output, inputs, pull) in execution order
        self.closed = False

    def watch(self, *tensors):
        """Mark leaf tensors (parameters) as tracked on this tape."""
        if self.closed:
            raise RuntimeError("cannot watch tensors on a closed tape")
        for t in tensors:
            t.tape = self

    def close(self):
        self.closed = True
        self._records.clear()

    def __enter__(self):
        return self

    def __exit__(self, exc_type, exc, tb):
        self.close()
        return False

    def __len__(self):
        return len(self._records)


class Tensor:
    """A dense float64 array plus an optional link to the tape that made it."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        tracked = self.tape is not None and not self.tape.closed
        return f"Tensor(shape={self.data.shape}, tracked={tracked})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def zeros(shape):
    return Tensor(np.zeros(shape))


def _open_tape(*tensors):
    """The single open tape among the inputs, or None for a constant op."""
    tape = None
    for t in tensors:
        if isinstance(t, Tensor) and t.tape is not None and not t.tape.closed:
            if tape is None:
                tape = t.tape
            elif tape is not t.tape:
                raise RuntimeError("operands recorded on different open tapes")
    return tape


def record_op(out_data, inputs, pull):
    """Wrap ``out_data`` as a Tensor, recording ``pull`` if any input is live.

    ``pull(g)`` receives the upstream gradient of the output and returns one
    gradient array (or None) per input.  Custom differentiable operations
    (e.g. measurement operators) plug into the engine through this hook.
    """
    out = Tensor(out_data)
    tape = _open_tape(*inputs)
    if tape is not None:
        out.tape = tape
        tape._records.append((out, tuple(inputs), pull))
    return out


def backward(loss, params):
    """Accumulate gradients of a scalar ``loss`` for every tensor in ``params``.

    Returns ``{param: gradient}``; parameters that do not influence the loss
    map to zeros.  A constant loss (no tape) yields all-zero gradients.
    """
    if loss.data.shape != ():
        raise ShapeError(f"loss must be a scalar, got shape {loss.data.shape}")
    grads = {}
    tape = loss.tape
    if tape is not None and not tape.closed:
        grads[id(loss)] = np.ones(())
        for out, inputs, pull in reversed(tape._records):
            g_out = grads.pop(id(out), None)
            if g_out is None:
                continue
            for t, g in zip(inputs, pull(g_out)):
                if g is None or not isinstance(t, Tensor):
                    continue
                if t.tape is None or t.tape.closed:
                    continue
                prev = grads.get(id(t))
                grads[id(t)] = g if prev is None else prev + g
    return {p: grads.get(id(p), np.zeros_like(p.data)) for p in params}


# ---------------------------------------------------------------------------
# elementwise operations

def _reduce_to(g, shape):
    """Sum the upstream gradient over broadcast leading axes down to ``shape``."""
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary_shapes(name, a, b):
    """Allow equal shapes, scalars, or one operand a trailing-suffix of the other."""
    sa, sb = a.data.shape, b.data.shape
    if sa == sb:
        return
    if sa == () or sb == ():
        return
    if len(sa) > len(sb) and sa[len(sa) - len(sb):] == sb:
        return
    if len(sb) > len(sa) and sb[len(sb) - len(sa):] == sa:
        return
    raise ShapeError(f"{name}: shape mismatch {sa} vs {sb}")


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("add", a, b)
    out = a.data + b.data

    def pull(g):
        return _reduce_to(g, a.data.shape), _reduce_to(g, b.data.shape)

    return record_op(out, (a, b), pull)


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("sub", a, b)
    out = a.data - b.data

    def pull(g):
        return _reduce_to(g, a.data.shape), -_reduce_to(g, b.data.shape)

    return record_op(out, (a, b), pull)


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    _binary_shapes("mul", a, b)
    out = a.data * b.data

    def pull(g):
        return (_reduce_to(g * b.data, a.data.shape),
                _reduce_to(g * a.data, b.data.shape))

    return record_op(out, (a, b), pull)


def scale(a, c):
    """Multiply by a plain (non-differentiated) python scalar."""
    a = as_tensor(a)
    c = float(c)

    def pull(g):
        return (g * c,)

    return record_op(a.data * c, (a,), pull)


def neg(a):
    a = as_tensor(a)

    def pull(g):
        return (-g,)

    return record_op(-a.data, (a,), pull)


def elementwise(kind, a, b=None):
    """Dispatch an elementwise operation by name."""
    if kind == "add":
        return add(a, b)
    if kind == "subtract":
        return sub(a, b)
    if kind == "multiply":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    if kind == "negate":
        return neg(a)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def sum_all(a):
    """Sum of all entries, as a scalar tensor."""
    a = as_tensor(a)

    def pull(g):
        return (np.full_like(a.data, float(g)),)

    return record_op(a.data.sum(), (a,), pull)


def reshape(a, shape):
    a = as_tensor(a)
    out = a.data.reshape(shape)

    def pull(g):
        return (g.reshape(a.data.shape),)

    return record_op(out, (a,), pull)


# ---------------------------------------------------------------------------
# linear maps

def matvec(w, x):
    """y = W x for W of shape (m, n) and x of shape (n,) or (B, n)."""
    w, x = as_tensor(w), as_tensor(x)
    if w.data.ndim != 2:
        raise ShapeError(f"matvec: weight must be 2-D, got {w.data.shape}")
    if x.data.ndim not in (1, 2) or x.data.shape[-1] != w.data.shape[1]:
        raise ShapeError(f"matvec: cannot apply {w.data.shape} to {x.data.shape}")
    out = x.data @ w.data.T

    def pull(g):
        if x.data.ndim == 1:
            return np.outer(g, x.data), g @ w.data
        return np.einsum("bm,bn->mn", g, x.data), g @ w.data

    return record_op(out, (w, x), pull)


def conv1d(x, kernel, bias):
    """Same-padded 1-D cross-correlation over channels.

    x: (C_in, N) or (B, C_in, N); kernel: (C_out, C_in, k) with odd k;
    bias: (C_out,).  Output length equals N (zero padding).
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.data.ndim != 3:
        raise ShapeError(f"conv1d: kernel must be 3-D, got {kernel.data.shape}")
    c_out, c_in, k = kernel.data.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d: kernel extent must be odd, got {k}")
    if bias.data.shape != (c_out,):
        raise ShapeError(f"conv1d: bias shape {bias.data.shape} != ({c_out},)")
    batched = x.data.ndim == 3
    if x.data.ndim not in (2, 3) or x.data.shape[-2] != c_in:
        raise ShapeError(
            f"conv1d: input {x.data.shape} incompatible with kernel {kernel.data.shape}")

    xb = x.data if batched else x.data[None]
    b_sz, _, n = xb.shape
    pad = k // 2
    xp = np.pad(xb, ((0, 0), (0, 0), (pad, pad)))
    # (B, C_in, k, N) window view flattened for one matmul per batch
    cols = np.stack([xp[:, :, j:j + n] for j in range(k)], axis=2)
    cols = np.ascontiguousarray(cols.reshape(b_sz, c_in * k, n))
    kmat = kernel.data.reshape(c_out, c_in * k)
    out = np.matmul(kmat, cols) + bias.data[:, None]
    if not batched:
        out = out[0]

    def pull(g):
        gb = g if batched else g[None]
        g_bias = gb.sum(axis=(0, 2))
        g_kmat = np.einsum("bon,bcn->oc", gb, cols)
        g_cols = np.matmul(kmat.T, gb).reshape(b_sz, c_in, k, n)
        g_xp = np.zeros_like(xp)
        for j in range(k):
            g_xp[:, :, j:j + n] += g_cols[:, :, j, :]
        g_x = g_xp[:, :, pad:pad + n]
        if not batched:
            g_x = g_x[0]
        return g_x, g_kmat.reshape(kernel.data.shape), g_bias

    return record_op(out, (x, kernel, bias), pull)


# ---------------------------------------------------------------------------
# nonlinearities

def _sigmoid_data(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)

    def pull(g):
        return (g * (1.0 - out * out),)

    return record_op(out, (a,), pull)


def sigmoid(a):
    a = as_tensor(a)
    out = _sigmoid_data(a.data)

    def pull(g):
        return (g * out * (1.0 - out),)

    return record_op(out, (a,), pull)


def prelu(x, slope):
    """Per-channel parametric ReLU on (C, N) or (B, C, N) features."""
    x, slope = as_tensor(x), as_tensor(slope)
    if x.data.ndim not in (2, 3):
        raise ShapeError(f"prelu: expected channel-major features, got {x.data.shape}")
    c = x.data.shape[-2]
    if slope.data.shape != (c,):
        raise ShapeError(f"prelu: slope shape {slope.data.shape} != ({c},)")
    neg_mask = x.data < 0
    s = slope.data[:, None]
    out = np.where(neg_mask, x.data * s, x.data)

    def pull(g):
        g_x = np.where(neg_mask, g * s, g)
        g_s = (g * x.data * neg_mask).sum(axis=tuple(i for i in range(x.data.ndim) if i != x.data.ndim - 2))
        return g_x, g_s

    return record_op(out, (x, slope), pull)


def nonlinearity(kind, x, slope=None):
    """Dispatch a pointwise nonlinearity by name."""
    if kind == "tanh":
        return tanh(x)
    if kind == "sigmoid":
        return sigmoid(x)
    if kind == "prelu":
        if slope is None:
            raise ValueError("prelu requires a per-channel slope")
        return prelu(x, slope)
    raise ValueError(f"unknown nonlinearity {kind!r}")


# ---------------------------------------------------------------------------
# channel stacking

def concat_channels(parts):
    """Stack (C_i, N) or (B, C_i, N) parts along the channel axis."""
    parts = [as_tensor(p) for p in parts]
    if not parts:
        raise ValueError("concat_channels: empty part list")
    ndim = parts[0].data.ndim
    spatial = parts[0].data.shape[-1]
    for p in parts:
        if p.data.ndim != ndim or p.data.shape[-1] != spatial or \
                (ndim == 3 and p.data.shape[0] != parts[0].data.shape[0]):
            raise ShapeError(
                "concat_channels: incompatible part shapes "
                f"{[tuple(q.data.shape) for q in parts]}")
    out = np.concatenate([p.data for p in parts], axis=-2)
    sizes = [p.data.shape[-2] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def pull(g):
        return tuple(np.ascontiguousarray(piece)
                     for piece in np.split(g, splits, axis=-2))

    return record_op(out, tuple(parts), pull)


def slice_channels(x, lo, hi):
    """The channel slice [lo:hi) of (C, N) or (B, C, N) features."""
    x = as_tensor(x)
    if x.data.ndim not in (2, 3) or not (0 <= lo < hi <= x.data.shape[-2]):
        raise ShapeError(f"slice_channels: [{lo}:{hi}) invalid for {x.data.shape}")
    out = x.data[..., lo:hi, :].copy()

    def pull(g):
        g_x = np.zeros_like(x.data)
        g_x[..., lo:hi, :] = g
        return (g_x,)

    return record_op(out, (x,), pull)
