"""Trainable building blocks, optimizer machinery, and parameter files.

Convolution stacks use same-padded extent-3 kernels with PReLU activations
and a linear output layer.  The recurrent momentum module is an L-layer
LSTM stack whose final hidden state is mapped back to the gradient's space.
"""

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import (Tensor, add, conv1d, matvec, mul, prelu, sigmoid,
                       tanh)


def he_uniform(rng, shape, fan_in):
    """Uniform draw with variance 2/fan_in."""
    lim = np.sqrt(6.0 / fan_in)
    return rng.uniform(-lim, lim, size=shape)


class Conv1dLayer:
    """One same-padded convolution: kernel (C_out, C_in, k) plus bias."""

    def __init__(self, kernel, bias):
        self.kernel = kernel if isinstance(kernel, Tensor) else Tensor(kernel)
        self.bias = bias if isinstance(bias, Tensor) else Tensor(bias)

    @classmethod
    def create(cls, rng, c_in, c_out, k=3, zero=False, scale=1.0):
        if zero:
            kernel = np.zeros((c_out, c_in, k))
        else:
            kernel = scale * he_uniform(rng, (c_out, c_in, k), fan_in=c_in * k)
        return cls(kernel, np.zeros(c_out))

    def __call__(self, x):
        return conv1d(x, self.kernel, self.bias)

    def named_params(self, prefix):
        yield f"{prefix}.kernel", self.kernel
        yield f"{prefix}.bias", self.bias


class PReLULayer:
    """Parametric ReLU with one learnable slope per channel."""

    def __init__(self, slope):
        self.slope = slope if isinstance(slope, Tensor) else Tensor(slope)

    @classmethod
    def create(cls, channels, init=0.25):
        return cls(np.full(channels, init))

    def __call__(self, x):
        return prelu(x, self.slope)

    def named_params(self, prefix):
        yield f"{prefix}.slope", self.slope


class ConvStack:
    """conv -> PReLU -> ... -> conv, with a linear (activation-free) output.

    The output convolution is zero-initialized so a freshly built stack is
    the zero map, which keeps residually wired reconstructions at their
    starting point until training moves them.
    """

    def __init__(self, convs, activations):
        self.convs = convs
        self.activations = activations  # len(convs) - 1 PReLU layers

    @classmethod
    def create(cls, rng, channels, k=3, zero_last=True, out_scale=1.0):
        convs, acts = [], []
        last = len(channels) - 2
        for i, (c_in, c_out) in enumerate(zip(channels[:-1], channels[1:])):
            convs.append(Conv1dLayer.create(rng, c_in, c_out, k=k,
                                            zero=zero_last and i == last,
                                            scale=out_scale if i == last else 1.0))
            if i != last:
                acts.append(PReLULayer.create(c_out))
        return cls(convs, acts)

    def __call__(self, x):
        for conv, act in zip(self.convs[:-1], self.activations):
            x = act(conv(x))
        return self.convs[-1](x)

    def named_params(self, prefix):
        for i, conv in enumerate(self.convs):
            yield from conv.named_params(f"{prefix}.conv{i}")
        for i, act in enumerate(self.activations):
            yield from act.named_params(f"{prefix}.act{i}")


# ---------------------------------------------------------------------------
# LSTM stack

class LstmCell:
    """One LSTM layer: gated update of a hidden/cell state pair.

    Weight naming follows the gate it feeds: w_h* act on the hidden state,
    w_g* on the incoming signal; c/f/i/o are the candidate, forget, input
    and output gates.
    """

    FIELDS = ("w_hc", "w_gc", "b_c", "w_hf", "w_gf", "b_f",
              "w_hi", "w_gi", "b_i", "w_ho", "w_go", "b_o")

    def __init__(self, **tensors):
        for name in self.FIELDS:
            setattr(self, name, tensors[name])

    @classmethod
    def create(cls, rng, input_size, hidden_size, forget_bias=1.0):
        # recurrent weights use the customary U(-1/sqrt(n), 1/sqrt(n)) scale;
        # hotter draws saturate the gates on unnormalized gradient inputs
        n, d = hidden_size, input_size
        lim = 1.0 / np.sqrt(n)
        t = {}
        for gate in "cfio":
            t[f"w_h{gate}"] = Tensor(rng.uniform(-lim, lim, size=(n, n)))
            t[f"w_g{gate}"] = Tensor(rng.uniform(-lim, lim, size=(n, d)))
            t[f"b_{gate}"] = Tensor(np.full(n, forget_bias) if gate == "f"
                                    else np.zeros(n))
        return cls(**t)

    def step(self, z_in, h, c):
        """Advance one time step; returns (h', c') with z_out = h'."""
        cand = tanh(add(add(matvec(self.w_hc, h), matvec(self.w_gc, z_in)), self.b_c))
        f = sigmoid(add(add(matvec(self.w_hf, h), matvec(self.w_gf, z_in)), self.b_f))
        i = sigmoid(add(add(matvec(self.w_hi, h), matvec(self.w_gi, z_in)), self.b_i))
        o = sigmoid(add(add(matvec(self.w_ho, h), matvec(self.w_go, z_in)), self.b_o))
        c_new = add(mul(f, c), mul(i, cand))
        h_new = mul(o, tanh(c_new))
        return h_new, c_new

    def named_params(self, prefix):
        for name in self.FIELDS:
            yield f"{prefix}.{name}", getattr(self, name)


class LstmStack:
    """L chained LSTM cells plus the map from hidden space back to signals.

    The stack consumes one gradient vector per call and carries (h, c) per
    layer between calls; fresh state is all zeros.
    """

    def __init__(self, cells, w_hg, b_g, input_size, hidden_size):
        self.cells = cells
        self.w_hg = w_hg
        self.b_g = b_g
        self.input_size = input_size
        self.hidden_size = hidden_size

    @classmethod
    def create(cls, rng, input_size, hidden_size, layers=1):
        cells = [LstmCell.create(rng,
                                 input_size if l == 0 else hidden_size,
                                 hidden_size)
                 for l in range(layers)]
        # Output map starts as the transpose of the composed candidate-gate
        # input maps, so near zero state the stack emits approximately a
        # (small positive) multiple of its input: the learned velocity begins
        # as a pass-through of the gradient and training layers corrections
        # on top, instead of first having to rediscover the gradient itself.
        chain = cells[0].w_gc.data
        for cell in cells[1:]:
            chain = cell.w_gc.data @ chain
        w_hg = Tensor(chain.T.copy())
        b_g = Tensor(np.zeros(input_size))
        return cls(cells, w_hg, b_g, input_size, hidden_size)

    @property
    def layers(self):
        return len(self.cells)

    def initial_state(self, batch=None):
        shape = (self.hidden_size,) if batch is None else (batch, self.hidden_size)
        return [(Tensor(np.zeros(shape)), Tensor(np.zeros(shape)))
                for _ in self.cells]

    def __call__(self, g, state):
        """Map a gradient and the carried state to (velocity, new state)."""
        if len(state) != len(self.cells):
            raise ValueError(
                f"state has {len(state)} layers, stack has {len(self.cells)}")
        z = g
        new_state = []
        for cell, (h, c) in zip(self.cells, state):
            h, c = cell.step(z, h, c)
            new_state.append((h, c))
            z = h
        v = add(matvec(self.w_hg, z), self.b_g)
        return v, new_state

    def named_params(self, prefix):
        for l, cell in enumerate(self.cells):
            yield from cell.named_params(f"{prefix}.layer{l}")
        yield f"{prefix}.w_hg", self.w_hg
        yield f"{prefix}.b_g", self.b_g


# ---------------------------------------------------------------------------
# optimizer, schedule, clipping

class Adam:
    """Bias-corrected Adam over a fixed parameter list."""

    def __init__(self, params, beta1=0.9, beta2=0.99, eps=1e-8):
        self.params = list(params)
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads, lr):
        """Apply one update; ``grads`` aligns with the parameter list."""
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if g.shape != p.data.shape:
                raise ValueError(f"gradient shape {g.shape} != param {p.data.shape}")
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


@dataclass
class CosineSchedule:
    """Cosine annealing from lr0 at step 0 to zero at step t_max."""

    lr0: float
    t_max: int

    def rate(self, t):
        if t >= self.t_max:
            return 0.0
        return 0.5 * self.lr0 * (1.0 + np.cos(np.pi * t / self.t_max))


def cosine_lr(t, lr0, t_max):
    return CosineSchedule(lr0, t_max).rate(t)


def global_norm(grads):
    return float(np.sqrt(sum(float((g * g).sum()) for g in grads)))


def clip_global_norm(grads, max_norm=1.0):
    """Scale all gradients so their joint L2 norm is at most ``max_norm``.

    Returns (clipped gradients, pre-clip norm).
    """
    norm = global_norm(grads)
    if norm > max_norm:
        factor = max_norm / norm
        grads = [g * factor for g in grads]
    return grads, norm


# ---------------------------------------------------------------------------
# parameter files

_MAGIC = "dunets-params-v1"


def save_params(path, named_arrays, meta=None):
    """Write named float64 arrays: a JSON header line, then raw payload.

    The header records (name, shape, offset) per tensor; the payload is the
    little-endian float64 bytes in header order.  Round-trips bit-exactly.
    """
    entries = []
    chunks = []
    offset = 0
    for name, arr in named_arrays:
        data = np.asarray(getattr(arr, "data", arr), dtype="<f8", order="C")
        entries.append({"name": name, "shape": list(data.shape), "offset": offset})
        raw = data.tobytes()
        chunks.append(raw)
        offset += len(raw)
    header = {"format": _MAGIC, "meta": meta or {}, "tensors": entries}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8"))
        fh.write(b"\n")
        for raw in chunks:
            fh.write(raw)


def load_params(path):
    """Read a parameter file; returns (dict name -> array, meta dict)."""
    with open(path, "rb") as fh:
        header_line = fh.readline()
        payload = fh.read()
    header = json.loads(header_line.decode("utf-8"))
    if header.get("format") != _MAGIC:
        raise ValueError(f"{path}: not a parameter file")
    arrays = {}
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f8", count=count,
                            offset=start).reshape(shape)
        arrays[entry["name"]] = arr.copy()
    return arrays, header.get("meta", {})
