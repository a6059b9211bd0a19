"""Reverse-mode differentiable tensors on top of numpy.

A :class:`Tensor` wraps an ndarray of rank <= 4 plus an optional gradient
buffer. Every primitive op returns a new tensor carrying a closure that maps
the output gradient back to its parents, so a scalar loss can be
backpropagated by walking the recorded graph in reverse topological order
(see :class:`OpTrace`). Feature tensors are laid out N x C x T x F with N the
batch, C channels, T frames and F frequency bins.

Training runs in float32; :func:`finite_diff_check` promotes to float64 so
central differences are meaningful.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

DEFAULT_DTYPE = np.float32
BN_EPSILON = 1e-5
MAX_RANK = 4


class Tensor:
    """Rank <= 4 numeric array with an optional gradient slot.

    Data is treated as immutable once created; only ``grad`` (and, for
    trainable parameters, ``data`` under an exclusive optimizer) may change.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp", "_op")

    def __init__(self, data, requires_grad=False, _parents=(), _vjp=None, _op="leaf"):
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim > MAX_RANK:
            raise ValueError(f"tensor rank {arr.ndim} exceeds the supported maximum of {MAX_RANK}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = _parents
        self._vjp = _vjp
        self._op = _op

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, _coerce(other, self))

    def __sub__(self, other):
        return sub(self, _coerce(other, self))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __rmul__(self, other):
        return self.__mul__(other)

    def __repr__(self):
        grad = ", grad" if self.grad is not None else ""
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, op={self._op}{grad})"


def _coerce(value, like: Tensor) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.full(like.shape, value, dtype=like.dtype))


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value if dtype is None else value.astype(dtype)
    arr = np.asarray(value, dtype=dtype if dtype is not None else DEFAULT_DTYPE)
    return Tensor(arr)


def _result(data, parents, vjp, op) -> Tensor:
    """Wrap an op output, keeping the backward closure only if needed."""
    if any(p.requires_grad for p in parents):
        return Tensor(data, requires_grad=True, _parents=tuple(parents), _vjp=vjp, _op=op)
    return Tensor(data, _op=op)


def _check_same_shape(op: str, *tensors: Tensor):
    first = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != first:
            raise ValueError(f"{op}: operand shapes {first} and {t.shape} differ")


# ---------------------------------------------------------------------------
# backward machinery
# ---------------------------------------------------------------------------


class OpTrace:
    """Executed ops of one graph, in topological order (inputs first).

    Built on demand by walking parent links from an output tensor; the
    backward pass consumes the list in reverse, visiting each op once.
    """

    def __init__(self, nodes: list):
        self.nodes = nodes

    def __len__(self):
        return len(self.nodes)

    @classmethod
    def from_output(cls, out: Tensor) -> "OpTrace":
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(out, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return cls(order)


def trace(out: Tensor) -> OpTrace:
    return OpTrace.from_output(out)


def backward(loss: Tensor):
    """Populate ``grad`` on every requires_grad tensor reachable from ``loss``.

    Gradients accumulate: a tensor consumed by several ops receives the sum
    of all path contributions, and repeated backward calls keep adding until
    ``zero_grad``.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward requires a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        return
    run = trace(loss)
    seed = np.ones_like(loss.data)
    loss.grad = seed if loss.grad is None else loss.grad + seed
    for node in reversed(run.nodes):
        if node._vjp is None or node.grad is None:
            continue
        parent_grads = node._vjp(node.grad)
        for parent, g in zip(node._parents, parent_grads):
            if g is None or not parent.requires_grad:
                continue
            if parent.grad is None:
                parent.grad = g
            else:
                parent.grad = parent.grad + g


# ---------------------------------------------------------------------------
# elementwise ops
# ---------------------------------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("add", a, b)

    def vjp(g):
        return g, g

    return _result(a.data + b.data, (a, b), vjp, "add")


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("sub", a, b)

    def vjp(g):
        return g, -g

    return _result(a.data - b.data, (a, b), vjp, "sub")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape("mul", a, b)

    def vjp(g):
        return g * b.data, g * a.data

    return _result(a.data * b.data, (a, b), vjp, "mul")


def scale(x: Tensor, factor: float) -> Tensor:
    factor = float(factor)

    def vjp(g):
        return (g * factor,)

    return _result(x.data * factor, (x,), vjp, "scale")


def affine_combine(a: Tensor, b: Tensor, m: Tensor) -> Tensor:
    """a*m + b*(1-m), the merge-gate combination."""
    _check_same_shape("affine-combine", a, b, m)

    def vjp(g):
        return g * m.data, g * (1.0 - m.data), g * (a.data - b.data)

    return _result(a.data * m.data + b.data * (1.0 - m.data), (a, b, m), vjp, "affine-combine")


def ewise(op: str, a: Tensor, b: Tensor, m: Tensor | None = None) -> Tensor:
    if op == "add":
        return add(a, b)
    if op == "mul":
        return mul(a, b)
    if op == "affine-combine":
        if m is None:
            raise ValueError("ewise: affine-combine requires the mask operand m")
        return affine_combine(a, b, m)
    raise ValueError(f"ewise: unknown op {op!r}, expected add, mul or affine-combine")


def tsum(x: Tensor) -> Tensor:
    def vjp(g):
        return (np.full(x.shape, g.reshape(()), dtype=x.dtype),)

    return _result(np.asarray(x.data.sum(), dtype=x.dtype), (x,), vjp, "sum")


def mean(x: Tensor) -> Tensor:
    return scale(tsum(x), 1.0 / x.size)


def mse(a: Tensor, b: Tensor) -> Tensor:
    """Mean squared error as a differentiable graph scalar."""
    d = sub(a, b)
    return mean(mul(d, d))


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------


def sigmoid(x: Tensor) -> Tensor:
    out = expit(x.data)

    def vjp(g):
        return (g * out * (1.0 - out),)

    return _result(out, (x,), vjp, "sigmoid")


def prelu(x: Tensor, slope: Tensor) -> Tensor:
    """x where x > 0, per-channel slope * x otherwise.

    The channel axis is axis 1 for rank-4 input and axis 0 for rank-3.
    """
    if x.ndim == 4:
        caxis = 1
    elif x.ndim == 3:
        caxis = 0
    else:
        raise ValueError(f"prelu: expected rank-3 or rank-4 input, got shape {tuple(x.shape)}")
    channels = x.shape[caxis]
    if slope.shape != (channels,):
        raise ValueError(
            f"prelu: slope shape {tuple(slope.shape)} does not match {channels} channels"
        )
    bshape = [1] * x.ndim
    bshape[caxis] = channels
    s = slope.data.reshape(bshape)
    pos = x.data > 0
    out = np.where(pos, x.data, s * x.data)

    def vjp(g):
        dx = np.where(pos, g, g * s)
        neg = ~pos
        axes = tuple(i for i in range(x.ndim) if i != caxis)
        dslope = np.sum(np.where(neg, g * x.data, 0.0), axis=axes)
        return dx, dslope.astype(slope.dtype)

    return _result(out, (x, slope), vjp, "prelu")


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of an R x D matrix, stabilized by max subtraction."""
    if x.ndim != 2:
        raise ValueError(f"softmax_rows: expected a 2-D input, got shape {tuple(x.shape)}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=1, keepdims=True)

    def vjp(g):
        inner = (g * out).sum(axis=1, keepdims=True)
        return ((g - inner) * out,)

    return _result(out, (x,), vjp, "softmax_rows")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError(
            f"matmul: expected 2-D operands, got shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    if a.shape[1] != b.shape[0]:
        raise ValueError(
            f"matmul: inner extents differ, {tuple(a.shape)} x {tuple(b.shape)}"
        )

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(a.data @ b.data, (a, b), vjp, "matmul")


def transpose2(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise ValueError(f"transpose2: expected a 2-D input, got shape {tuple(x.shape)}")

    def vjp(g):
        return (g.T.copy(),)

    return _result(x.data.T.copy(), (x,), vjp, "transpose")


# ---------------------------------------------------------------------------
# shape ops
# ---------------------------------------------------------------------------


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape, dtype=np.int64)) != x.size:
        raise ValueError(f"reshape: cannot view shape {tuple(x.shape)} as {shape}")
    if len(shape) > MAX_RANK:
        raise ValueError(f"reshape: target rank {len(shape)} exceeds {MAX_RANK}")

    def vjp(g):
        return (g.reshape(x.shape),)

    return _result(x.data.reshape(shape), (x,), vjp, "reshape")


def reshape_axis(x: Tensor, axis: str) -> Tensor:
    """Flatten C x T x F for axis-wise attention.

    temporal:  rows are frames, out[t, c*F + f] = x[c, t, f]
    frequency: rows are bins,   out[f, c*T + t] = x[c, t, f]

    Within a row the last spatial index varies fastest, then the channel.
    """
    if x.ndim != 3:
        raise ValueError(f"reshape_axis: expected C x T x F input, got shape {tuple(x.shape)}")
    c, t, f = x.shape
    if axis == "temporal":
        out = np.ascontiguousarray(x.data.transpose(1, 0, 2)).reshape(t, c * f)

        def vjp(g):
            return (np.ascontiguousarray(g.reshape(t, c, f).transpose(1, 0, 2)),)

    elif axis == "frequency":
        out = np.ascontiguousarray(x.data.transpose(2, 0, 1)).reshape(f, c * t)

        def vjp(g):
            return (np.ascontiguousarray(g.reshape(f, c, t).transpose(1, 2, 0)),)

    else:
        raise ValueError(f"reshape_axis: axis must be 'temporal' or 'frequency', got {axis!r}")
    return _result(out, (x,), vjp, f"reshape_{axis}")


def reshape_axis_inv(y: Tensor, shape: Sequence[int], axis: str) -> Tensor:
    """Exact inverse of :func:`reshape_axis` back to the given C x T x F shape."""
    c, t, f = (int(s) for s in shape)
    if axis == "temporal":
        expect = (t, c * f)
    elif axis == "frequency":
        expect = (f, c * t)
    else:
        raise ValueError(f"reshape_axis_inv: axis must be 'temporal' or 'frequency', got {axis!r}")
    if tuple(y.shape) != expect:
        raise ValueError(
            f"reshape_axis_inv: input shape {tuple(y.shape)} does not match "
            f"{expect} required for target {(c, t, f)} along {axis}"
        )
    if axis == "temporal":
        out = np.ascontiguousarray(y.data.reshape(t, c, f).transpose(1, 0, 2))

        def vjp(g):
            return (np.ascontiguousarray(g.transpose(1, 0, 2)).reshape(t, c * f),)

    else:
        out = np.ascontiguousarray(y.data.reshape(f, c, t).transpose(1, 2, 0))

        def vjp(g):
            return (np.ascontiguousarray(g.transpose(2, 0, 1)).reshape(f, c * t),)

    return _result(out, (y,), vjp, f"reshape_{axis}_inv")


def concat_channels(inputs: Iterable[Tensor]) -> Tensor:
    """Stack N x Ci x T x F tensors along the channel axis, argument order kept."""
    ts = list(inputs)
    if not ts:
        raise ValueError("concat_channels: need at least one input")
    base = ts[0].shape
    for t in ts:
        if t.ndim != 4:
            raise ValueError(f"concat_channels: expected rank-4 inputs, got shape {tuple(t.shape)}")
        if (t.shape[0], t.shape[2], t.shape[3]) != (base[0], base[2], base[3]):
            raise ValueError(
                f"concat_channels: batch/spatial extents differ, {base} vs {tuple(t.shape)}"
            )
    sizes = [t.shape[1] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def vjp(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(ts)))

    return _result(np.concatenate([t.data for t in ts], axis=1), tuple(ts), vjp, "concat")


def take_sample(x: Tensor, n: int) -> Tensor:
    """Select sample n of an N x C x T x F batch as a C x T x F tensor."""
    if x.ndim != 4:
        raise ValueError(f"take_sample: expected rank-4 input, got shape {tuple(x.shape)}")
    if not 0 <= n < x.shape[0]:
        raise ValueError(f"take_sample: index {n} out of range for batch {x.shape[0]}")

    def vjp(g):
        full = np.zeros(x.shape, dtype=g.dtype)
        full[n] = g
        return (full,)

    return _result(x.data[n].copy(), (x,), vjp, "take_sample")


def stack_samples(samples: Iterable[Tensor]) -> Tensor:
    """Stack C x T x F tensors into an N x C x T x F batch."""
    ts = list(samples)
    if not ts:
        raise ValueError("stack_samples: need at least one sample")
    _check_same_shape("stack_samples", *ts)

    def vjp(g):
        return tuple(g[i] for i in range(len(ts)))

    return _result(np.stack([t.data for t in ts], axis=0), tuple(ts), vjp, "stack_samples")


# ---------------------------------------------------------------------------
# convolution and batch norm
# ---------------------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor, stride=(1, 1), padding="same") -> Tensor:
    """2-D cross-correlation plus bias over N x Cin x T x F input.

    Zero-pads so that stride (1,1) preserves T and F; kernel extents must be
    odd for that to hold exactly.
    """
    if padding != "same":
        raise ValueError(f"conv2d: only 'same' padding is supported, got {padding!r}")
    if x.ndim != 4 or weight.ndim != 4:
        raise ValueError(
            f"conv2d: expected rank-4 input and weight, got {tuple(x.shape)} and {tuple(weight.shape)}"
        )
    n, cin, t, f = x.shape
    cout, wcin, kt, kf = weight.shape
    if wcin != cin:
        raise ValueError(
            f"conv2d: input has {cin} channels (shape {tuple(x.shape)}) but weight expects "
            f"{wcin} (shape {tuple(weight.shape)})"
        )
    if kt % 2 == 0 or kf % 2 == 0:
        raise ValueError(f"conv2d: kernel extents must be odd, got ({kt}, {kf})")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {tuple(bias.shape)} does not match {cout} filters")
    st, sf = int(stride[0]), int(stride[1])
    if st < 1 or sf < 1:
        raise ValueError(f"conv2d: stride must be positive, got {stride}")

    pt, pf = kt // 2, kf // 2
    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pt), (pf, pf)))
    win = sliding_window_view(xp, (kt, kf), axis=(2, 3))[:, :, ::st, ::sf]
    to, fo = win.shape[2], win.shape[3]
    # im2col: rows are output positions, columns are receptive-field taps
    cols = np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5)).reshape(n * to * fo, cin * kt * kf)
    w2 = weight.data.reshape(cout, -1)
    out = cols @ w2.T
    out = out.reshape(n, to, fo, cout).transpose(0, 3, 1, 2) + bias.data[None, :, None, None]
    out = np.ascontiguousarray(out)

    def vjp(g):
        g2 = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(n * to * fo, cout)
        dw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        db = g2.sum(axis=0) if bias.requires_grad else None
        dx = None
        if x.requires_grad:
            dcols = g2 @ w2
            dwin = dcols.reshape(n, to, fo, cin, kt, kf)
            dxp = np.zeros_like(xp)
            for i in range(kt):
                for j in range(kf):
                    dxp[:, :, i:i + to * st:st, j:j + fo * sf:sf] += dwin[:, :, :, :, i, j].transpose(0, 3, 1, 2)
            dx = dxp[:, :, pt:pt + t, pf:pf + f]
        return dx, dw, db

    return _result(out, (x, weight, bias), vjp, "conv2d")


class BatchNormState:
    """Per-channel running statistics updated during training steps."""

    __slots__ = ("running_mean", "running_var", "momentum")

    def __init__(self, channels: int, momentum: float = 0.1, dtype=DEFAULT_DTYPE):
        self.running_mean = np.zeros(channels, dtype=dtype)
        self.running_var = np.ones(channels, dtype=dtype)
        self.momentum = momentum

    @property
    def channels(self) -> int:
        return self.running_mean.shape[0]


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Per-channel batch normalization over N x C x T x F input.

    Training mode normalizes with batch statistics and updates the running
    averages in ``state``; eval mode uses the stored running statistics.
    """
    if x.ndim != 4:
        raise ValueError(f"batch_norm: expected rank-4 input, got shape {tuple(x.shape)}")
    n, c, t, f = x.shape
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(
            f"batch_norm: gamma/beta shapes {tuple(gamma.shape)}/{tuple(beta.shape)} "
            f"do not match {c} channels"
        )
    if state.channels != c:
        raise ValueError(f"batch_norm: state tracks {state.channels} channels, input has {c}")

    axes = (0, 2, 3)
    gb = gamma.data[None, :, None, None]

    if training:
        m = n * t * f
        if m < 2:
            raise ValueError(
                f"batch_norm: training mode needs at least 2 values per channel, got {m}"
            )
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        inv = 1.0 / np.sqrt(var + BN_EPSILON)
        xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
        mom = state.momentum
        state.running_mean = ((1.0 - mom) * state.running_mean + mom * mu).astype(
            state.running_mean.dtype
        )
        state.running_var = ((1.0 - mom) * state.running_var + mom * var).astype(
            state.running_var.dtype
        )

        def vjp(g):
            dgamma = (g * xhat).sum(axis=axes) if gamma.requires_grad else None
            dbeta = g.sum(axis=axes) if beta.requires_grad else None
            dx = None
            if x.requires_grad:
                dxhat = g * gb
                mean_d = dxhat.mean(axis=axes)[None, :, None, None]
                mean_dx = (dxhat * xhat).mean(axis=axes)[None, :, None, None]
                dx = inv[None, :, None, None] * (dxhat - mean_d - xhat * mean_dx)
            return dx, dgamma, dbeta

    else:
        inv = 1.0 / np.sqrt(state.running_var + BN_EPSILON)
        xhat = (x.data - state.running_mean[None, :, None, None]) * inv[None, :, None, None]

        def vjp(g):
            dgamma = (g * xhat).sum(axes) if gamma.requires_grad else None
            dbeta = g.sum(axes) if beta.requires_grad else None
            dx = g * gb * inv[None, :, None, None] if x.requires_grad else None
            return dx, dgamma, dbeta

    out = gb * xhat + beta.data[None, :, None, None]
    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), vjp, "batch_norm")


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def finite_diff_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must map a tensor to a deterministic scalar; the check runs in
    float64 regardless of the input dtype. The error for element i is
    |analytic_i - numeric_i| / max(1, |analytic_i|).
    """
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    def evaluate(values: np.ndarray) -> np.ndarray:
        out = f(Tensor(values.copy()))
        if not isinstance(out, Tensor):
            raise ValueError("finite_diff_check: f must return a Tensor")
        if out.data.size != 1:
            raise ValueError(f"finite_diff_check: f must be scalar-valued, got shape {tuple(out.shape)}")
        return np.asarray(out.data, dtype=np.float64).reshape(())

    first, second = evaluate(base), evaluate(base)
    if not np.array_equal(first, second):
        raise ValueError("finite_diff_check: f is not deterministic, two evaluations differ")

    probe = Tensor(base.copy(), requires_grad=True)
    out = f(probe)
    if out.data.size != 1:
        raise ValueError(f"finite_diff_check: f must be scalar-valued, got shape {tuple(out.shape)}")
    backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)
    analytic = np.asarray(analytic, dtype=np.float64)

    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        saved = flat[i]
        flat[i] = saved + eps
        hi = evaluate(base)
        flat[i] = saved - eps
        lo = evaluate(base)
        flat[i] = saved
        nflat[i] = (hi - lo) / (2.0 * eps)

    denom = np.maximum(1.0, np.abs(analytic))
    err = np.abs(analytic - numeric) / denom
    return float(err.max()) if err.size else 0.0
