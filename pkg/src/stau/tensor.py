"""Minimal reverse-mode tensor engine with the kernels the STAU model needs.

Every tensor is rank 4 (batch, channel, height, width). Storage defaults to
float32; all reductions run in float64 and are rounded back to the storage
dtype. Gradients are kept in float64.
"""

from __future__ import annotations

import contextlib
import math

import numpy as np

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-6

_grad_enabled = True


class NumericError(FloatingPointError):
    """Raised when a forward op produces NaN or Inf."""


class GraphError(RuntimeError):
    pass


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (evaluation, oracles)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype if dtype is not None else None)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if arr.ndim != 4:
            raise ValueError(f"tensors are rank 4, got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad})"

    def zero_grad(self):
        self.grad = None

    def _accum(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self):
        """Backpropagate from a single-element tensor through the recorded graph."""
        if self.data.size != 1:
            raise GraphError("backward() needs a scalar (1x1x1x1) loss")
        if self._consumed:
            raise GraphError("graph already consumed by a previous backward()")
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        self.grad = np.ones(self.shape, dtype=np.float64)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
            if node._parents:
                # intermediate grads are not needed once propagated
                node._backward = None
                node._parents = ()
                if not isinstance(node, Parameter):
                    node.grad = None
                node._consumed = True
        self._consumed = True

    # operator sugar for the few binary ops the model uses
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)


class Parameter(Tensor):
    """Trainable tensor carrying its own Adam moments and step counter."""

    __slots__ = ("m", "v", "step")

    def __init__(self, data, dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.m = np.zeros_like(self.data)
        self.v = np.zeros_like(self.data)
        self.step = 0

    def astype(self, dtype):
        self.data = self.data.astype(dtype)
        self.m = self.m.astype(dtype)
        self.v = self.v.astype(dtype)
        return self


def constant(arr, dtype=None):
    return Tensor(np.asarray(arr, dtype=dtype or DEFAULT_DTYPE))


def _result(out64, dtype, parents, backward):
    with np.errstate(over="ignore"):  # overflow is reported below as NumericError
        out = Tensor(out64.astype(dtype, copy=False))
    if not np.isfinite(out.data).all():
        raise NumericError("non-finite value produced by forward op")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _f64(t):
    return t.data.astype(np.float64, copy=False)


def _check_same(a, b, op):
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _reduce_to(g, shape):
    if g.shape == shape:
        return g
    axes = tuple(i for i, (gs, s) in enumerate(zip(g.shape, shape)) if s == 1 and gs != 1)
    return g.sum(axis=axes, keepdims=True)


# ---------------------------------------------------------------------------
# convolution kernels (float64 numpy, no graph)
#
# Activations are handled channel-major, (C, B, H, W), so the column matrix
# (K*K*C, B*Ho*Wo) is assembled from K*K strided slab copies and every
# reduction is one GEMM.


def conv_output_size(n, k, stride, pad):
    return (n + 2 * pad - k) // stride + 1


def deconv_output_size(n, k, stride, pad, output_padding):
    return (n - 1) * stride - 2 * pad + k + output_padding


def _pad_cb(xt, pad):
    if not pad:
        return xt
    c, b, h, w = xt.shape
    out = np.zeros((c, b, h + 2 * pad, w + 2 * pad))
    out[:, :, pad:pad + h, pad:pad + w] = xt
    return out


def _im2col(xt, k, stride, pad, ho, wo):
    """(C, B, H, W) -> (K*K*C, B*Ho*Wo) columns of the zero-padded input."""
    xt = _pad_cb(xt, pad)
    c, b = xt.shape[:2]
    cols = np.empty((k, k, c, b, ho, wo))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            cols[i, j] = xt[:, :, i:i + span_h:stride, j:j + span_w:stride]
    return cols.reshape(k * k * c, b * ho * wo)


def _col2im(cols, c, b, h, w, k, stride, pad, ho, wo):
    """Adjoint of _im2col: scatter-add columns back to an unpadded (C, B, H, W) image."""
    cols = cols.reshape(k, k, c, b, ho, wo)
    hp = max(h + 2 * pad, stride * (ho - 1) + k)
    wp = max(w + 2 * pad, stride * (wo - 1) + k)
    out = np.zeros((c, b, hp, wp))
    span_h, span_w = stride * (ho - 1) + 1, stride * (wo - 1) + 1
    for i in range(k):
        for j in range(k):
            out[:, :, i:i + span_h:stride, j:j + span_w:stride] += cols[i, j]
    return out[:, :, pad:pad + h, pad:pad + w]


def _kkc(w):
    """(O, C, K, K) weight -> (O, K*K*C) matrix matching the column layout."""
    return w.transpose(0, 2, 3, 1).reshape(w.shape[0], -1)


def _unkkc(m, shape):
    o, c, k, _ = shape
    return m.reshape(o, k, k, c).transpose(0, 3, 1, 2)


def _to_cb(a):
    return a.transpose(1, 0, 2, 3)


# ---------------------------------------------------------------------------
# differentiable ops


def conv2d(x, w, b=None, stride=1, padding=0):
    """2-D convolution, weight (Cout, Cin, K, K), optional bias (1, Cout, 1, 1)."""
    cout, cin, k, k2 = w.shape
    if k != k2:
        raise ValueError("square kernels only")
    if x.shape[1] != cin:
        raise ValueError(f"conv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride >= 1 and padding >= 0 required")
    bsz, _, h, wd = x.shape
    ho, wo = conv_output_size(h, k, stride, padding), conv_output_size(wd, k, stride, padding)
    if ho < 1 or wo < 1:
        raise ValueError("conv2d: output dimension < 1")
    cols = _im2col(_to_cb(_f64(x)), k, stride, padding, ho, wo)
    wmat = _kkc(_f64(w))
    out = (wmat @ cols).reshape(cout, bsz, ho, wo)
    if b is not None:
        out += _f64(b).reshape(cout, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        gmat = _to_cb(g).reshape(cout, -1)
        if w.requires_grad:
            w._accum(_unkkc(gmat @ cols.T, w.shape))
        if b is not None and b.requires_grad:
            b._accum(gmat.sum(axis=1).reshape(b.shape))
        if x.requires_grad:
            dx = _col2im(wmat.T @ gmat, cin, bsz, h, wd, k, stride, padding, ho, wo)
            x._accum(_to_cb(dx))

    return _result(_to_cb(out), x.dtype, parents, backward)


def deconv2d(x, w, b=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution, weight (Cin, Cout, K, K)."""
    cin, cout, k, _ = w.shape
    if x.shape[1] != cin:
        raise ValueError(f"deconv2d: input has {x.shape[1]} channels, weight expects {cin}")
    if stride < 1 or padding < 0:
        raise ValueError("deconv2d: stride >= 1 and padding >= 0 required")
    if not 0 <= output_padding < stride:
        raise ValueError("deconv2d: output_padding must be in [0, stride)")
    bsz, _, h, wd = x.shape
    oh = deconv_output_size(h, k, stride, padding, output_padding)
    ow = deconv_output_size(wd, k, stride, padding, output_padding)
    if oh < 1 or ow < 1:
        raise ValueError("deconv2d: output dimension < 1")
    xmat = _to_cb(_f64(x)).reshape(cin, -1)
    wmat = _kkc(_f64(w))
    out = _col2im(wmat.T @ xmat, cout, bsz, oh, ow, k, stride, padding, h, wd)
    if b is not None:
        out = out + _f64(b).reshape(cout, 1, 1, 1)
    parents = (x, w) if b is None else (x, w, b)

    def backward(g):
        cols = _im2col(_to_cb(g), k, stride, padding, h, wd)
        if w.requires_grad:
            w._accum(_unkkc(xmat @ cols.T, w.shape))
        if b is not None and b.requires_grad:
            b._accum(g.sum(axis=(0, 2, 3), keepdims=True))
        if x.requires_grad:
            x._accum(_to_cb((wmat @ cols).reshape(cin, bsz, h, wd)))

    return _result(_to_cb(out), x.dtype, parents, backward)


def concat(tensors, axis=0):
    """Concatenate along ``axis`` (stacks conv weights that share an input)."""
    arrs = [_f64(t) for t in tensors]
    bounds = np.cumsum([0] + [a.shape[axis] for a in arrs])

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * 4
                idx[axis] = slice(lo, hi)
                t._accum(g[tuple(idx)])

    return _result(np.concatenate(arrs, axis=axis), tensors[0].dtype, tuple(tensors), backward)


def split_channels(x, sizes):
    """Split along the channel axis into pieces of the given sizes."""
    if sum(sizes) != x.shape[1]:
        raise ValueError("split_channels: sizes do not add up to the channel count")
    x64 = _f64(x)
    outs = []
    lo = 0
    for n in sizes:
        hi = lo + n

        def backward(g, lo=lo, hi=hi):
            if x.grad is None:
                x.grad = np.zeros(x.shape)
            x.grad[:, lo:hi] += g

        outs.append(_result(x64[:, lo:hi], x.dtype, (x,), backward))
        lo = hi
    return outs


def layer_norm(x, gain, bias, eps=LN_EPS):
    """Normalize each sample over (C, H, W), then per-channel affine."""
    x64 = _f64(x)
    n = x64[0].size
    mu = x64.mean(axis=(1, 2, 3), keepdims=True)
    xc = x64 - mu
    var = (xc * xc).mean(axis=(1, 2, 3), keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    g64 = _f64(gain)
    out = xhat * g64 + _f64(bias)

    def backward(g):
        if gain.requires_grad:
            gain._accum((g * xhat).sum(axis=(0, 2, 3), keepdims=True))
        if bias.requires_grad:
            bias._accum(g.sum(axis=(0, 2, 3), keepdims=True))
        if x.requires_grad:
            dxhat = g * g64
            s1 = dxhat.sum(axis=(1, 2, 3), keepdims=True)
            s2 = (dxhat * xhat).sum(axis=(1, 2, 3), keepdims=True)
            x._accum(inv / n * (n * dxhat - s1 - xhat * s2))

    return _result(out, x.dtype, (x, gain, bias), backward)


def sigmoid(x):
    x64 = _f64(x)
    # split form avoids overflow in exp for large |x|
    e = np.exp(-np.abs(x64))
    out = np.where(x64 >= 0, 1.0 / (1.0 + e), e / (1.0 + e))

    def backward(g):
        x._accum(g * out * (1.0 - out))

    return _result(out, x.dtype, (x,), backward)


def leaky_relu(x, slope=0.2):
    x64 = _f64(x)
    pos = x64 > 0
    out = np.where(pos, x64, slope * x64)

    def backward(g):
        x._accum(np.where(pos, g, slope * g))

    return _result(out, x.dtype, (x,), backward)


def add(a, b):
    _check_same(a, b, "add")
    out = _f64(a) + _f64(b)

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(g)

    return _result(out, a.dtype, (a, b), backward)


def sub(a, b):
    _check_same(a, b, "sub")
    out = _f64(a) - _f64(b)

    def backward(g):
        if a.requires_grad:
            a._accum(g)
        if b.requires_grad:
            b._accum(-g)

    return _result(out, a.dtype, (a, b), backward)


def mul(a, b):
    _check_same(a, b, "mul")
    a64, b64 = _f64(a), _f64(b)

    def backward(g):
        if a.requires_grad:
            a._accum(g * b64)
        if b.requires_grad:
            b._accum(g * a64)

    return _result(a64 * b64, a.dtype, (a, b), backward)


def scale(x, c):
    """Multiply by a non-trainable real constant."""
    c = float(c)

    def backward(g):
        x._accum(g * c)

    return _result(_f64(x) * c, x.dtype, (x,), backward)


def affine_combine(gate, a, b):
    """gate*a + (1-gate)*b, evaluated as b + gate*(a-b) so that a == b returns b exactly."""
    _check_same(gate, a, "affine_combine")
    _check_same(a, b, "affine_combine")
    g64, a64, b64 = _f64(gate), _f64(a), _f64(b)
    diff = a64 - b64
    out = b64 + g64 * diff

    def backward(g):
        if gate.requires_grad:
            gate._accum(g * diff)
        if a.requires_grad:
            a._accum(g * g64)
        if b.requires_grad:
            b._accum(g * (1.0 - g64))

    return _result(out, a.dtype, (gate, a, b), backward)


def dot_score(a, b, per_location=False):
    """Per-sample correlation score sum(a*b) over (C,H,W) -> (B,1,1,1).

    With per_location=True the sum runs over channels only -> (B,1,H,W).
    """
    _check_same(a, b, "dot_score")
    a64, b64 = _f64(a), _f64(b)
    axes = (1,) if per_location else (1, 2, 3)
    out = (a64 * b64).sum(axis=axes, keepdims=True)

    def backward(g):
        if a.requires_grad:
            a._accum(g * b64)
        if b.requires_grad:
            b._accum(g * a64)

    return _result(out, a.dtype, (a, b), backward)


def score_softmax(scores):
    """Softmax across a list of equally shaped score tensors (element-wise over the list)."""
    if not scores:
        raise ValueError("score_softmax: empty score list")
    shape = scores[0].shape
    for s in scores:
        if s.shape != shape:
            raise ValueError("score_softmax: scores must share a shape")
    p = np.stack([_f64(s) for s in scores])
    p = p - p.max(axis=0, keepdims=True)
    e = np.exp(p)
    y = e / e.sum(axis=0, keepdims=True)
    outs = []
    for j in range(len(scores)):
        yj = y[j]

        def backward(g, j=j, yj=yj):
            # output j contributes g*y_j*(delta_ij - y_i) to score i
            for i, s in enumerate(scores):
                if not s.requires_grad:
                    continue
                if i == j:
                    s._accum(g * yj * (1.0 - yj))
                else:
                    s._accum(-g * yj * y[i])

        outs.append(_result(yj, scores[0].dtype, tuple(scores), backward))
    return outs


def weighted_sum(weights, tensors):
    """sum_j weights[j] * tensors[j]; weights broadcast over channels (and space if scalar)."""
    if not tensors or len(weights) != len(tensors):
        raise ValueError("weighted_sum: need equally many weights and tensors (>= 1)")
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ValueError("weighted_sum: history entries differ in shape")
    w64 = [_f64(w) for w in weights]
    t64 = [_f64(t) for t in tensors]
    out = w64[0] * t64[0]
    for wj, tj in zip(w64[1:], t64[1:]):
        out = out + wj * tj

    def backward(g):
        for w, t, wj, tj in zip(weights, tensors, w64, t64):
            if w.requires_grad:
                w._accum(_reduce_to(g * tj, w.shape))
            if t.requires_grad:
                t._accum(g * wj)

    return _result(out, tensors[0].dtype, tuple(weights) + tuple(tensors), backward)


def mse_loss(pred, target):
    """Mean squared error over all elements -> (1,1,1,1) tensor."""
    _check_same(pred, target, "mse_loss")
    p64, t64 = _f64(pred), _f64(target)
    diff = p64 - t64
    n = diff.size
    out = np.full((1, 1, 1, 1), np.dot(diff.ravel(), diff.ravel()) / n)

    def backward(g):
        if pred.requires_grad:
            pred._accum(g.item() * 2.0 / n * diff)
        if target.requires_grad:
            target._accum(-g.item() * 2.0 / n * diff)

    return _result(out, pred.dtype, (pred, target), backward)


def sum_scalars(terms):
    """Sum of (1,1,1,1) tensors."""
    out = np.zeros((1, 1, 1, 1))
    for t in terms:
        out = out + _f64(t)

    def backward(g):
        for t in terms:
            if t.requires_grad:
                t._accum(g)

    return _result(out, terms[0].dtype, tuple(terms), backward)


# ---------------------------------------------------------------------------
# initialization and optimizer


def kaiming_uniform(rng, shape, fan_in, dtype=DEFAULT_DTYPE):
    """Kaiming-uniform (a=sqrt(5) convention) bound = 1/sqrt(fan_in)."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Adam:
    """Bias-corrected Adam. Moments live on each Parameter; math runs in float64."""

    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        b1, b2 = self.beta1, self.beta2
        for p in self.params:
            if p.grad is None:
                continue
            g = p.grad
            p.step += 1
            m = b1 * p.m.astype(np.float64) + (1.0 - b1) * g
            v = b2 * p.v.astype(np.float64) + (1.0 - b2) * (g * g)
            mhat = m / (1.0 - b1 ** p.step)
            vhat = v / (1.0 - b2 ** p.step)
            new = p.data.astype(np.float64) - self.lr * mhat / (np.sqrt(vhat) + self.eps)
            p.m = m.astype(p.data.dtype)
            p.v = v.astype(p.data.dtype)
            p.data = new.astype(p.data.dtype)
        self.zero_grad()
