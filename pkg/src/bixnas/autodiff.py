"""Small reverse-mode autodiff over dense NCHW numpy arrays.

Only the operators the supernet and the two searches need are provided.
Every op builds a node holding its output, its parents and a closure that
pushes the upstream gradient into the parents.
"""

from __future__ import annotations

import contextlib
import functools
import threading
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from bixnas.errors import ConfigError, DataError, NumericError, UsageError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _state.grad = False
    try:
        yield
    finally:
        _state.grad = prev


class MacCounter:
    def __init__(self):
        self.total = 0

    def add(self, n):
        self.total += int(n)


@contextlib.contextmanager
def count_macs():
    """Accumulate multiply-accumulates of every op executed in this thread."""
    prev = getattr(_state, "macs", None)
    counter = MacCounter()
    _state.macs = counter
    try:
        yield counter
    finally:
        _state.macs = prev


_calls = {"backward": 0}
_calls_lock = threading.Lock()


def backward_calls() -> int:
    """Process-wide number of backward() invocations, for cost audits."""
    return _calls["backward"]


def _charge(n):
    counter = getattr(_state, "macs", None)
    if counter is not None:
        counter.add(n)


class Tensor:
    """A graph node: value, gradient slot and backward closure."""

    __slots__ = ("data", "grad", "parents", "backward_fn", "op", "is_param", "name", "tag")

    def __init__(self, data, parents=(), backward_fn=None, op="leaf", is_param=False, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.op = op
        self.is_param = is_param
        self.name = name
        self.tag = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def requires_grad(self):
        return self.is_param or self.backward_fn is not None

    def __repr__(self):
        return f"Tensor(op={self.op}, shape={self.shape}, dtype={self.dtype})"

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    # tiny arithmetic surface, used by tests and the optimizer sanity checks
    def __add__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, self.dtype))
        out = self.data + other.data

        def bw(g):
            return [_unbroadcast(g, self.shape), _unbroadcast(g, other.shape)]

        return _node(out, (self, other), bw, "add")

    def __mul__(self, other):
        other = other if isinstance(other, Tensor) else Tensor(np.asarray(other, self.dtype))
        a, b = self.data, other.data

        def bw(g):
            return [_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)]

        return _node(a * b, (self, other), bw, "mul")

    def sum(self):
        shape = self.shape

        def bw(g):
            return [np.broadcast_to(g, shape)]

        return _node(np.asarray(self.data.sum()), (self,), bw, "sum")


def parameter(data, name=None) -> Tensor:
    return Tensor(np.array(data, copy=True), is_param=True, name=name)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _node(out, parents, bw, op):
    if not np.isfinite(out).all():
        raise NumericError(f"non-finite values produced by {op}")
    if not _grad_enabled() or not any(p.requires_grad for p in parents):
        return Tensor(out, op=op)
    return Tensor(out, parents, bw, op)


def _check_finite(*arrays):
    for a in arrays:
        if a is not None and not np.isfinite(a).all():
            raise NumericError("non-finite input tensor")


# ---------------------------------------------------------------- convolution


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    if x.data.ndim != 4 or w.data.ndim != 4:
        raise ConfigError("conv2d expects 4-D input and weight")
    cout, cin, kh, kw = w.shape
    if kh != kw:
        raise ConfigError("conv2d supports square kernels only")
    if x.shape[1] != cin:
        raise ConfigError(f"conv2d channel mismatch: input {x.shape[1]} vs weight {cin}")
    if stride < 1 or padding < 0:
        raise ConfigError("conv2d needs stride >= 1 and padding >= 0")
    if b is not None and b.shape != (cout,):
        raise ConfigError("conv2d bias must have shape (Cout,)")
    _check_finite(x.data, w.data, None if b is None else b.data)
    k = kh
    bsz, _, h, wd = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (wd + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ConfigError("conv2d kernel larger than padded input")
    xp = x.data
    if padding:
        xp = np.zeros((bsz, cin, h + 2 * padding, wd + 2 * padding), dtype=x.dtype)
        xp[:, :, padding : padding + h, padding : padding + wd] = x.data
    if k == 1 and stride == 1:
        cols = None
        out = (w.data[:, :, 0, 0] @ xp.reshape(bsz, cin, h * wd)).reshape(bsz, cout, h, wd)
    else:
        cols = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
        out = np.tensordot(cols, w.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if b is not None:
        out = out + b.data[None, :, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)
    _charge(bsz * cin * cout * k * k * ho * wo)
    parents = (x, w) if b is None else (x, w, b)
    wdata = w.data

    def bw(g):
        if cols is None:
            g3 = g.reshape(bsz, cout, h * wd)
            dw = np.tensordot(g3, xp.reshape(bsz, cin, h * wd), axes=([0, 2], [0, 2]))[:, :, None, None]
            dxp = (wdata[:, :, 0, 0].T @ g3).reshape(bsz, cin, h, wd)
        else:
            dw = np.tensordot(g, cols, axes=([0, 2, 3], [0, 2, 3]))
            dcols = np.tensordot(g, wdata, axes=([1], [0]))  # B,Ho,Wo,Cin,k,k
            dxp = np.zeros(xp.shape, dtype=g.dtype)
            for i in range(k):
                for j in range(k):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dcols[
                        :, :, :, :, i, j
                    ].transpose(0, 3, 1, 2)
        dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        grads = [dx, dw.astype(g.dtype, copy=False)]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    return _node(out, parents, bw, "conv2d")


def max_pool2d(x: Tensor) -> Tensor:
    """2x2 max-pool with stride 2. Ties route the gradient to the first maximum."""
    bsz, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ConfigError(f"max_pool2d needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(bsz, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h // 2, w // 2, 4)
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def bw(g):
        d = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(d, idx[..., None], g[..., None], axis=-1)
        return [d.reshape(bsz, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(bsz, c, h, w)]

    return _node(np.ascontiguousarray(out), (x,), bw, "max_pool2d")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _node(x.data * mask, (x,), lambda g: [g * mask], "relu")


# ------------------------------------------------------------------- resizing


def interp_matrix(n_in: int, n_out: int, dtype=np.float64) -> np.ndarray:
    """Align-corners linear interpolation weights, shape (n_out, n_in). Read-only, cached."""
    return _interp_matrix(n_in, n_out, np.dtype(dtype).str)


@functools.lru_cache(maxsize=256)
def _interp_matrix(n_in, n_out, dtype):
    r = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1 or n_out == 1:
        r[:, 0] = 1.0
    else:
        pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 2)
        frac = pos - lo
        r[np.arange(n_out), lo] += 1.0 - frac
        r[np.arange(n_out), lo + 1] += frac
    r = r.astype(dtype)
    r.flags.writeable = False
    return r


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    if out_h < 1 or out_w < 1:
        raise ConfigError(f"bilinear_resize target must be >= 1x1, got {out_h}x{out_w}")
    bsz, c, h, w = x.shape
    if (h, w) == (out_h, out_w):
        return _node(x.data.copy(), (x,), lambda g: [g], "resize_identity")
    ry = interp_matrix(h, out_h, x.dtype)
    rx = interp_matrix(w, out_w, x.dtype)
    out = ry @ x.data @ rx.T
    _charge(4 * bsz * c * out_h * out_w)

    def bw(g):
        return [ry.T @ g @ rx]

    return _node(np.ascontiguousarray(out, dtype=x.dtype), (x,), bw, "bilinear_resize")


# --------------------------------------------------------------------- fusion


def average(inputs) -> Tensor:
    inputs = list(inputs)
    if not inputs:
        raise ConfigError("average of an empty list")
    shape = inputs[0].shape
    if any(t.shape != shape for t in inputs):
        raise ConfigError("average inputs must share one shape")
    if len(inputs) == 1:
        return inputs[0]
    n = len(inputs)
    acc = inputs[0].data.copy()
    for t in inputs[1:]:
        acc += t.data
    out = acc / n

    def bw(g):
        share = g / n
        return [share] * n

    return _node(out.astype(inputs[0].dtype, copy=False), inputs, bw, "average")


def batch_norm(x, gamma, beta, running_mean, running_var, training, momentum=0.1, eps=1e-5):
    """Per-channel normalization. Running statistics are updated in place when training."""
    _charge(x.data.size)
    if training:
        axes = (0, 2, 3)
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mu
        running_var *= 1 - momentum
        running_var += momentum * var * (m / max(m - 1, 1))
    else:
        mu, var = running_mean, running_var
    inv = (1.0 / np.sqrt(var + eps)).astype(x.dtype)
    xhat = (x.data - mu[None, :, None, None].astype(x.dtype)) * inv[None, :, None, None]
    out = xhat * gamma.data[None, :, None, None] + beta.data[None, :, None, None]

    def bw(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        dxhat = g * gamma.data[None, :, None, None]
        if training:
            mdx = dxhat.mean(axis=(0, 2, 3), keepdims=True)
            mdxx = (dxhat * xhat).mean(axis=(0, 2, 3), keepdims=True)
            dx = (dxhat - mdx - xhat * mdxx) * inv[None, :, None, None]
        else:
            dx = dxhat * inv[None, :, None, None]
        return [dx, dgamma, dbeta]

    return _node(out.astype(x.dtype, copy=False), (x, gamma, beta), bw, "batch_norm")


# ------------------------------------------------------------- gumbel softmax


def sample_gumbel(shape, rng: np.random.Generator, dtype=np.float64) -> np.ndarray:
    u = rng.random(shape)
    u = np.clip(u, np.finfo(np.float64).tiny, 1.0 - 1e-12)
    return (-np.log(-np.log(u))).astype(dtype)


def gumbel_softmax_columns(m: Tensor, temperature: float = 1.0, noise=None, hard: bool = True) -> Tensor:
    """Column-wise Gumbel-Softmax of an (N, K) logit matrix.

    hard=True emits exact one-hot columns and back-propagates through the soft
    column softmax (straight-through). With noise=None the forward is the
    column argmax, ties broken toward the lowest row.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be > 0, got {temperature}")
    if m.data.ndim != 2:
        raise ConfigError("selection logits must be a 2-D matrix")
    logits = m.data if noise is None else m.data + np.asarray(noise, dtype=m.dtype)
    if noise is not None and np.shape(noise) != m.shape:
        raise ConfigError("noise must have the shape of the logit matrix")
    z = logits / temperature
    z = z - z.max(axis=0, keepdims=True)
    e = np.exp(z)
    soft = e / e.sum(axis=0, keepdims=True)
    if hard:
        out = np.zeros_like(soft)
        out[logits.argmax(axis=0), np.arange(logits.shape[1])] = 1.0
    else:
        out = soft

    def bw(g):
        return [soft * (g - (g * soft).sum(axis=0, keepdims=True)) / temperature]

    return _node(out, (m,), bw, "gumbel_softmax")


def unique_select_average(streams, selection: Tensor) -> Tensor:
    """Average of the streams picked by at least one one-hot column of ``selection``.

    Column k of ``selection`` picks stream argmax_j selection[j, k]; repeated
    picks collapse to one. The gradient into selection[j, k] is the
    straight-through surrogate <g, x_j - y> / U with U the number of unique picks.
    """
    streams = list(streams)
    n, kcols = selection.shape
    if len(streams) != n:
        raise ConfigError(f"selection has {n} rows but {len(streams)} streams were given")
    picks = selection.data.argmax(axis=0)
    unique = sorted(set(int(p) for p in picks))
    chosen = [streams[j] for j in unique]
    u = len(unique)
    shape = streams[0].shape
    if any(s.shape != shape for s in streams):
        raise ConfigError("streams must be aligned to one shape")
    acc = chosen[0].data.copy()
    for t in chosen[1:]:
        acc += t.data
    y = (acc / u).astype(streams[0].dtype, copy=False)

    def bw(g):
        grads = []
        for j in range(n):
            grads.append(g / u if j in unique else np.zeros_like(g))
        inner = np.array([float(np.sum(g * (streams[j].data - y))) for j in range(n)]) / u
        grads.append(np.repeat(inner[:, None], kcols, axis=1).astype(selection.dtype))
        return grads

    return _node(y, (*streams, selection), bw, "select_average")


# ----------------------------------------------------------------------- loss


def cross_entropy(logits: Tensor, target) -> Tensor:
    """Mean per-pixel negative log-likelihood of integer class targets."""
    target = np.asarray(target)
    bsz, c, h, w = logits.shape
    if target.shape != (bsz, h, w):
        raise DataError(f"target shape {target.shape} does not match logits {logits.shape}")
    if target.min() < 0 or target.max() >= c:
        raise DataError(f"class index out of range [0, {c})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    picked = np.take_along_axis(logp, target[:, None].astype(np.int64), axis=1)
    count = bsz * h * w
    loss = -picked.sum() / count

    def bw(g):
        p = np.exp(logp)
        np.put_along_axis(
            p,
            target[:, None].astype(np.int64),
            np.take_along_axis(p, target[:, None].astype(np.int64), axis=1) - 1.0,
            axis=1,
        )
        return [p * (g / count)]

    return _node(np.asarray(loss, dtype=logits.dtype), (logits,), bw, "cross_entropy")


def mean_of(losses) -> Tensor:
    losses = list(losses)
    if not losses:
        raise UsageError("mean of no losses")
    n = len(losses)
    val = sum(float(l.data) for l in losses) / n

    def bw(g):
        return [g / n for _ in losses]

    return _node(np.asarray(val, dtype=losses[0].dtype), losses, bw, "mean")


# ------------------------------------------------------------------- backward


def backward(loss: Tensor) -> set:
    """Accumulate d loss / d node into every parameter reachable from ``loss``.

    Returns the set of tags seen on the way (blocks tag their outputs with the
    extraction stage, which is how stage-backward counts are audited).
    """
    if loss.data.size != 1:
        raise UsageError("backward needs a scalar loss")
    with _calls_lock:
        _calls["backward"] += 1
    order, seen = [], set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    tags = set()
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.tag is not None:
            tags.add(node.tag)
        if node.is_param:
            node._accumulate(g)
        if node.backward_fn is None:
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return tags


# ---------------------------------------------------------------------- adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Adam:
    """Adam with bias correction over a single parameter group."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.param_groups = [{"params": list(params)}]
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    @property
    def params(self):
        return self.param_groups[0]["params"]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        adam_step(self.state, self.params, [p.grad for p in self.params], lr=lr)


def adam_step(state: AdamState, params, grads, lr=None):
    params, grads = list(params), list(grads)
    if len(params) != len(grads):
        raise UsageError("params and grads are not aligned")
    for p, g in zip(params, grads):
        if g is not None and np.shape(g) != p.shape:
            raise UsageError(f"gradient shape {np.shape(g)} != parameter shape {p.shape}")
    state.step_count += 1
    lr = state.lr if lr is None else lr
    t = state.step_count
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            continue
        m = state.m.get(i)
        if m is None:
            m = state.m[i] = np.zeros_like(p.data)
            state.v[i] = np.zeros_like(p.data)
        v = state.v[i]
        m *= state.beta1
        m += (1 - state.beta1) * g
        v *= state.beta2
        v += (1 - state.beta2) * (g * g)
        upd = lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data -= upd.astype(p.dtype, copy=False)
        if not np.all(np.isfinite(p.data)):
            raise NumericError(f"parameter {p.name} became non-finite")
