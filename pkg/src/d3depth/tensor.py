"""Minimal reverse-mode automatic differentiation for the D3 network.

Activations are 4-D arrays in channels-last order ``(N, H, W, C)``; a 3x3
convolution then becomes a single BLAS matmul followed by nine shifted adds
(or the reverse), which is what makes CPU training affordable. Convolution
weights are stored as ``(kh, kw, C_in, C_out)``.

Only the layer set the network needs is provided: ``conv2d``,
``upsample_conv``, ``batchnorm_relu``, ``concat``/``add`` and the masked
``l2_loss``, plus a few elementwise helpers used by the gradient checker.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

from . import _kernels as _k
from .exceptions import EvaluationError, ShapeError

logger = logging.getLogger(__name__)

__all__ = [
    "Tensor",
    "BatchNormState",
    "Adam",
    "conv2d",
    "upsample2x",
    "upsample_conv",
    "batchnorm_relu",
    "relu",
    "concat",
    "add",
    "concat_add",
    "l2_loss",
    "backward",
    "adam_step",
    "finite_difference_check",
]


class Tensor:
    """An array node in the computation graph.

    Leaves created with ``requires_grad=True`` are parameters: their ``grad``
    accumulates across :func:`backward` calls until cleared. Interior nodes
    get a fresh gradient slot on every backward pass.
    """

    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward_fn=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return not self.parents

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def sum(self):
        return _sum(self)

    def __add__(self, other):
        return add(self, _as_tensor(other, self.dtype))

    def __radd__(self, other):
        return add(_as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return _mul(self, _as_tensor(other, self.dtype))

    def __rmul__(self, other):
        return _mul(_as_tensor(other, self.dtype), self)

    def __repr__(self):
        kind = "param" if self.requires_grad and self.is_leaf else "node"
        return f"Tensor({kind}, shape={self.shape}, dtype={self.dtype})"


def _as_tensor(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _node(data, parents, backward_fn):
    parents = tuple(parents)
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return Tensor(data)
    return Tensor(data, requires_grad=True, parents=parents, backward_fn=backward_fn)


def _accumulate(t: Tensor, g):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=t.data.dtype, copy=True)
    else:
        t.grad += g


# ---------------------------------------------------------------------------
# ReLU kink tracing (used by the finite-difference checker)

_relu_trace: list | None = None


def _trace_relu(pre):
    if _relu_trace is not None:
        _relu_trace.append(pre > 0)


# ---------------------------------------------------------------------------
# Elementwise and structural ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def bw(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _node(a.data + b.data, (a, b), bw)


def _mul(a: Tensor, b: Tensor) -> Tensor:
    out = a.data * b.data

    def bw(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _node(out, (a, b), bw)


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _sum(a: Tensor) -> Tensor:
    def bw(g):
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _node(np.asarray(a.data.sum(dtype=a.dtype)), (a,), bw)


def relu(x: Tensor) -> Tensor:
    _trace_relu(x.data)
    on = x.data > 0

    def bw(g):
        _accumulate(x, g * on)

    return _node(np.where(on, x.data, 0).astype(x.dtype), (x,), bw)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    """Concatenate along the channel axis (last, by default)."""
    ref = tensors[0].shape
    axis = axis % len(ref)
    for t in tensors[1:]:
        other = t.shape
        if len(other) != len(ref) or any(
            a != b for i, (a, b) in enumerate(zip(ref, other)) if i != axis
        ):
            raise ShapeError(f"concat: shapes {ref} and {other} disagree off axis {axis}")
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)

    def bw(g):
        start = 0
        index = [slice(None)] * g.ndim
        for t, n in zip(tensors, sizes):
            index[axis] = slice(start, start + n)
            _accumulate(t, g[tuple(index)])
            start += n

    return _node(out, tensors, bw)


def concat_add(kind: str, a: Tensor, b: Tensor) -> Tensor:
    """Channel concatenation (``"concat"``) or elementwise sum (``"add"``)."""
    if kind == "concat":
        return concat([a, b])
    if kind == "add":
        return add(a, b)
    raise ValueError(f"unknown kind {kind!r}")


# ---------------------------------------------------------------------------
# Convolutions


def _check_conv(x, w, b):
    if x.data.ndim != 4:
        raise ShapeError(f"conv input must be (N, H, W, C), got {x.shape}")
    kh, kw, cin, cout = w.shape
    if kh != kw or kh not in (1, 3):
        raise ShapeError(f"conv kernel must be 1x1 or 3x3, got weight {w.shape}")
    if x.shape[3] != cin:
        raise ShapeError(f"conv input {x.shape} has {x.shape[3]} channels, weight {w.shape} expects {cin}")
    if b is not None and b.shape != (cout,):
        raise ShapeError(f"conv bias {b.shape} does not match weight {w.shape}")


def _im2col(x, stride):
    n, h, w, c = x.shape
    col = np.empty((n, -(-h // stride), -(-w // stride), 9, c), dtype=x.dtype)
    _k.im2col(x, stride, col)
    return col


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1) -> Tensor:
    """Zero-padded 'same' cross-correlation with a 1x1 or 3x3 kernel.

    Output spatial size is ``ceil(H / stride)``. Stride 2 requires even H, W.
    """
    _check_conv(x, weight, bias)
    if stride not in (1, 2):
        raise ShapeError(f"stride must be 1 or 2, got {stride}")
    n, h, w, c = x.shape
    if stride == 2 and (h % 2 or w % 2):
        raise ShapeError(f"stride-2 conv needs even spatial dims, got input {x.shape}")
    k, _, _, o = weight.shape
    xd = np.ascontiguousarray(x.data)
    wd = weight.data

    if k == 1:
        xs = np.ascontiguousarray(xd[:, ::stride, ::stride])
        out = (xs.reshape(-1, c) @ wd.reshape(c, o)).reshape(xs.shape[:3] + (o,))

        def bw(g):
            g2 = g.reshape(-1, o)
            if weight.requires_grad:
                _accumulate(weight, (xs.reshape(-1, c).T @ g2).reshape(wd.shape))
            if x.requires_grad:
                dxs = (g2 @ wd.reshape(c, o).T).reshape(xs.shape)
                if stride == 1:
                    _accumulate(x, dxs)
                else:
                    dx = np.zeros_like(xd)
                    dx[:, ::2, ::2] = dxs
                    _accumulate(x, dx)
            _bias_grad(bias, g2)

    elif stride == 1 and o < c:
        # output-side taps: one (C -> 9*O) matmul, then route the taps
        wt = wd.transpose(2, 0, 1, 3).reshape(c, 9 * o)
        stack = (xd.reshape(-1, c) @ wt).reshape(n, h, w, 9, o)
        out = np.zeros((n, h, w, o), dtype=stack.dtype)
        _k.scatter_taps(stack, out)
        del stack

        def bw(g):
            gs = np.empty((n, h, w, 9, o), dtype=g.dtype)
            _k.gather_taps(np.ascontiguousarray(g), gs)
            gs = gs.reshape(-1, 9 * o)
            if weight.requires_grad:
                dwt = xd.reshape(-1, c).T @ gs
                _accumulate(weight, dwt.reshape(c, 3, 3, o).transpose(1, 2, 0, 3))
            if x.requires_grad:
                _accumulate(x, (gs @ wt.T).reshape(xd.shape))
            _bias_grad(bias, g.reshape(-1, o))

    else:
        col = _im2col(xd, stride)
        ho, wo = col.shape[1:3]
        wm = wd.reshape(9 * c, o)
        out = (col.reshape(-1, 9 * c) @ wm).reshape(n, ho, wo, o)
        del col

        def bw(g):
            g2 = g.reshape(-1, o)
            if weight.requires_grad:
                colr = _im2col(xd, stride).reshape(-1, 9 * c)
                _accumulate(weight, (colr.T @ g2).reshape(wd.shape))
                del colr
            if x.requires_grad:
                dcol = (g2 @ wm.T).reshape(n, ho, wo, 9, c)
                dx = np.zeros_like(xd)
                _k.col2im(dcol, stride, dx)
                _accumulate(x, dx)
            _bias_grad(bias, g2)

    if bias is not None:
        out += bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


def _bias_grad(bias, g2):
    if bias is not None and bias.requires_grad:
        _accumulate(bias, g2.sum(axis=0))


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling."""
    xd = x.data
    n, h, w, c = xd.shape
    out = np.broadcast_to(xd[:, :, None, :, None, :], (n, h, 2, w, 2, c)).reshape(n, 2 * h, 2 * w, c)

    def bw(g):
        _accumulate(x, g.reshape(n, h, 2, w, 2, c).sum(axis=(2, 4)))

    return _node(np.ascontiguousarray(out), (x,), bw)


def upsample_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Nearest 2x upsample followed by a 3x3 stride-1 'same' convolution.

    Evaluated without materialising the upsampled input: the nine tap
    responses are computed at low resolution and routed to the upsampled
    grid. Numerically it is the same sum as ``conv2d(upsample2x(x), ...)``.
    """
    _check_conv(x, weight, bias)
    if weight.shape[0] != 3:
        raise ShapeError(f"upsample_conv needs a 3x3 kernel, got weight {weight.shape}")
    xd = np.ascontiguousarray(x.data)
    wd = weight.data
    n, h, w, c = xd.shape
    o = wd.shape[3]
    wt = wd.transpose(2, 0, 1, 3).reshape(c, 9 * o)
    stack = (xd.reshape(-1, c) @ wt).reshape(n, h, w, 9, o)
    out = np.zeros((n, 2 * h, 2 * w, o), dtype=stack.dtype)
    _k.up_scatter_taps(stack, out)
    del stack
    if bias is not None:
        out += bias.data

    def bw(g):
        gs = np.zeros((n, h, w, 9, o), dtype=g.dtype)
        _k.up_gather_taps(np.ascontiguousarray(g), gs)
        gs = gs.reshape(-1, 9 * o)
        if weight.requires_grad:
            dwt = xd.reshape(-1, c).T @ gs
            _accumulate(weight, dwt.reshape(c, 3, 3, o).transpose(1, 2, 0, 3))
        if x.requires_grad:
            _accumulate(x, (gs @ wt.T).reshape(xd.shape))
        _bias_grad(bias, g.reshape(-1, o))

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _node(out, parents, bw)


# ---------------------------------------------------------------------------
# Batch normalisation + ReLU


@dataclass
class BatchNormState:
    """Running statistics of one batchnorm layer (not trained by Adam)."""

    mean: np.ndarray
    var: np.ndarray
    updates: int = 0

    @classmethod
    def fresh(cls, channels, dtype=np.float32):
        return cls(np.zeros(channels, dtype=dtype), np.ones(channels, dtype=dtype))


BN_EPS = 1e-5
BN_MOMENTUM = 0.9


def batchnorm_relu(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    state: BatchNormState,
    mode: str = "train",
    update_stats: bool = True,
) -> Tensor:
    """Per-channel batch normalisation over (N, H, W) followed by ReLU.

    In ``"train"`` mode batch statistics are used and the running statistics
    move as ``running = 0.9 * running + 0.1 * batch``. ``"eval"`` uses the
    running statistics.
    """
    c = x.shape[-1]
    if gamma.shape != (c,) or beta.shape != (c,) or state.mean.shape != (c,):
        raise ShapeError(f"batchnorm params {gamma.shape} do not match input {x.shape}")
    xd = x.data
    x2 = xd.reshape(-1, c)
    m = x2.shape[0]
    ones = np.ones(m, dtype=xd.dtype)
    if mode == "train":
        mean = (ones @ x2) / m
        centred = x2 - mean
        var = np.einsum("ij,ij->j", centred, centred) / m
        del centred
        if update_stats:
            state.mean[...] = BN_MOMENTUM * state.mean + (1 - BN_MOMENTUM) * mean
            state.var[...] = BN_MOMENTUM * state.var + (1 - BN_MOMENTUM) * var
            state.updates += 1
    elif mode == "eval":
        if state.updates == 0:
            logger.warning("batchnorm in eval mode before any training update; using initial statistics")
        mean, var = state.mean.astype(xd.dtype), state.var.astype(xd.dtype)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    inv_std = (1.0 / np.sqrt(var + BN_EPS)).astype(xd.dtype)
    # y = gamma * (x - mean) * inv_std + beta, as one scale and one shift
    scale = gamma.data * inv_std
    out = x2 * scale
    out += beta.data - mean * scale
    _trace_relu(out)
    np.maximum(out, 0, out=out)
    out = out.reshape(xd.shape)

    def bw(g):
        dy = g.reshape(-1, c) * (out.reshape(-1, c) > 0)
        sum_dy = ones @ dy
        sum_dy_xhat = inv_std * (np.einsum("ij,ij->j", dy, x2) - mean * sum_dy)
        _accumulate(gamma, sum_dy_xhat)
        _accumulate(beta, sum_dy)
        if x.requires_grad:
            a = gamma.data * inv_std
            if mode == "train":
                b = -a * inv_std * sum_dy_xhat / m
                dx = dy * a
                dx += x2 * b
                dx += -a * sum_dy / m - mean * b
            else:
                dx = dy * a
            _accumulate(x, dx.reshape(xd.shape))

    return _node(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------------------
# Loss


def l2_loss(pred: Tensor, target, valid_mask) -> Tensor:
    """Mean squared residual over pixels where ``valid_mask`` is set."""
    target = np.asarray(target, dtype=pred.dtype)
    valid = np.asarray(valid_mask, dtype=bool)
    if target.shape != pred.shape or valid.shape != pred.shape:
        raise ShapeError(
            f"l2_loss: pred {pred.shape}, target {target.shape}, mask {valid.shape} must match"
        )
    count = int(valid.sum())
    if count == 0:
        raise EvaluationError("l2_loss: mask selects no pixels")
    resid = np.where(valid, pred.data - target, 0).astype(pred.dtype)
    loss = np.asarray(np.sum(resid * resid, dtype=np.float64) / count, dtype=pred.dtype)

    def bw(g):
        _accumulate(pred, (2.0 / count) * g * resid)

    return _node(loss, (pred,), bw)


# ---------------------------------------------------------------------------
# Backward traversal


def _topological(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in reversed(node.parents):
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every parameter reachable from scalar ``loss``.

    Parameter gradients accumulate across calls; interior gradients are
    released as soon as they have been propagated.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar root, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order = _topological(loss)
    for node in order:
        if not node.is_leaf:
            node.grad = None
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        node.backward_fn(node.grad)
        if not node.is_leaf:
            node.grad = None


# ---------------------------------------------------------------------------
# Optimiser


class Adam:
    """Bias-corrected Adam over a name -> parameter mapping."""

    def __init__(self, params: dict[str, Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in self.params.items():
            g = p.grad
            if g is None:
                g = np.zeros_like(p.data)
            m, v = self.m[name], self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            update = (m / c1) / (np.sqrt(v / c2) + self.eps)
            p.data -= (lr * update).astype(p.data.dtype)
            p.grad = None

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None


def adam_step(optimizer: Adam, lr: float) -> None:
    optimizer.step(lr)


# ---------------------------------------------------------------------------
# Finite-difference oracle


def finite_difference_check(
    fn: Callable[[], Tensor],
    params: Iterable[Tensor],
    max_coords: int | None = None,
    seed: int = 0,
    skip_kinks: bool = True,
) -> float:
    """Compare analytic gradients with central differences.

    ``fn`` rebuilds the graph from the current contents of ``params`` and
    returns a scalar. Each probed coordinate uses step
    ``h = 1e-4 * max(1, |x|)``; the returned value is the maximum over
    coordinates of ``|a - n| / max(1e-8, |a| + |n|)``.

    With ``skip_kinks`` a coordinate is not scored when either probe flips
    the sign of any ReLU input, since the function is not differentiable
    across that step. ``max_coords`` caps the coordinates probed per
    parameter (chosen with ``seed``).
    """
    global _relu_trace
    params = list(params)
    for p in params:
        p.grad = None
    _relu_trace = [] if skip_kinks else None
    try:
        loss = fn()
        base_pattern = _relu_trace
        _relu_trace = None
        backward(loss)
        analytic = [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]

        rng = np.random.default_rng(seed)
        worst = 0.0
        skipped = 0
        for p, grad in zip(params, analytic):
            flat = p.data.reshape(-1)
            coords = np.arange(flat.size)
            if max_coords is not None and flat.size > max_coords:
                coords = np.sort(rng.choice(flat.size, size=max_coords, replace=False))
            for i in coords:
                orig = flat[i]
                h = 1e-4 * max(1.0, abs(float(orig)))
                values = []
                crossed = False
                for sign in (1.0, -1.0):
                    flat[i] = orig + sign * h
                    _relu_trace = [] if skip_kinks else None
                    values.append(float(fn().data))
                    if skip_kinks and not _same_pattern(base_pattern, _relu_trace):
                        crossed = True
                    _relu_trace = None
                flat[i] = orig
                if crossed:
                    skipped += 1
                    continue
                numeric = (values[0] - values[1]) / (2 * h)
                a = float(grad.reshape(-1)[i])
                err = abs(a - numeric) / max(1e-8, abs(a) + abs(numeric))
                worst = max(worst, err)
        if skipped:
            logger.info("finite_difference_check: %d coordinates straddled a ReLU kink", skipped)
        return worst
    finally:
        _relu_trace = None
        for p in params:
            p.grad = None


def _same_pattern(a, b):
    if a is None or b is None:
        return True
    if len(a) != len(b):
        return False
    return all(np.array_equal(x, y) for x, y in zip(a, b))
