"""Differentiable operations.

Binary elementwise ops follow numpy trailing-dimension broadcasting; their
gradients are summed back over the broadcast axes by :func:`unbroadcast`.
"""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .tensor import DTYPE, ShapeError, Tensor, as_tensor, make_result

_debug = {"check_domain": False}


def set_debug(check_domain: bool) -> None:
    """Toggle domain checks for log/div (non-positive or zero operands)."""
    _debug["check_domain"] = bool(check_domain)


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


def _broadcast_shape(op: str, a: Tensor, b: Tensor) -> tuple[int, ...]:
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible") from None


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("add", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_result(a.data + b.data, (a, b), backward, "add")


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("sub", a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_result(a.data - b.data, (a, b), backward, "sub")


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("mul", a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(a.data * b.data, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape("div", a, b)
    if _debug["check_domain"] and np.any(b.data == 0):
        raise FloatingPointError("div: zero denominator")
    out = a.data / b.data

    def backward(g):
        ga = unbroadcast(g / b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(-g * out / b.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "div")


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_result(-a.data, (a,), lambda g: (-g,), "neg")


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_result(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = as_tensor(a)
    if _debug["check_domain"] and np.any(a.data <= 0):
        raise FloatingPointError("log: non-positive operand")
    return make_result(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    return make_result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    out = 0.5 * (1.0 + np.tanh(0.5 * a.data))
    return make_result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def square(a) -> Tensor:
    a = as_tensor(a)
    return make_result(a.data * a.data, (a,), lambda g: (2.0 * g * a.data,), "square")


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out = np.sqrt(a.data)
    return make_result(out, (a,), lambda g: (0.5 * g / out,), "sqrt")


_UNARY = {"exp": exp, "log": log, "relu": relu, "sigmoid": sigmoid, "neg": neg}
_BINARY = {"add": add, "sub": sub, "mul": mul, "div": div}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch by op name; binary kinds require ``b``."""
    if kind in _BINARY:
        if b is None:
            raise ValueError(f"{kind} needs two operands")
        return _BINARY[kind](a, b)
    if kind in _UNARY:
        return _UNARY[kind](a)
    raise ValueError(f"unknown elementwise op {kind!r}")


# ---------------------------------------------------------------------------
# reductions and shape manipulation
# ---------------------------------------------------------------------------

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).copy(),)

    return make_result(out, (a,), backward, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return sum(a, axis=axes, keepdims=keepdims) * (1.0 / n)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    out = a.data.reshape(shape)
    return make_result(out, (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return make_result(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),), "transpose")


def swap_last(a) -> Tensor:
    a = as_tensor(a)
    return make_result(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "swap_last")


def broadcast_to(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = np.broadcast_to(a.data, shape).copy()
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {a.shape} to {tuple(shape)}") from None
    return make_result(out, (a,), lambda g: (unbroadcast(g, a.shape),), "broadcast_to")


def getitem(a, index) -> Tensor:
    a = as_tensor(a)
    out = a.data[index]

    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return make_result(np.array(out, dtype=DTYPE), (a,), backward, "getitem")


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    try:
        out = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {exc}") from None
    sizes = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return make_result(out, ts, backward, "concat")


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    expanded = [reshape(t, t.shape[:axis % (t.ndim + 1)] + (1,) + t.shape[axis % (t.ndim + 1):]) for t in ts]
    return concat(expanded, axis=axis)


def where(cond: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    out = np.where(cond, a.data, b.data)

    def backward(g):
        return unbroadcast(np.where(cond, g, 0.0), a.shape), unbroadcast(np.where(cond, 0.0, g), b.shape)

    return make_result(out, (a, b), backward, "where")


def detach(a) -> Tensor:
    return Tensor(as_tensor(a).data)


# ---------------------------------------------------------------------------
# softmax family
# ---------------------------------------------------------------------------

def logsumexp(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    s = np.exp(a.data - m).sum(axis=axis, keepdims=True)
    out_k = np.log(s) + m
    weights = np.exp(a.data - out_k)

    def backward(g):
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (g * weights,)

    out = out_k if keepdims else np.squeeze(out_k, axis=axis)
    return make_result(out, (a,), backward, "logsumexp")


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(out)

    def backward(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return make_result(out, (a,), backward, "log_softmax")


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    e = np.exp(a.data - m)
    out = e / e.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return make_result(out, (a,), backward, "softmax")


def softmax_ce_with_logits(logits, target, reduction: str = "mean") -> Tensor:
    """Two-class (or C-class) cross-entropy over the channel axis.

    ``logits`` is B×C×H×W, ``target`` B×H×W with integer class labels.
    ``reduction="mean"`` averages over every pixel; ``"sum"`` sums pixels per
    image and averages over the batch.
    """
    logits = as_tensor(logits)
    t = target.data if isinstance(target, Tensor) else np.asarray(target)
    if logits.ndim != 4 or t.shape != (logits.shape[0],) + logits.shape[2:]:
        raise ShapeError(f"softmax_ce_with_logits: logits {logits.shape} vs target {t.shape}")
    C = logits.shape[1]
    if not np.all((t == np.round(t)) & (t >= 0) & (t < C)):
        raise ValueError("softmax_ce_with_logits: targets must be integer class ids in [0, C)")
    t = t.astype(np.int64)
    x = logits.data
    m = x.max(axis=1, keepdims=True)
    lse = np.log(np.exp(x - m).sum(axis=1, keepdims=True)) + m
    logp = x - lse
    onehot = np.zeros_like(x)
    np.put_along_axis(onehot, t[:, None], 1.0, axis=1)
    nll = -(logp * onehot).sum(axis=1)
    if reduction == "mean":
        scale = 1.0 / nll.size
    elif reduction == "sum":
        scale = 1.0 / nll.shape[0]
    else:
        raise ValueError(f"unknown reduction {reduction!r}")
    out = nll.sum() * scale

    def backward(g):
        return ((np.exp(logp) - onehot) * (g * scale),)

    return make_result(np.asarray(out), (logits,), backward, "softmax_ce")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: batch dimensions incompatible, {a.shape} @ {b.shape}") from None

    def backward(g):
        ga = unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return make_result(out, (a, b), backward, "matmul")


def _tril_solve(L: np.ndarray, B: np.ndarray) -> np.ndarray:
    return np.linalg.solve(L, B)


def _phi(X: np.ndarray) -> np.ndarray:
    out = np.tril(X)
    d = np.einsum("...ii->...i", out)
    d *= 0.5
    return out


def cholesky(a) -> Tensor:
    """Lower Cholesky factor of a symmetric positive definite (batched) matrix."""
    a = as_tensor(a)
    if a.ndim < 2 or a.shape[-1] != a.shape[-2]:
        raise ShapeError(f"cholesky: expected square matrices, got {a.shape}")
    try:
        L = np.linalg.cholesky(a.data)
    except np.linalg.LinAlgError:
        diag = np.einsum("...ii->...i", a.data)
        bad = np.unravel_index(np.argmin(diag), diag.shape)
        raise np.linalg.LinAlgError(
            f"cholesky: matrix not positive definite (smallest diagonal entry {diag[bad]:.3e} at {bad})"
        ) from None

    def backward(g):
        # A_bar = L^-T phi(L^T L_bar) L^-1, symmetrised
        P = _phi(np.swapaxes(L, -1, -2) @ np.tril(g))
        Linv = np.linalg.inv(L)
        S = np.swapaxes(Linv, -1, -2) @ P @ Linv
        return (0.5 * (S + np.swapaxes(S, -1, -2)),)

    return make_result(L, (a,), backward, "cholesky")


def solve_tril(L, B) -> Tensor:
    """Solve ``L X = B`` for lower-triangular ``L`` (batched, B is ...×z×k).

    Entries above the diagonal of ``L`` are ignored.
    """
    L, B = as_tensor(L), as_tensor(B)
    if L.shape[-1] != L.shape[-2] or B.shape[-2] != L.shape[-1]:
        raise ShapeError(f"solve_tril: L {L.shape} incompatible with B {B.shape}")
    shape = np.broadcast_shapes(L.shape[:-2], B.shape[:-2])
    Lb = np.broadcast_to(np.tril(L.data), shape + L.shape[-2:])
    Bb = np.broadcast_to(B.data, shape + B.shape[-2:])
    X = _tril_solve(Lb, Bb)

    def backward(g):
        gB = _tril_solve(np.swapaxes(Lb, -1, -2), g)
        gL = -np.tril(gB @ np.swapaxes(X, -1, -2))
        return unbroadcast(gL, L.shape), unbroadcast(gB, B.shape)

    return make_result(X, (L, B), backward, "solve_tril")


def diagonal(a) -> Tensor:
    """Main diagonal over the last two axes."""
    a = as_tensor(a)
    n = a.shape[-1]
    out = np.einsum("...ii->...i", a.data).copy()

    def backward(g):
        full = np.zeros(a.shape, dtype=DTYPE)
        idx = np.arange(n)
        full[..., idx, idx] = g
        return (full,)

    return make_result(out, (a,), backward, "diagonal")


def diag_embed(v) -> Tensor:
    v = as_tensor(v)
    n = v.shape[-1]
    return mul(reshape(v, v.shape + (1,)), np.eye(n))


# ---------------------------------------------------------------------------
# convolutional building blocks
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """B×C×H×W -> (B·H·W)×(k·k·C) patches of the zero-padded input, tap-major."""
    B, C, H, W = x.shape
    p = k // 2
    xh = x.transpose(0, 2, 3, 1)
    if p == 0:
        return xh.reshape(B * H * W, C)
    xp = np.zeros((B, H + 2 * p, W + 2 * p, C), dtype=DTYPE)
    xp[:, p:p + H, p:p + W] = xh
    cols = np.empty((B, H, W, k, k, C), dtype=DTYPE)
    for i in range(k):
        for j in range(k):
            cols[:, :, :, i, j] = xp[:, i:i + H, j:j + W]
    return cols.reshape(B * H * W, k * k * C)


def conv2d(x, w, bias=None) -> Tensor:
    """Stride-1 'same' cross-correlation with an odd square kernel.

    x: B×C×H×W, w: F×C×k×k, bias: F. Zero padding of (k-1)/2.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-d input and weight, got {x.shape} and {w.shape}")
    B, C, H, W = x.shape
    F, Cw, k, k2 = w.shape
    if Cw != C:
        raise ShapeError(f"conv2d: input has {C} channels but weight expects {Cw}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be odd and square, got {k}x{k2}")
    cols = _im2col(x.data, k)
    # weight as (k·k·C)×F, matching the tap-major patch layout
    wmat = w.data.transpose(2, 3, 1, 0).reshape(k * k * C, F)
    out = cols @ wmat
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (F,):
            raise ShapeError(f"conv2d: bias shape {bias.shape} != ({F},)")
        out += bias.data
    out = out.reshape(B, H, W, F).transpose(0, 3, 1, 2)
    inputs = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gh = g.transpose(0, 2, 3, 1)
        gm = gh.reshape(B * H * W, F)
        gw = None
        if w.requires_grad:
            gw = (cols.T @ gm).reshape(k, k, C, F).transpose(3, 2, 0, 1)
        gx = None
        if x.requires_grad:
            # full correlation with the spatially flipped, channel-swapped kernel
            wflip = w.data[:, :, ::-1, ::-1].transpose(2, 3, 0, 1).reshape(k * k * F, C)
            gx = (_im2col(g, k) @ wflip).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        grads = [gx, gw]
        if bias is not None:
            grads.append(gm.sum(axis=0))
        return tuple(grads)

    return make_result(out, inputs, backward, "conv2d")


def avg_pool2(x) -> Tensor:
    x = as_tensor(x)
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2: spatial dims must be even, got {H}x{W}")
    out = x.data.reshape(B, C, H // 2, 2, W // 2, 2).mean(axis=(3, 5))

    def backward(g):
        return (np.repeat(np.repeat(g * 0.25, 2, axis=2), 2, axis=3),)

    return make_result(out, (x,), backward, "avg_pool2")


def _upsample_matrix(n: int) -> np.ndarray:
    # bilinear x2, align_corners=False: src = (dst + 0.5) / 2 - 0.5, edge-clamped
    U = np.zeros((2 * n, n), dtype=DTYPE)
    for i in range(2 * n):
        src = (i + 0.5) / 2.0 - 0.5
        lo = math.floor(src)
        frac = src - lo
        lo_c = min(max(lo, 0), n - 1)
        hi_c = min(max(lo + 1, 0), n - 1)
        U[i, lo_c] += 1.0 - frac
        U[i, hi_c] += frac
    return U


_UPSAMPLE_CACHE: dict[int, np.ndarray] = {}


def _upmat(n: int) -> np.ndarray:
    if n not in _UPSAMPLE_CACHE:
        _UPSAMPLE_CACHE[n] = _upsample_matrix(n)
    return _UPSAMPLE_CACHE[n]


def upsample_bilinear2(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError(f"upsample_bilinear2: expected B×C×H×W, got {x.shape}")
    Uh, Uw = _upmat(x.shape[2]), _upmat(x.shape[3])
    out = Uh @ x.data @ Uw.T

    def backward(g):
        return (Uh.T @ g @ Uw,)

    return make_result(out, (x,), backward, "upsample_bilinear2")


def batchnorm2d(x, scale, shift, running_mean: np.ndarray, running_var: np.ndarray,
                training: bool, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel batch normalisation of B×C×H×W input.

    In training mode the running statistics are updated in place with an
    exponential moving average (unbiased variance); in eval mode they are used
    for normalisation and the op is an affine map of ``x``.
    """
    x, scale, shift = as_tensor(x), as_tensor(scale), as_tensor(shift)
    C = x.shape[1]
    if scale.shape != (C,) or shift.shape != (C,):
        raise ShapeError(f"batchnorm2d: affine params must have shape ({C},)")
    axes = (0, 2, 3)
    if training:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        n = x.data.size // C
        running_mean *= 1.0 - momentum
        running_mean += momentum * mu
        running_var *= 1.0 - momentum
        running_var += momentum * var * (n / max(n - 1, 1))
    else:
        mu, var = running_mean.copy(), running_var.copy()
        n = x.data.size // C
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu[None, :, None, None]) * inv[None, :, None, None]
    sc = scale.data[None, :, None, None]
    out = xhat * sc + shift.data[None, :, None, None]

    def backward(g):
        gscale = (g * xhat).sum(axis=axes)
        gshift = g.sum(axis=axes)
        dxhat = g * sc
        if training:
            s1 = dxhat.sum(axis=axes, keepdims=True)
            s2 = (dxhat * xhat).sum(axis=axes, keepdims=True)
            gx = (inv[None, :, None, None] / n) * (n * dxhat - s1 - xhat * s2)
        else:
            gx = dxhat * inv[None, :, None, None]
        return gx, gscale, gshift

    return make_result(out, (x, scale, shift), backward, "batchnorm2d")


def dropout(x, rate: float, rng: np.random.Generator | None, active: bool) -> Tensor:
    """Inverted dropout; identity when ``active`` is False or ``rate`` is 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    x = as_tensor(x)
    if not active or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout: an active dropout needs an rng")
    keep = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return mul(x, keep)
