"""Differentiable operations on :class:`Tensor`.

Broadcasting is limited to two cases: a scalar against any tensor, and a
1-D per-channel vector of length ``shape[1]`` against a tensor of rank >= 2.
Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from prunedistill.autodiff.tensor import Tensor, as_tensor
from prunedistill.errors import DomainError, ParameterError, ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


def _channel_view(vec: np.ndarray, ndim: int) -> np.ndarray:
    return vec.reshape((1, -1) + (1,) * (ndim - 2))


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a full-shape gradient back down to a scalar or per-channel operand."""
    if g.shape == shape:
        return g
    if int(np.prod(shape)) == 1:
        return np.asarray(g.sum()).reshape(shape)
    axes = (0,) + tuple(range(2, g.ndim))
    return g.sum(axis=axes)


def _broadcast_pair(a: Tensor, b: Tensor) -> tuple[np.ndarray, np.ndarray]:
    if a.shape == b.shape:
        return a.data, b.data
    if b.size == 1 and b.ndim <= 1:
        return a.data, b.data.reshape(())
    if a.size == 1 and a.ndim <= 1:
        return a.data.reshape(()), b.data
    if b.ndim == 1 and a.ndim >= 2 and a.shape[1] == b.shape[0]:
        return a.data, _channel_view(b.data, a.ndim)
    if a.ndim == 1 and b.ndim >= 2 and b.shape[1] == a.shape[0]:
        return _channel_view(a.data, b.ndim), b.data
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _broadcast_pair(a, b)
    out = x + y

    def backward(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._from_op(out, "add", (a, b), backward)


def sub(a, b) -> Tensor:
    return add(a, neg(as_tensor(b)))


def neg(a: Tensor) -> Tensor:
    return Tensor._from_op(-a.data, "neg", (a,), lambda g: (-g,))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    x, y = _broadcast_pair(a, b)
    out = x * y

    def backward(g):
        return _reduce_to(g * y, a.shape), _reduce_to(g * x, b.shape)

    return Tensor._from_op(out, "mul", (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant without recording the constant."""
    c = float(c)
    return Tensor._from_op(a.data * c, "scale", (a,), lambda g: (g * c,))


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return Tensor._from_op(np.where(keep, a.data, 0.0), "relu", (a,), lambda g: (g * keep,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor._from_op(out, "exp", (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of a non-positive value")
    x = a.data
    return Tensor._from_op(np.log(x), "log", (a,), lambda g: (g / x,))


def clamp_min(a: Tensor, floor: float) -> Tensor:
    keep = a.data >= floor
    return Tensor._from_op(np.maximum(a.data, floor), "clamp_min", (a,), lambda g: (g * keep,))


def sum(a: Tensor, axis=None) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = a.shape
    out = np.asarray(a.data.sum(axis=axis))

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return Tensor._from_op(out, "sum", (a,), backward)


def mean(a: Tensor, axis=None) -> Tensor:
    count = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis), 1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return Tensor._from_op(out, "reshape", (a,), lambda g: (g.reshape(old),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} and {b.shape} are incompatible")
    x, y = a.data, b.data

    def backward(g):
        return g @ y.T, x.T @ g

    return Tensor._from_op(x @ y, "matmul", (a, b), backward)


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight.T + bias`` with ``weight`` stored as (out, in)."""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear: input {x.shape} vs weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd.T
    if bias is not None:
        if bias.shape != (wd.shape[0],):
            raise ShapeError(f"linear: bias {bias.shape} vs weight {weight.shape}")
        out = out + bias.data

    def backward(g):
        grads = [g @ wd, g.T @ xd]
        if bias is not None:
            grads.append(g.sum(axis=0))
        return grads

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._from_op(out, "linear", inputs, backward)


def softmax_with_temperature(logits: Tensor, tau: float) -> Tensor:
    """Row-wise softmax of ``logits / tau`` for an (N, M) tensor."""
    tau = _check_tau(tau)
    if logits.ndim != 2:
        raise ShapeError(f"softmax expects (N, M) logits, got {logits.shape}")
    z = logits.data / tau
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * p).sum(axis=1, keepdims=True)
        return (p * (g - inner) / tau,)

    return Tensor._from_op(p, "softmax", (logits,), backward)


def log_softmax_with_temperature(logits: Tensor, tau: float) -> Tensor:
    tau = _check_tau(tau)
    if logits.ndim != 2:
        raise ShapeError(f"log_softmax expects (N, M) logits, got {logits.shape}")
    z = logits.data / tau
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def backward(g):
        return ((g - p * g.sum(axis=1, keepdims=True)) / tau,)

    return Tensor._from_op(out, "log_softmax", (logits,), backward)


def _check_tau(tau: float) -> float:
    tau = float(tau)
    if not tau > 0 or not np.isfinite(tau):
        raise ParameterError(f"temperature must be positive and finite, got {tau}")
    return tau


def _pad(x: np.ndarray, padding: int) -> np.ndarray:
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def conv_output_size(size: int, k: int, stride: int, padding: int) -> int:
    span = size + 2 * padding - k
    if span < 0 or span % stride != 0:
        raise ShapeError(
            f"conv output size is not exact: ({size} + 2*{padding} - {k}) / {stride}"
        )
    return span // stride + 1


def conv2d(x: Tensor, kernel: Tensor, stride: int = 1, padding: int = 0) -> Tensor:
    """Direct cross-correlation of an NCHW input with an FCkk kernel.

    Internally lowered to one matrix product over unfolded patches.
    """
    if x.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d expects 4-D input and kernel, got {x.shape} and {kernel.shape}")
    if stride < 1 or padding < 0:
        raise ParameterError(f"conv2d needs stride >= 1 and padding >= 0, got {stride}, {padding}")
    n, c, h, w = x.shape
    f, kc, kh, kw = kernel.shape
    if kc != c:
        raise ShapeError(f"kernel has {kc} input channels but input has {c}")
    if kh != kw:
        raise ShapeError(f"only square kernels are supported, got {kh}x{kw}")
    k = kh
    ho = conv_output_size(h, k, stride, padding)
    wo = conv_output_size(w, k, stride, padding)

    xp = _pad(x.data, padding)
    if k == 1:
        cols = xp[:, :, ::stride, ::stride][:, :, :ho, :wo].transpose(0, 2, 3, 1).reshape(n * ho * wo, c)
    else:
        win = sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
        # (n, c, ho, wo, k, k) -> (n, ho, wo, c, k, k)
        cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    wmat = kernel.data.reshape(f, c * k * k)
    out = (cols @ wmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        gk = (gmat.T @ cols).reshape(kernel.shape) if kernel.requires_grad else None
        if not x.requires_grad:
            return None, gk
        if stride == 1 and padding <= k - 1:
            return _conv_input_grad_stride1(g, kernel.data, padding), gk
        gcols = (gmat @ wmat).reshape(n, ho, wo, c, k, k)
        # scatter-add in NHWC order; measurably faster than NCHW slices
        gxp = np.zeros((n, xp.shape[2], xp.shape[3], c))
        for i in range(k):
            for j in range(k):
                gxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += gcols[:, :, :, :, i, j]
        gx = gxp.transpose(0, 3, 1, 2)
        if padding:
            gx = gx[:, :, padding:padding + h, padding:padding + w]
        return np.ascontiguousarray(gx), gk

    return Tensor._from_op(np.ascontiguousarray(out), "conv2d", (x, kernel), backward)


def _conv_input_grad_stride1(g: np.ndarray, kernel: np.ndarray, padding: int) -> np.ndarray:
    """Input gradient of a stride-1 conv as a correlation with the flipped kernel."""
    n, f, ho, wo = g.shape
    _, c, k, _ = kernel.shape
    q = k - 1 - padding
    gh = g.transpose(0, 2, 3, 1)
    if q:
        gh = np.pad(gh, ((0, 0), (q, q), (q, q), (0, 0)))
    h, w = gh.shape[1] - k + 1, gh.shape[2] - k + 1
    cols = sliding_window_view(gh, (k, k), axis=(1, 2)).reshape(n * h * w, f * k * k)
    wflip = kernel[:, :, ::-1, ::-1].transpose(0, 2, 3, 1).reshape(f * k * k, c)
    return np.ascontiguousarray((cols @ wflip).reshape(n, h, w, c).transpose(0, 3, 1, 2))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ShapeError(f"global_avg_pool expects NCHW, got {x.shape}")
    n, c, h, w = x.shape
    area = h * w

    def backward(g):
        return (np.broadcast_to(g[:, :, None, None] / area, x.shape).copy(),)

    return Tensor._from_op(x.data.mean(axis=(2, 3)), "global_avg_pool", (x,), backward)


def batch_norm(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    train: bool,
    momentum: float = BN_MOMENTUM,
    eps: float = BN_EPS,
) -> Tensor:
    """Per-channel normalisation over every axis except axis 1.

    In train mode batch statistics are used and ``running_mean`` /
    ``running_var`` are updated in place (unbiased variance for the running
    estimate). In eval mode the running statistics are used.
    """
    if x.ndim not in (2, 4):
        raise ShapeError(f"batch_norm expects (N, C) or (N, C, H, W), got {x.shape}")
    c = x.shape[1]
    for name, arr in (("gamma", gamma.data), ("beta", beta.data), ("running_mean", running_mean), ("running_var", running_var)):
        if arr.shape != (c,):
            raise ShapeError(f"batch_norm {name} has shape {arr.shape}, expected ({c},)")
    axes = (0,) if x.ndim == 2 else (0, 2, 3)
    count = x.size // c
    gv = _channel_view(gamma.data, x.ndim)
    bv = _channel_view(beta.data, x.ndim)

    if train:
        mu = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        if count > 1:
            running_mean *= 1.0 - momentum
            running_mean += momentum * mu
            running_var *= 1.0 - momentum
            running_var += momentum * var * (count / (count - 1))
    else:
        mu = running_mean.copy()
        var = running_var.copy()
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - _channel_view(mu, x.ndim)) * _channel_view(inv_std, x.ndim)
    out = xhat * gv + bv

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        gxhat = g * gv
        istd = _channel_view(inv_std, x.ndim)
        if train:
            gx = istd * (
                gxhat
                - _channel_view(gxhat.mean(axis=axes), x.ndim)
                - xhat * _channel_view((gxhat * xhat).mean(axis=axes), x.ndim)
            )
        else:
            gx = gxhat * istd
        return gx, ggamma, gbeta

    return Tensor._from_op(out, "batch_norm", (x, gamma, beta), backward)
