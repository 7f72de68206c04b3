"""Fused differentiable kernels built on :mod:`dualvision.tensor`."""
from __future__ import annotations

import math
from typing import Optional

import numpy as np

from .errors import ContractError, NumericError, ShapeError
from .tensor import Tensor, _make, _unbroadcast, matmul

_GELU_C = math.sqrt(2.0 / math.pi)


def _check_finite(x: np.ndarray, op: str) -> None:
    if not np.all(np.isfinite(x)):
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    """Max-subtracted softmax.

    ``-inf`` entries are allowed (masked logits) as long as every row keeps at
    least one finite value; NaN or ``+inf`` raise :class:`NumericError`.
    """
    data = x.data
    if np.isnan(data).any() or np.isposinf(data).any():
        raise NumericError("softmax: non-finite input")
    shifted = data - data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)
    if np.isnan(out).any():
        raise NumericError("softmax: a row has no finite entry")

    def vjp(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _make(out, (x,), vjp, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    data = x.data
    _check_finite(data, "log_softmax")
    shifted = data - data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    probs = np.exp(out)

    def vjp(g):
        return (g - probs * g.sum(axis=axis, keepdims=True),)

    return _make(out, (x,), vjp, "log_softmax")


def gelu(x: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    d = x.data
    inner = _GELU_C * (d + 0.044715 * d**3)
    t = np.tanh(inner)
    out = 0.5 * d * (1.0 + t)

    def vjp(g):
        dinner = _GELU_C * (1.0 + 3 * 0.044715 * d * d)
        return (g * (0.5 * (1.0 + t) + 0.5 * d * (1.0 - t * t) * dinner),)

    return _make(out, (x,), vjp, "gelu")


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift."""
    if gamma.shape != (x.shape[-1],) or beta.shape != (x.shape[-1],):
        raise ShapeError(f"layer_norm: affine params {gamma.shape}/{beta.shape} vs input {x.shape}")
    d = x.data
    mu = d.mean(axis=-1, keepdims=True)
    xc = d - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def vjp(g):
        dxhat = g * gamma.data
        dx = rstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(d.ndim - 1))
        return dx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _make(out, (x, gamma, beta), vjp, "layer_norm")


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` stored as [in, out]."""
    y = matmul(x, weight)
    return y + bias if bias is not None else y


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"embedding ids must be integers, got {ids.dtype}")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise ShapeError(f"embedding id out of range [0, {table.shape[0]})")

    def vjp(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids, g)
        return (full,)

    return _make(table.data[ids], (table,), vjp, "embedding")


def cross_entropy(logits: Tensor, targets, ignore_index: Optional[int] = None) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits``.

    Positions whose target equals ``ignore_index`` are excluded from both the
    sum and the count.
    """
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross_entropy: logits {logits.shape} vs targets {targets.shape}")
    keep = np.ones(targets.shape, dtype=bool) if ignore_index is None else targets != ignore_index
    count = int(keep.sum())
    if count == 0:
        raise ContractError("cross_entropy: every target position is ignored")
    data = logits.data
    _check_finite(data, "cross_entropy")
    shifted = data - data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    logp = shifted - lse
    safe = np.where(keep, targets, 0)
    picked = np.take_along_axis(logp, safe[..., None], axis=-1)[..., 0]
    loss = -(picked * keep).sum() / count

    def vjp(g):
        grad = np.exp(logp)
        np.put_along_axis(grad, safe[..., None], np.take_along_axis(grad, safe[..., None], -1) - 1.0, -1)
        grad = grad * (keep[..., None] / count)
        return (g * grad,)

    return _make(np.asarray(loss, dtype=data.dtype), (logits,), vjp, "cross_entropy")


def conv1d_time(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """'Same' 1-D convolution along axis 1 with edge (replicate) padding.

    Shapes: ``x`` [N, L, C_in], ``weight`` [K, C_in, C_out] with odd K,
    ``bias`` [C_out].  Output [N, L, C_out].
    """
    if x.ndim != 3 or weight.ndim != 3:
        raise ShapeError(f"conv1d_time expects 3-D input and weight, got {x.shape}, {weight.shape}")
    k, c_in, c_out = weight.shape
    if k % 2 == 0:
        raise ShapeError(f"conv1d_time needs an odd kernel, got {k}")
    if x.shape[2] != c_in:
        raise ShapeError(f"conv1d_time: input channels {x.shape} vs weight {weight.shape}")
    n, length, _ = x.shape
    pad = k // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)), mode="edge")
    out = np.zeros((n, length, c_out), dtype=np.result_type(x.dtype, weight.dtype))
    for j in range(k):
        out += xp[:, j : j + length, :] @ weight.data[j]
    inputs = (x, weight)
    if bias is not None:
        out += bias.data
        inputs = (x, weight, bias)

    def vjp(g):
        gw = np.empty_like(weight.data)
        gxp = np.zeros_like(xp)
        g2 = g.reshape(-1, c_out)
        for j in range(k):
            window = xp[:, j : j + length, :]
            gw[j] = window.reshape(-1, c_in).T @ g2
            gxp[:, j : j + length, :] += g @ weight.data[j].T
        gx = gxp[:, pad : pad + length, :].copy()
        if pad:
            gx[:, 0, :] += gxp[:, :pad, :].sum(axis=1)
            gx[:, -1, :] += gxp[:, pad + length :, :].sum(axis=1)
        grads = (gx, gw)
        if bias is not None:
            grads = grads + (g.sum(axis=(0, 1)),)
        return grads

    return _make(out, inputs, vjp, "conv1d_time")


def broadcast_to(x: Tensor, shape: tuple) -> Tensor:
    try:
        out = np.broadcast_to(x.data, shape)
    except ValueError:
        raise ShapeError(f"cannot broadcast {x.shape} to {tuple(shape)}") from None
    return _make(out.copy(), (x,), lambda g: (_unbroadcast(g, x.shape),), "broadcast_to")
