"""Reusable layers: attention, feed-forward, positional encoding, embeddings."""
from __future__ import annotations

import math
from typing import Iterator, Optional

import numpy as np

from . import functional as fn
from .errors import CapacityError, ConfigError, ShapeError
from .tensor import Tensor, masked_fill, matmul, reshape, transpose

INIT_STD = 0.02


class Parameter(Tensor):
    def __init__(self, data, requires_grad: bool = True):
        super().__init__(np.asarray(data), requires_grad=requires_grad)


class Buffer:
    """Non-trainable state saved with the module (never seen by optimizers)."""

    def __init__(self, data):
        self.data = np.asarray(data)


class Module:
    """Minimal container that discovers parameters through attributes."""

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Parameter):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_parameters(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{full}.{i}.")

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, Buffer]]:
        for name, value in vars(self).items():
            if name.startswith("_"):
                continue
            full = f"{prefix}{name}"
            if isinstance(value, Buffer):
                yield full, value
            elif isinstance(value, Module):
                yield from value.named_buffers(full + ".")
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield from item.named_buffers(f"{full}.{i}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def set_trainable(self, flag: bool) -> "Module":
        for p in self.parameters():
            p.requires_grad = flag
        return self

    def to(self, dtype) -> "Module":
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for _, b in self.named_buffers():
            b.data = b.data.astype(dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: p.data for name, p in self.named_parameters()}
        state.update((name, b.data) for name, b in self.named_buffers())
        return state

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = {**dict(self.named_parameters()), **dict(self.named_buffers())}
        missing = sorted(set(own) - set(state))
        unexpected = sorted(set(state) - set(own))
        if missing or unexpected:
            raise ConfigError(f"state mismatch: missing {missing}, unexpected {unexpected}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.data.shape:
                raise ConfigError(f"parameter {name}: shape {arr.shape} != expected {p.data.shape}")
            p.data = arr.astype(p.data.dtype, copy=True)


def normal(rng: np.random.Generator, shape, std: Optional[float] = INIT_STD) -> np.ndarray:
    """Gaussian init; ``std=None`` scales by 1/sqrt(fan_in) (the leading extent)."""
    if std is None:
        std = 1.0 / math.sqrt(shape[0])
    return (rng.standard_normal(shape) * std).astype(np.float32)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator, std: Optional[float] = INIT_STD, bias: bool = True):
        self.weight = Parameter(normal(rng, (d_in, d_out), std))
        self.bias = Parameter(np.zeros(d_out, np.float32)) if bias else None

    def forward(self, x: Tensor) -> Tensor:
        if x.shape[-1] != self.weight.shape[0]:
            raise ShapeError(f"Linear expects last extent {self.weight.shape[0]}, got {x.shape}")
        return fn.linear(x, self.weight, self.bias)


class LayerNorm(Module):
    def __init__(self, d: int, eps: float = 1e-5):
        self.gamma = Parameter(np.ones(d, np.float32))
        self.beta = Parameter(np.zeros(d, np.float32))
        self._eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return fn.layer_norm(x, self.gamma, self.beta, self._eps)


class CausalMask:
    """Lower-triangular boolean matrix; ``True`` means the position is visible."""

    def __init__(self, length: int):
        self.length = length
        self.matrix = np.tril(np.ones((length, length), dtype=bool))

    def __repr__(self) -> str:
        return f"CausalMask({self.length})"


class MultiHeadAttention(Module):
    """Scaled dot-product attention with ``n_heads`` heads.

    ``kv_dim`` lets keys/values come from a space of different width than the
    queries (the projection maps them into ``d_model``).
    """

    def __init__(
        self,
        d_model: int,
        n_heads: int,
        rng: np.random.Generator,
        kv_dim: Optional[int] = None,
        std: Optional[float] = INIT_STD,
    ):
        if n_heads <= 0 or d_model % n_heads:
            raise ConfigError(f"d_model={d_model} is not divisible by n_heads={n_heads}")
        kv_dim = kv_dim or d_model
        self.n_heads = n_heads
        self.d_model = d_model
        self.head_dim = d_model // n_heads
        self.q_proj = Linear(d_model, d_model, rng, std)
        self.k_proj = Linear(kv_dim, d_model, rng, std)
        self.v_proj = Linear(kv_dim, d_model, rng, std)
        self.o_proj = Linear(d_model, d_model, rng, std)

    def _split(self, x: Tensor) -> Tensor:
        b, length, _ = x.shape
        return transpose(reshape(x, (b, length, self.n_heads, self.head_dim)), (0, 2, 1, 3))

    def forward(self, query: Tensor, kv: Tensor, mask: Optional[CausalMask] = None, return_weights: bool = False):
        if query.ndim != 3 or kv.ndim != 3:
            raise ShapeError(f"attention expects [B, L, D] inputs, got {query.shape} and {kv.shape}")
        if query.shape[-1] != self.d_model:
            raise ShapeError(f"query width {query.shape[-1]} != d_model {self.d_model}")
        if query.shape[0] != kv.shape[0]:
            raise ShapeError(f"batch extents differ: {query.shape} vs {kv.shape}")
        b, lq, _ = query.shape
        lk = kv.shape[1]
        q = self._split(self.q_proj(query))
        k = self._split(self.k_proj(kv))
        v = self._split(self.v_proj(kv))
        scores = matmul(q, transpose(k, (0, 1, 3, 2))) * (1.0 / math.sqrt(self.head_dim))
        if mask is not None:
            if not (lq == lk == mask.length):
                raise ShapeError(f"mask of length {mask.length} used with Lq={lq}, Lk={lk}")
            scores = masked_fill(scores, ~mask.matrix, -np.inf)
        weights = fn.softmax(scores, axis=-1)
        ctx = matmul(weights, v)
        ctx = reshape(transpose(ctx, (0, 2, 1, 3)), (b, lq, self.d_model))
        out = self.o_proj(ctx)
        return (out, weights) if return_weights else out


class FeedForward(Module):
    def __init__(self, d_model: int, rng: np.random.Generator, expansion: int = 4, std: Optional[float] = INIT_STD):
        self.fc1 = Linear(d_model, expansion * d_model, rng, std)
        self.fc2 = Linear(expansion * d_model, d_model, rng, std)

    def forward(self, x: Tensor) -> Tensor:
        return self.fc2(fn.gelu(self.fc1(x)))


def sinusoid_table(max_len: int, d_model: int) -> np.ndarray:
    pos = np.arange(max_len, dtype=np.float64)[:, None]
    i = np.arange(0, d_model, 2, dtype=np.float64)
    angle = pos / np.power(10000.0, i / d_model)
    table = np.zeros((max_len, d_model))
    table[:, 0::2] = np.sin(angle)
    table[:, 1::2] = np.cos(angle[:, : d_model // 2])
    return table


class PositionalEncoding:
    """Fixed sinusoidal table; holds no trainable state."""

    def __init__(self, max_len: int, d_model: int):
        self.max_len = max_len
        self.d_model = d_model
        self.table = sinusoid_table(max_len, d_model)

    def __call__(self, x: Tensor) -> Tensor:
        length = x.shape[-2]
        if length > self.max_len:
            raise CapacityError(f"sequence length {length} exceeds max_len {self.max_len}")
        if x.shape[-1] != self.d_model:
            raise ShapeError(f"positional encoding width {self.d_model} vs input {x.shape}")
        return x + Tensor(self.table[:length].astype(x.dtype))


class TokenEmbedding(Module):
    """Embedding table whose transpose also serves as the output head."""

    def __init__(self, vocab_size: int, d_model: int, rng: np.random.Generator, std: float = 1.0):
        self.table = Parameter(normal(rng, (vocab_size, d_model), std))

    @property
    def vocab_size(self) -> int:
        return self.table.shape[0]

    def lookup(self, ids) -> Tensor:
        return fn.embedding(self.table, ids)

    def logits(self, h: Tensor) -> Tensor:
        return matmul(h, transpose(self.table))

    forward = lookup
