"""Frame-level and scene-level visual branches.

Both branches consume subsampled clips ``[B, T, C, H, W]``.  The frame branch
turns each frame into one embedding, summarises it with learnable queries,
tags the per-frame query outputs with frame positions and re-queries the
whole clip; the scene branch runs a small spatio-temporal side block over
patch tokens and average-pools everything into a single vector.

Internal weights of both branches stand in for frozen pre-trained encoders
and are drawn with fan-in scaling so that random features keep their signal.
Only the two output projections are meant to be trained by default.
"""
from __future__ import annotations


import numpy as np

from . import functional as fn
from .config import ModelConfig
from .errors import ConfigError, ContractError, ShapeError
from .nn import (
    FeedForward,
    LayerNorm,
    Linear,
    Module,
    MultiHeadAttention,
    Parameter,
    normal,
    sinusoid_table,
)
from .tensor import Tensor, concat, reshape, roll, transpose


def subsample_indices(n_frames: int, t: int) -> np.ndarray:
    """0-based indices of the frames kept by uniform subsampling.

    Frame ``k`` (1-based, k = 1..t) is ``ceil(k * n_frames / t)``; integer
    arithmetic avoids float rounding at exact multiples.
    """
    if t < 1 or t > n_frames:
        raise ContractError(f"cannot subsample {t} frames from a clip of {n_frames}")
    k = np.arange(1, t + 1)
    return -((-k * n_frames) // t) - 1


def subsample(frames: np.ndarray, t: int) -> np.ndarray:
    """Select ``t`` frames from ``[N, C, H, W]`` raw pixels."""
    return frames[subsample_indices(frames.shape[0], t)]


def patchify(x: Tensor, patch: int) -> Tensor:
    """[B, T, C, H, W] -> [B, T, P, C*patch*patch] non-overlapping patches."""
    b, t, c, h, w = x.shape
    if h % patch or w % patch:
        raise ConfigError(f"frame size {h}x{w} is not divisible by patch size {patch}")
    gh, gw = h // patch, w // patch
    y = reshape(x, (b, t, c, gh, patch, gw, patch))
    y = transpose(y, (0, 1, 3, 5, 2, 4, 6))
    return reshape(y, (b, t, gh * gw, c * patch * patch))


class QFormerBlock(Module):
    """Learnable queries cross-attending to a key/value sequence, then an FFN."""

    def __init__(self, n_queries: int, d_query: int, kv_dim: int, n_heads: int, rng: np.random.Generator, expansion: int = 4):
        self.queries = Parameter(normal(rng, (n_queries, d_query)))
        # internals of the frozen stand-in encoders use fan-in scaling (std=None)
        self.attn = MultiHeadAttention(d_query, n_heads, rng, kv_dim=kv_dim, std=None)
        self.norm1 = LayerNorm(d_query)
        self.ffn = FeedForward(d_query, rng, expansion, std=None)
        self.norm2 = LayerNorm(d_query)

    def forward(self, kv: Tensor, return_weights: bool = False):
        b = kv.shape[0]
        q = fn.broadcast_to(self.queries, (b,) + self.queries.shape)
        attended, weights = self.attn(q, kv, return_weights=True)
        x = self.norm1(q + attended)
        x = self.norm2(x + self.ffn(x))
        return (x, weights) if return_weights else x


class FrameBranch(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.encoder = Linear(cfg.patch_dim, cfg.d_vision, rng, std=None)
        self.frame_qformer = QFormerBlock(cfg.n_queries, cfg.d_query, cfg.d_vision, cfg.n_heads, rng, cfg.ffn_expansion)
        if cfg.learned_frame_positions:
            self.frame_positions = Parameter(normal(rng, (cfg.n_frames, cfg.d_query)))
        else:
            self.frame_positions = Parameter(
                sinusoid_table(cfg.n_frames, cfg.d_query).astype(np.float32), requires_grad=False
            )
        self.video_qformer = QFormerBlock(cfg.n_queries, cfg.d_query, cfg.d_query, cfg.n_heads, rng, cfg.ffn_expansion)
        self.projection = Linear(cfg.d_query, cfg.d_model, rng, std=cfg.init_std)

    def encode_frames(self, x: Tensor) -> Tensor:
        """[B, T, C, H, W] -> [B, T, D_v].

        Each frame is centred per channel first, so anything constant over a
        frame (a global colour wash) is invisible to this branch.
        """
        x = x - x.mean(axis=(3, 4), keepdims=True)
        patches = patchify(x, self.cfg.patch)
        return fn.gelu(self.encoder(patches)).mean(axis=2)

    def frame_qformer_forward(self, embeddings: Tensor, return_weights: bool = False):
        """Per-frame query summaries: [B, T, D_v] -> [B, T, N_q, D_q]."""
        b, t, d = embeddings.shape
        kv = reshape(embeddings, (b * t, 1, d))
        out, weights = self.frame_qformer(kv, return_weights=True)
        out = reshape(out, (b, t) + out.shape[1:])
        return (out, weights) if return_weights else out

    def add_frame_positions(self, q: Tensor) -> Tensor:
        """Add the frame-position row t to every query of frame t."""
        t = q.shape[-3]
        if self.frame_positions.shape[0] != t:
            raise ShapeError(f"position table has {self.frame_positions.shape[0]} rows, clip has {t} frames")
        return q + reshape(self.frame_positions, (t, 1, q.shape[-1]))

    def video_qformer_forward(self, q: Tensor) -> Tensor:
        """[B, T, N_q, D_q] -> [B, N_q, D_q] by re-querying all T*N_q tokens."""
        b, t, n, d = q.shape
        return self.video_qformer(reshape(q, (b, t * n, d)))

    def features(self, x: Tensor) -> Tensor:
        """Everything before the projection: [B, T, C, H, W] -> [B, N_q, D_q]."""
        q = self.frame_qformer_forward(self.encode_frames(x))
        return self.video_qformer_forward(self.add_frame_positions(q))

    def project(self, q_video: Tensor) -> Tensor:
        return self.projection(q_video)

    def forward(self, x: Tensor) -> Tensor:
        return self.project(self.features(x))


class SceneSideBlock(Module):
    """Temporal conv, first-token shift, per-frame self-attention, MLP."""

    def __init__(self, d: int, n_heads: int, rng: np.random.Generator, kernel: int = 3, expansion: int = 4):
        self.conv_weight = Parameter(normal(rng, (kernel, d, d), None))
        self.conv_bias = Parameter(np.zeros(d, np.float32))
        self.attn = MultiHeadAttention(d, n_heads, rng, std=None)
        self.norm1 = LayerNorm(d)
        self.mlp = FeedForward(d, rng, expansion, std=None)
        self.norm2 = LayerNorm(d)

    def temporal_conv(self, x: Tensor) -> Tensor:
        b, t, p, d = x.shape
        y = reshape(transpose(x, (0, 2, 1, 3)), (b * p, t, d))
        y = y + fn.conv1d_time(y, self.conv_weight, self.conv_bias)
        return transpose(reshape(y, (b, p, t, d)), (0, 2, 1, 3))

    @staticmethod
    def token_shift(x: Tensor) -> Tensor:
        """Roll half of token 0's channels forward in time, the other half back."""
        half = x.shape[-1] // 2
        first = x[:, :, 0, :]
        shifted = concat([roll(first[..., :half], 1, axis=1), roll(first[..., half:], -1, axis=1)], axis=-1)
        b, t, _, d = x.shape
        return concat([reshape(shifted, (b, t, 1, d)), x[:, :, 1:, :]], axis=2)

    def forward(self, x: Tensor, temporal: bool = True) -> Tensor:
        b, t, p, d = x.shape
        if temporal:
            x = self.token_shift(self.temporal_conv(x))
        y = reshape(x, (b * t, p, d))
        y = self.norm1(y + self.attn(y, y))
        y = self.norm2(y + self.mlp(y))
        return reshape(y, (b, t, p, d))


class SceneBranch(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        self.patch_embed = Linear(cfg.patch_dim, cfg.d_scene, rng, std=None)
        self.side_block = SceneSideBlock(cfg.d_scene, cfg.n_heads, rng, expansion=cfg.ffn_expansion)
        self.projection = Linear(cfg.d_scene, cfg.d_model, rng, std=cfg.init_std)

    def tokens(self, x: Tensor, temporal: bool = True) -> Tensor:
        """Side-block output [B, T, P, D_S]."""
        return self.side_block(self.patch_embed(patchify(x, self.cfg.patch)), temporal=temporal)

    def features(self, x: Tensor, temporal: bool = True) -> Tensor:
        """Global average pool over all T*P tokens: [B, 1, D_S]."""
        tokens = self.tokens(x, temporal)
        b, t, p, d = tokens.shape
        return reshape(tokens, (b, t * p, d)).mean(axis=1, keepdims=True)

    def project(self, pooled: Tensor) -> Tensor:
        return self.projection(pooled)

    def forward(self, x: Tensor) -> Tensor:
        return self.project(self.features(x))

