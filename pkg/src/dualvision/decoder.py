"""Dual-vision attention decoder.

Three post-norm layers, each: causal self-attention over the caption prefix,
cross-attention to the visual contexts (arranged by :class:`FusionMode`), and
a feed-forward sublayer.  Output logits come from the tied token embedding.
"""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import BOS_ID, EOS_ID, ModelConfig
from .errors import CapacityError, ContractError, ShapeError
from .nn import CausalMask, FeedForward, LayerNorm, Module, MultiHeadAttention, PositionalEncoding, TokenEmbedding
from .tensor import Tensor, concat, no_tape


class FusionMode(str, enum.Enum):
    FRAME_FIRST = "fs"  # F => S
    SCENE_FIRST = "sf"  # S => F
    CONCAT = "concat"  # [F; S]
    FRAME_ONLY = "frame"
    SCENE_ONLY = "scene"

    @property
    def sequential(self) -> bool:
        return self in (FusionMode.FRAME_FIRST, FusionMode.SCENE_FIRST)


class CrossAttention(Module):
    """Residual post-norm cross-attention sublayer (words query visual tokens)."""

    def __init__(self, d_model: int, n_heads: int, rng: np.random.Generator, std: Optional[float] = None):
        self.attn = MultiHeadAttention(d_model, n_heads, rng, std=std)
        self.norm = LayerNorm(d_model)

    def forward(self, x: Tensor, context: Tensor, return_weights: bool = False):
        if context.shape[-1] != x.shape[-1]:
            raise ShapeError(f"visual context width {context.shape[-1]} != decoder width {x.shape[-1]}")
        attended, weights = self.attn(x, context, return_weights=True)
        out = self.norm(x + attended)
        return (out, weights) if return_weights else out


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, mode: FusionMode, rng: np.random.Generator):
        d, h, std = cfg.d_model, cfg.n_heads, cfg.init_std
        self.self_attn = MultiHeadAttention(d, h, rng, std=std)
        self.self_norm = LayerNorm(d)
        # sublayer names do not depend on the order, so F=>S and S=>F models
        # built from one seed share identical weights
        if mode in (FusionMode.FRAME_FIRST, FusionMode.SCENE_FIRST, FusionMode.FRAME_ONLY):
            self.cross_frame = CrossAttention(d, h, rng, std)
        if mode in (FusionMode.FRAME_FIRST, FusionMode.SCENE_FIRST, FusionMode.SCENE_ONLY):
            self.cross_scene = CrossAttention(d, h, rng, std)
        if mode is FusionMode.CONCAT:
            self.cross_joint = CrossAttention(d, h, rng, std)
        self.ffn = FeedForward(d, rng, cfg.ffn_expansion, std=std)
        self.ffn_norm = LayerNorm(d)
        self._mode = mode

    def fuse(self, x: Tensor, frame: Tensor, scene: Tensor, trace: Optional[list] = None) -> Tensor:
        """Apply the visual cross-attention sublayers in the configured order."""
        mode = self._mode
        if mode is FusionMode.CONCAT:
            steps = [(self.cross_joint, concat([frame, scene], axis=1), "joint")]
        elif mode is FusionMode.FRAME_FIRST:
            steps = [(self.cross_frame, frame, "frame"), (self.cross_scene, scene, "scene")]
        elif mode is FusionMode.SCENE_FIRST:
            steps = [(self.cross_scene, scene, "scene"), (self.cross_frame, frame, "frame")]
        elif mode is FusionMode.FRAME_ONLY:
            steps = [(self.cross_frame, frame, "frame")]
        else:
            steps = [(self.cross_scene, scene, "scene")]
        for sublayer, context, name in steps:
            x, weights = sublayer(x, context, return_weights=True)
            if trace is not None:
                trace.append((name, weights.data))
        return x

    def forward(self, x: Tensor, frame: Tensor, scene: Tensor, mask: CausalMask, trace: Optional[list] = None) -> Tensor:
        x = self.self_norm(x + self.self_attn(x, x, mask))
        x = self.fuse(x, frame, scene, trace)
        return self.ffn_norm(x + self.ffn(x))


@dataclass
class CaptionHypothesis:
    tokens: list[int]
    logits: np.ndarray  # [steps_used, vocab]
    terminated: bool
    steps_used: int
    meta: dict = field(default_factory=dict)

    def content_tokens(self) -> list[int]:
        """Tokens with the leading BOS and a trailing EOS removed."""
        body = self.tokens[1:]
        if self.terminated and body and body[-1] == EOS_ID:
            body = body[:-1]
        return body


class DualVisionDecoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, mode: Optional[FusionMode] = None):
        self.cfg = cfg
        self.mode = FusionMode(mode or cfg.fusion)
        # rows have unit expected norm; inputs are rescaled by sqrt(d_model)
        self.embedding = TokenEmbedding(cfg.vocab_size, cfg.d_model, rng, std=1.0 / math.sqrt(cfg.d_model))
        self.positions = PositionalEncoding(cfg.max_len, cfg.d_model)
        self.layers = [DecoderLayer(cfg, self.mode, rng) for _ in range(cfg.n_layers)]

    def _check_contexts(self, frame: Tensor, scene: Tensor, batch: int) -> None:
        d = self.cfg.d_model
        if frame.ndim != 3 or frame.shape[0] != batch or frame.shape[2] != d:
            raise ShapeError(f"frame context must be [{batch}, N_q, {d}], got {frame.shape}")
        if scene.shape != (batch, 1, d):
            raise ShapeError(f"scene context must be [{batch}, 1, {d}], got {scene.shape}")

    def forward_teacher_forced(self, frame: Tensor, scene: Tensor, tokens, trace: Optional[list] = None) -> Tensor:
        """Next-token logits [B, L, vocab] for the given gold prefixes [B, L]."""
        tokens = np.asarray(tokens)
        if tokens.ndim == 1:
            tokens = tokens[None]
        b, length = tokens.shape
        if length > self.cfg.max_len:
            raise CapacityError(f"sequence of length {length} exceeds max_len {self.cfg.max_len}")
        if not np.all(tokens[:, 0] == BOS_ID):
            raise ContractError("every input sequence must begin with BOS")
        self._check_contexts(frame, scene, b)
        x = self.embedding.lookup(tokens) * math.sqrt(self.cfg.d_model)
        x = self.positions(x)
        mask = CausalMask(length)
        for layer in self.layers:
            x = layer(x, frame, scene, mask, trace)
        return self.embedding.logits(x)

    forward = forward_teacher_forced

    def generate(self, frame: Tensor, scene: Tensor, max_len: Optional[int] = None) -> list[CaptionHypothesis]:
        """Greedy decoding from BOS; ties go to the lowest token id."""
        max_len = max_len or self.cfg.max_len
        if max_len < 2:
            raise ContractError("max_len must be at least 2")
        if max_len > self.cfg.max_len:
            raise CapacityError(f"max_len {max_len} exceeds model capacity {self.cfg.max_len}")
        b = frame.shape[0]
        seqs = np.full((b, 1), BOS_ID, dtype=np.int64)
        done = np.zeros(b, dtype=bool)
        step_logits: list[np.ndarray] = []
        with no_tape():
            while seqs.shape[1] < max_len and not done.all():
                logits = self.forward_teacher_forced(frame, scene, seqs).data[:, -1, :]
                nxt = np.argmax(logits, axis=-1)
                nxt = np.where(done, EOS_ID, nxt)
                step_logits.append(logits)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                done |= nxt == EOS_ID
        hyps = []
        for i in range(b):
            row = seqs[i].tolist()
            if EOS_ID in row[1:]:
                end = row.index(EOS_ID, 1) + 1
                terminated = True
            else:
                end = len(row)
                terminated = False
            steps = end - 1
            logits = np.stack([s[i] for s in step_logits[:steps]]) if steps else np.zeros((0, self.cfg.vocab_size))
            hyps.append(CaptionHypothesis(row[:end], logits, terminated, steps))
        return hyps
