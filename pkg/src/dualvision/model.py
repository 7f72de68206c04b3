"""Full model: both visual branches feeding the dual-vision decoder."""
from __future__ import annotations

import hashlib
from typing import Optional

import numpy as np

from .config import ModelConfig
from .decoder import CaptionHypothesis, DualVisionDecoder, FusionMode
from .nn import Buffer, Module
from .tensor import Tensor, mul, no_tape, sub
from .visual import FrameBranch, SceneBranch

# name prefix -> parameter group; first match wins
_GROUP_PREFIXES = (
    ("frame_branch.encoder.", "frame_encoder"),
    ("frame_branch.frame_qformer.", "frame_qformer"),
    ("frame_branch.frame_positions", "frame_positions"),
    ("frame_branch.video_qformer.", "video_qformer"),
    ("frame_branch.projection.", "frame_projection"),
    ("scene_branch.projection.", "scene_projection"),
    ("scene_branch.", "scene_encoder"),
    ("decoder.embedding.", "token_embedding"),
    ("decoder.", "decoder"),
)

PARAM_GROUPS = tuple(dict.fromkeys(g for _, g in _GROUP_PREFIXES))
# groups computed before the projections; precomputed features depend only on these
FEATURE_GROUPS = ("frame_encoder", "frame_qformer", "frame_positions", "video_qformer", "scene_encoder")


def group_of(name: str) -> str:
    for prefix, group in _GROUP_PREFIXES:
        if name.startswith(prefix):
            return group
    raise KeyError(name)


class FeatureCentering(Module):
    """Fixed affine standardisation of cached branch outputs.

    Holds a per-coordinate mean and one global scale per branch, estimated on
    the training split.  Until :meth:`fit` is called it is the identity.
    """

    def __init__(self, cfg: ModelConfig):
        self.frame_mean = Buffer(np.zeros((cfg.n_queries, cfg.d_query), np.float32))
        self.frame_scale = Buffer(np.ones(1, np.float32))
        self.scene_mean = Buffer(np.zeros((1, cfg.d_scene), np.float32))
        self.scene_scale = Buffer(np.ones(1, np.float32))

    def fit(self, frame: np.ndarray, scene: np.ndarray) -> None:
        """Estimate statistics from stacked features [N, N_q, D_q] and [N, 1, D_S]."""
        for prefix, x in (("frame", np.asarray(frame, np.float64)), ("scene", np.asarray(scene, np.float64))):
            scale = float(x.std(axis=0).mean()) if len(x) > 1 else 1.0
            getattr(self, f"{prefix}_mean").data = x.mean(axis=0).astype(np.float32)
            getattr(self, f"{prefix}_scale").data = np.array([scale if scale > 1e-8 else 1.0], np.float32)

    def forward(self, frame: Tensor, scene: Tensor) -> tuple[Tensor, Tensor]:
        def apply(x, mean, scale):
            return mul(sub(x, Tensor(mean.data.astype(x.dtype))), Tensor((1.0 / scale.data).astype(x.dtype)))

        return apply(frame, self.frame_mean, self.frame_scale), apply(scene, self.scene_mean, self.scene_scale)


class DualVisionModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0, mode: Optional[FusionMode] = None):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.frame_branch = FrameBranch(cfg, rng)
        self.scene_branch = SceneBranch(cfg, rng)
        self.decoder = DualVisionDecoder(cfg, rng, mode)
        self.centering = FeatureCentering(cfg)

    @property
    def mode(self) -> FusionMode:
        return self.decoder.mode

    def named_groups(self) -> dict[str, list[str]]:
        groups: dict[str, list[str]] = {g: [] for g in PARAM_GROUPS}
        for name, _ in self.named_parameters():
            groups[group_of(name)].append(name)
        return groups

    def feature_fingerprint(self) -> str:
        """Hash of every parameter that feeds the precomputed features."""
        h = hashlib.sha256()
        for name, p in sorted(self.named_parameters()):
            if group_of(name) in FEATURE_GROUPS:
                h.update(name.encode())
                h.update(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
        return h.hexdigest()

    def visual_features(self, frames) -> tuple[Tensor, Tensor]:
        """Pre-projection branch outputs for subsampled clips [B, T, C, H, W]."""
        x = frames if isinstance(frames, Tensor) else Tensor(np.asarray(frames, dtype=np.float32))
        return self.frame_branch.features(x), self.scene_branch.features(x)

    def contexts(self, frame_feats: Tensor, scene_feats: Tensor) -> tuple[Tensor, Tensor]:
        """Project cached features to FrameContext [B, N_q, D_L] and SceneContext [B, 1, D_L]."""
        frame_feats, scene_feats = self.centering(frame_feats, scene_feats)
        return self.frame_branch.project(frame_feats), self.scene_branch.project(scene_feats)

    def forward(self, frame_feats: Tensor, scene_feats: Tensor, tokens) -> Tensor:
        frame, scene = self.contexts(frame_feats, scene_feats)
        return self.decoder.forward_teacher_forced(frame, scene, tokens)

    def generate(self, frame_feats: Tensor, scene_feats: Tensor, max_len: Optional[int] = None) -> list[CaptionHypothesis]:
        with no_tape():
            frame, scene = self.contexts(frame_feats, scene_feats)
            return self.decoder.generate(frame, scene, max_len)
