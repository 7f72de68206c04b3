"""Synthetic scene-dependent captioning data and the JSON-lines manifest.

Every clip shows one glyph (a shape drawn in a colour) wandering over noisy
frames, under a scene context: a colour wash added to every pixel plus a
linear drift of that wash over time.  Captions read

    <bos> scene-word shape-word colour-word <eos>

Clips are generated in *twin groups*: one glyph trajectory and one noise field
rendered under each scene context.  Within a group the frames differ only by
a per-frame constant per channel, so anything that centres frames
independently (as the frame branch does) cannot tell the twins apart, while
their scene words differ.
"""
from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import storage
from .config import BOS_ID, EOS_ID, PAD_ID
from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<bos>", "<eos>", "<unk>")
UNK_ID = 3

# (word, additive wash per channel, wash drift over the clip per channel)
SCENES = (
    ("dawn", (0.40, 0.20, 0.00), (0.20, 0.10, 0.00)),
    ("dusk", (0.40, 0.00, 0.30), (-0.20, 0.00, -0.10)),
    ("night", (-0.30, -0.30, 0.10), (0.00, 0.00, 0.20)),
    ("noon", (0.30, 0.30, 0.30), (0.00, 0.00, 0.00)),
    ("storm", (-0.20, -0.10, -0.20), (0.10, 0.10, 0.10)),
    ("fog", (0.10, 0.20, 0.20), (-0.10, -0.10, 0.00)),
)

_G = {
    "square": ["####", "####", "####", "####"],
    "ring": ["####", "#..#", "#..#", "####"],
    "cross": [".#..", "####", ".#..", ".#.."],
    "bar": ["....", "####", "####", "...."],
    "pillar": [".##.", ".##.", ".##.", ".##."],
    "diagonal": ["#...", ".#..", "..#.", "...#"],
}
SHAPES = tuple((name, np.array([[c == "#" for c in row] for row in rows], dtype=np.float32)) for name, rows in _G.items())

COLORS = (
    ("red", (1.0, 0.0, 0.0)),
    ("green", (0.0, 1.0, 0.0)),
    ("blue", (0.0, 0.0, 1.0)),
    ("white", (1.0, 1.0, 1.0)),
    ("yellow", (1.0, 1.0, 0.0)),
    ("cyan", (0.0, 1.0, 1.0)),
)


class Vocabulary:
    """Fixed toy vocabulary: specials, grammar words, then unused filler."""

    def __init__(self, size: int = 64):
        words = list(SPECIALS)
        words += [w for w, _, _ in SCENES] + [w for w, _ in SHAPES] + [w for w, _ in COLORS]
        if size < len(words):
            raise ConfigError(f"vocabulary of {size} cannot hold the {len(words)} grammar words")
        words += [f"w{i}" for i in range(size - len(words))]
        self.words = words
        self.index = {w: i for i, w in enumerate(words)}

    def __len__(self) -> int:
        return len(self.words)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK_ID) for w in text.split()]

    def decode(self, ids: Iterable[int], strip: bool = True) -> str:
        skip = {PAD_ID, BOS_ID, EOS_ID} if strip else set()
        return " ".join(self.words[i] for i in ids if i not in skip)


@dataclass(frozen=True)
class SynthConfig:
    n_scenes: int = 4
    n_shapes: int = 4
    n_colors: int = 4
    eval_films: int = 2
    channels: int = 3
    height: int = 16
    width: int = 16
    min_frames: int = 12
    max_frames: int = 20
    noise: float = 0.05
    glyph_intensity: float = 1.0
    glyph_grid: int = 4  # glyph corners snap to this pixel grid
    vocab_size: int = 64

    def validate(self) -> None:
        for name, limit in (("n_scenes", len(SCENES)), ("n_shapes", len(SHAPES)), ("n_colors", len(COLORS))):
            value = getattr(self, name)
            if not 1 <= value <= limit:
                raise ConfigError(f"{name}={value}: the grammar supports 1..{limit}")
        if self.n_scenes < 2:
            raise ConfigError("at least two scene contexts are needed for twin pairs")
        if self.channels != 3:
            raise ConfigError("the grammar's colours are defined for 3 channels")
        if self.min_frames < 1 or self.max_frames < self.min_frames:
            raise ConfigError(f"bad frame range [{self.min_frames}, {self.max_frames}]")
        if self.height < 4 or self.width < 4:
            raise ConfigError("frames must be at least 4x4 to hold a glyph")
        if self.glyph_grid < 1:
            raise ConfigError("glyph_grid must be positive")


@dataclass
class ManifestRecord:
    clip_id: str
    film_id: str
    split: str
    n_frames: int
    caption_tokens: list[int]
    caption_text: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "clip_id": self.clip_id,
                "film_id": self.film_id,
                "split": self.split,
                "n_frames": self.n_frames,
                "caption_tokens": self.caption_tokens,
                "caption_text": self.caption_text,
            }
        )


@dataclass
class Manifest:
    records: list[ManifestRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def split(self, name: str) -> list[ManifestRecord]:
        return [r for r in self.records if r.split == name]

    def by_id(self) -> dict[str, ManifestRecord]:
        return {r.clip_id: r for r in self.records}

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text("".join(r.to_json() + "\n" for r in self.records), encoding="utf-8")

    def __eq__(self, other) -> bool:
        return isinstance(other, Manifest) and self.records == other.records


@dataclass
class VideoClip:
    frames: np.ndarray  # [N, C, H, W]
    caption: list[int]
    clip_id: str
    film_id: str

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]


_REQUIRED = {
    "clip_id": str,
    "film_id": str,
    "split": str,
    "n_frames": int,
    "caption_tokens": list,
    "caption_text": str,
}


def _parse_record(line: str, lineno: int) -> ManifestRecord:
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DataError(f"line {lineno}: malformed JSON ({exc.msg})") from None
    if not isinstance(obj, dict):
        raise DataError(f"line {lineno}: expected an object")
    missing = sorted(set(_REQUIRED) - set(obj))
    if missing:
        raise DataError(f"line {lineno}: missing fields {missing}")
    for key, typ in _REQUIRED.items():
        if not isinstance(obj[key], typ) or (typ is int and isinstance(obj[key], bool)):
            raise DataError(f"line {lineno}: field {key!r} must be {typ.__name__}")
    if obj["split"] not in ("train", "eval"):
        raise DataError(f"line {lineno}: split must be 'train' or 'eval', got {obj['split']!r}")
    if obj["n_frames"] < 1:
        raise DataError(f"line {lineno}: n_frames must be positive")
    tokens = obj["caption_tokens"]
    if not tokens or not all(isinstance(t, int) for t in tokens) or tokens[-1] != EOS_ID:
        raise DataError(f"line {lineno}: caption_tokens must be a non-empty int list ending with EOS")
    return ManifestRecord(**{k: obj[k] for k in _REQUIRED})


def validate_records(records: list[ManifestRecord], lines: Optional[list[int]] = None) -> None:
    lines = lines or list(range(1, len(records) + 1))
    seen: dict[str, int] = {}
    film_split: dict[str, tuple[str, int]] = {}
    for rec, lineno in zip(records, lines):
        if rec.clip_id in seen:
            raise DataError(f"duplicate clip_id {rec.clip_id!r} on lines {seen[rec.clip_id]} and {lineno}")
        seen[rec.clip_id] = lineno
        prev = film_split.setdefault(rec.film_id, (rec.split, lineno))
        if prev[0] != rec.split:
            raise DataError(
                f"film {rec.film_id!r} appears in split {prev[0]!r} (line {prev[1]}) "
                f"and {rec.split!r} (line {lineno})"
            )


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except FileNotFoundError:
        raise DataError(f"{path}: manifest not found") from None
    records, lines = [], []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        records.append(_parse_record(line, lineno))
        lines.append(lineno)
    if not records:
        warnings.warn(f"{path}: manifest is empty", stacklevel=2)
    validate_records(records, lines)
    return Manifest(records)


# -- generation ---------------------------------------------------------------
def _render_content(rng: np.random.Generator, cfg: SynthConfig, n: int, shape: np.ndarray, color) -> np.ndarray:
    """Noise plus a glyph at a fresh random grid position in each frame."""
    frames = rng.normal(0.0, cfg.noise, size=(n, cfg.channels, cfg.height, cfg.width)).astype(np.float32)
    gh, gw = shape.shape
    tint = np.asarray(color, dtype=np.float32)[:, None, None] * cfg.glyph_intensity
    for i in range(n):
        y = rng.integers(0, (cfg.height - gh) // cfg.glyph_grid + 1) * cfg.glyph_grid
        x = rng.integers(0, (cfg.width - gw) // cfg.glyph_grid + 1) * cfg.glyph_grid
        frames[i, :, y : y + gh, x : x + gw] += tint * shape
    return frames


def scene_field(scene: int, n: int, channels: int = 3) -> np.ndarray:
    """Per-frame, per-channel wash of a scene context: [N, C, 1, 1]."""
    _, bias, drift = SCENES[scene]
    ramp = np.linspace(-0.5, 0.5, n) if n > 1 else np.zeros(1)
    wash = np.asarray(bias)[None, :] + ramp[:, None] * np.asarray(drift)[None, :]
    return wash[:, :channels, None, None].astype(np.float32)


def generate_dataset(
    seed: int = 0,
    n_films: int = 12,
    scenes_per_film: int = 20,
    config: Optional[SynthConfig] = None,
) -> tuple[Manifest, dict[str, VideoClip]]:
    """Build a manifest and the matching clips, deterministically from ``seed``.

    ``scenes_per_film`` clips are made per film, in twin groups of
    ``n_scenes``; the last ``eval_films`` films form the eval split.
    """
    cfg = config or SynthConfig()
    cfg.validate()
    if n_films < 1 or scenes_per_film < 1:
        raise ConfigError("n_films and scenes_per_film must be positive")
    if scenes_per_film % cfg.n_scenes:
        raise ConfigError(
            f"scenes_per_film={scenes_per_film} must be a multiple of n_scenes={cfg.n_scenes} "
            "so every clip has its twins"
        )
    if not 0 <= cfg.eval_films < n_films:
        raise ConfigError(f"eval_films={cfg.eval_films} must be in [0, n_films)")
    vocab = Vocabulary(cfg.vocab_size)
    rng = np.random.default_rng(seed)
    records: list[ManifestRecord] = []
    clips: dict[str, VideoClip] = {}
    # (shape, colour) pairs are dealt from reshuffled decks so that every
    # pairing occurs about equally often
    deck: list[tuple[int, int]] = []
    for f in range(n_films):
        film_id = f"film{f:03d}"
        split = "eval" if f >= n_films - cfg.eval_films else "train"
        for g in range(scenes_per_film // cfg.n_scenes):
            if not deck:
                deck = [divmod(int(k), cfg.n_colors) for k in rng.permutation(cfg.n_shapes * cfg.n_colors)]
            shape_i, color_i = deck.pop()
            n = int(rng.integers(cfg.min_frames, cfg.max_frames + 1))
            content = _render_content(rng, cfg, n, SHAPES[shape_i][1], COLORS[color_i][1])
            order = rng.permutation(cfg.n_scenes)
            for j, scene in enumerate(order):
                scene = int(scene)
                idx = g * cfg.n_scenes + j
                clip_id = f"{film_id}-c{idx:03d}"
                words = [SCENES[scene][0], SHAPES[shape_i][0], COLORS[color_i][0]]
                tokens = [BOS_ID] + [vocab.index[w] for w in words] + [EOS_ID]
                frames = content + scene_field(scene, n, cfg.channels)
                clips[clip_id] = VideoClip(frames, tokens, clip_id, film_id)
                records.append(ManifestRecord(clip_id, film_id, split, n, tokens, " ".join(words)))
    manifest = Manifest(records)
    validate_records(records)
    return manifest, clips


def clip_path(store: Path, clip_id: str) -> Path:
    return Path(store) / f"{clip_id}.clip"


def save_clip(store, clip: VideoClip) -> None:
    storage.save(
        clip_path(store, clip.clip_id),
        {"frames": clip.frames.astype(np.float32), "caption": np.asarray(clip.caption, dtype=np.int64)},
        {"clip_id": clip.clip_id, "film_id": clip.film_id},
    )


def load_clip(store, clip_id: str) -> VideoClip:
    tensors, meta = storage.load(clip_path(store, clip_id))
    try:
        frames, caption = tensors["frames"], tensors["caption"]
    except KeyError as exc:
        raise DataError(f"clip {clip_id}: missing tensor {exc}") from None
    if frames.ndim != 4:
        raise DataError(f"clip {clip_id}: frames must be [N, C, H, W], got {frames.shape}")
    return VideoClip(frames, caption.tolist(), meta.get("clip_id", clip_id), meta.get("film_id", ""))


def write_dataset(out_dir, manifest: Manifest, clips: dict[str, VideoClip]) -> Path:
    out_dir = Path(out_dir)
    manifest.save(out_dir / "manifest.jsonl")
    for rec in manifest:
        save_clip(out_dir / "clips", clips[rec.clip_id])
    log.info("wrote %d clips to %s", len(manifest), out_dir)
    return out_dir / "manifest.jsonl"


def centred(frames: np.ndarray) -> np.ndarray:
    """Per-frame, per-channel mean-centred pixels (what the frame branch sees)."""
    frames = np.asarray(frames, dtype=np.float64)
    return frames - frames.mean(axis=(-2, -1), keepdims=True)


def find_twins(clips: dict[str, VideoClip], atol: float = 1e-5) -> dict[str, list[str]]:
    """Map each clip to the other clips whose centred frames match it."""
    prepared = {cid: centred(clip.frames) for cid, clip in clips.items()}
    buckets: dict[tuple, list[str]] = {}
    for cid, c in prepared.items():
        buckets.setdefault(c.shape, []).append(cid)
    twins: dict[str, list[str]] = {cid: [] for cid in clips}
    for members in buckets.values():
        for i, a in enumerate(members):
            for b in members[i + 1 :]:
                if np.allclose(prepared[a], prepared[b], atol=atol):
                    twins[a].append(b)
                    twins[b].append(a)
    return twins


def ambiguity_audit(manifest: Manifest, clips: dict[str, VideoClip], split: str = "eval") -> float:
    """Fraction of ``split`` clips having a frame-identical twin with another scene word."""
    twins = find_twins(clips)
    recs = manifest.by_id()
    target = manifest.split(split)
    if not target:
        return 0.0
    hits = 0
    for rec in target:
        scene = rec.caption_tokens[1]
        if any(recs[t].caption_tokens[1] != scene for t in twins[rec.clip_id]):
            hits += 1
    return hits / len(target)
