"""Prediction, token accuracies and the fusion-mode ablation."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig
from .data import Manifest, ManifestRecord, VideoClip, Vocabulary
from .decoder import FusionMode
from .metrics import evaluate_captions
from .model import DualVisionModel
from .tensor import Tensor
from .training import ClipFeatures, TrainConfig, batch_inputs, compute_features, reference_config, sequence_nll, train
from .visual import subsample

log = logging.getLogger(__name__)

ABLATION_MODES = (
    FusionMode.FRAME_FIRST,
    FusionMode.SCENE_FIRST,
    FusionMode.CONCAT,
    FusionMode.FRAME_ONLY,
    FusionMode.SCENE_ONLY,
)
ABLATION_COLUMNS = (
    "mode",
    "seed",
    "cider",
    "recall_proxy",
    "scene_acc",
    "event_acc",
    "eval_nll",
    "scene_acc_shuffled_s",
    "event_acc_shuffled_f",
)


@dataclass
class Prediction:
    clip_id: str
    tokens: list[int]  # content tokens, BOS/EOS removed
    text: str

    def to_dict(self) -> dict:
        return {"clip_id": self.clip_id, "tokens": self.tokens, "text": self.text}


def features_in_memory(
    manifest: Manifest, clips: dict[str, VideoClip], cfg: ModelConfig, seed: int, batch_size: int = 40
) -> dict[str, ClipFeatures]:
    """Branch outputs for every clip, without touching the disk cache."""
    model = DualVisionModel(cfg, seed=seed)
    ids = [r.clip_id for r in manifest]
    out: dict[str, ClipFeatures] = {}
    for i in range(0, len(ids), batch_size):
        chunk = ids[i : i + batch_size]
        x = np.stack([subsample(clips[c].frames, cfg.n_frames) for c in chunk]).astype(np.float32)
        out.update(zip(chunk, compute_features(model, x)))
    return out


def predict(
    model: DualVisionModel,
    records: Sequence[ManifestRecord],
    features: dict[str, ClipFeatures],
    vocab: Optional[Vocabulary] = None,
    max_len: Optional[int] = None,
    batch_size: int = 64,
    frame: Optional[np.ndarray] = None,
    scene: Optional[np.ndarray] = None,
) -> list[Prediction]:
    """Greedy captions for ``records``; ``frame``/``scene`` override the features."""
    vocab = vocab or Vocabulary(model.cfg.vocab_size)
    f_all, s_all, _ = batch_inputs(list(records), features)
    f_all = f_all.data if frame is None else frame
    s_all = s_all.data if scene is None else scene
    out = []
    for i in range(0, len(records), batch_size):
        hyps = model.generate(Tensor(f_all[i : i + batch_size]), Tensor(s_all[i : i + batch_size]), max_len)
        for rec, hyp in zip(records[i : i + batch_size], hyps):
            body = hyp.content_tokens()
            out.append(Prediction(rec.clip_id, body, vocab.decode(body)))
    return out


def token_accuracy(predictions: Sequence[Prediction], records: Sequence[ManifestRecord]) -> tuple[float, float]:
    """(scene-token accuracy, event-token accuracy) by caption slot.

    The first content slot names the scene; the remaining slots describe the
    local event.  A missing slot in a prediction counts as wrong.
    """
    scene_hits = event_hits = event_total = 0
    for pred, rec in zip(predictions, records):
        gold = rec.caption_tokens[1:-1]
        got = pred.tokens + [None] * max(0, len(gold) - len(pred.tokens))
        scene_hits += got[0] == gold[0]
        event_hits += sum(g == p for g, p in zip(gold[1:], got[1:]))
        event_total += len(gold) - 1
    n = max(len(records), 1)
    return scene_hits / n, event_hits / max(event_total, 1)


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """A permutation with no fixed points (n >= 2): shuffle, then rotate by one."""
    order = rng.permutation(n)
    out = np.empty(n, dtype=np.int64)
    out[order] = np.roll(order, -1)
    return out


def evaluate_model(
    model: DualVisionModel,
    manifest: Manifest,
    features: dict[str, ClipFeatures],
    seed: int = 0,
    k: int = 1,
) -> dict:
    """Metrics on the eval split, including the shuffled-context ablations."""
    recs = manifest.split("eval")
    preds = predict(model, recs, features)
    report = evaluate_captions(
        [r.clip_id for r in recs], [p.text for p in preds], [r.caption_text for r in recs], [r.film_id for r in recs], k
    )
    scene_acc, event_acc = token_accuracy(preds, recs)
    f, s, _ = batch_inputs(recs, features)
    perm = derangement(len(recs), np.random.default_rng(seed))
    shuffled_s = token_accuracy(predict(model, recs, features, scene=s.data[perm]), recs)
    shuffled_f = token_accuracy(predict(model, recs, features, frame=f.data[perm]), recs)
    return {
        "cider": report.cider,
        "recall_proxy": report.recall_proxy,
        "scene_acc": scene_acc,
        "event_acc": event_acc,
        "eval_nll": sequence_nll(model, recs, features),
        "scene_acc_shuffled_s": shuffled_s[0],
        "event_acc_shuffled_f": shuffled_f[1],
        "predictions": preds,
        "report": report,
    }


def run_mode(
    manifest: Manifest,
    features: dict[str, ClipFeatures],
    mode,
    seed: int,
    config: Optional[TrainConfig] = None,
) -> dict:
    """Train one fusion mode from scratch and evaluate it."""
    mode = FusionMode(mode)
    config = config or reference_config(seed=seed, fusion=mode.value)
    result = train(manifest, config, features=features)
    row = evaluate_model(result.model, manifest, features, seed)
    row.update(mode=mode.value, seed=seed, train=result)
    return row


def ablation(
    manifest: Manifest,
    features: dict[str, ClipFeatures],
    seed: int,
    modes: Sequence = ABLATION_MODES,
    base: Optional[TrainConfig] = None,
) -> list[dict]:
    """Every mode trained with the same seed, data and frozen features.

    Branch weights are built before the decoder from the same seed, so one
    feature cache serves all modes.
    """
    rows = []
    for mode in modes:
        mode = FusionMode(mode)
        config = None
        if base is not None:
            params = {**base.__dict__, "seed": seed, "model": ModelConfig(**{**base.model.to_dict(), "fusion": mode.value})}
            config = TrainConfig(**params)
        rows.append(run_mode(manifest, features, mode, seed, config))
        log.info("ablation %s seed %d: %s", mode.value, seed, {k: rows[-1][k] for k in ABLATION_COLUMNS[2:]})
    return rows


def write_ablation_csv(path, rows: Sequence[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(ABLATION_COLUMNS)
        for row in rows:
            writer.writerow([row[c] if c in ("mode", "seed") else repr(float(row[c])) for c in ABLATION_COLUMNS])


def read_ablation_csv(path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        for c in ABLATION_COLUMNS[2:]:
            row[c] = float(row[c])
        row["seed"] = int(row["seed"])
    return rows
