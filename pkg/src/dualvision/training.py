"""Teacher-forced training: loss, AdamW, cosine schedule, freezing, checkpoints.

Visual features are normally precomputed once per clip (see
:func:`precompute_features`) and only the projections and the decoder are
updated; ``end_to_end`` recomputes them from pixels every step instead.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import functional as fn
from . import storage
from .config import PAD_ID, ModelConfig
from .data import Manifest, ManifestRecord, load_clip
from .errors import ConfigError, ContractError, DataError, NumericError
from .model import FEATURE_GROUPS, PARAM_GROUPS, DualVisionModel, group_of
from .nn import Parameter
from .tensor import Tape, Tensor, backward, no_tape
from .visual import subsample

log = logging.getLogger(__name__)

CHECKPOINT_FORMAT = "dualvision-checkpoint"
CHECKPOINT_VERSION = 1
DEFAULT_TRAINABLE = ("frame_projection", "scene_projection", "decoder")


# -- loss -------------------------------------------------------------------
def caption_loss(logits: Tensor, targets) -> Tensor:
    """Mean next-token cross-entropy over non-PAD targets.

    ``logits[..., i, :]`` predicts ``targets[..., i]``, i.e. targets are the
    gold sequence shifted one step ahead of the decoder input.
    """
    return fn.cross_entropy(logits, np.asarray(targets), ignore_index=PAD_ID)


# -- schedule ---------------------------------------------------------------
@dataclass(frozen=True)
class Schedule:
    total_steps: int
    base_lr: float = 3e-5
    warmup_steps: int = 0

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigError("total_steps must be positive")
        if not 0 <= self.warmup_steps < self.total_steps:
            raise ConfigError("warmup_steps must be in [0, total_steps)")


def cosine_lr(step: int, schedule: Schedule) -> float:
    """Linear warmup, then cosine decay from ``base_lr`` to 0 at ``total_steps``."""
    if not 0 <= step <= schedule.total_steps:
        raise ContractError(f"step {step} outside [0, {schedule.total_steps}]")
    w = schedule.warmup_steps
    if step < w:
        return schedule.base_lr * (step + 1) / w
    progress = (step - w) / (schedule.total_steps - w)
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


# -- optimizer --------------------------------------------------------------
class AdamW:
    """Adam with decoupled weight decay.

    ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)``
    """

    def __init__(
        self,
        named_params: list[tuple[str, Parameter]],
        weight_decay: float = 0.01,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
    ):
        self.params = list(named_params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def step(self, lr: float) -> None:
        for name, p in self.params:
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NumericError(f"non-finite gradient in parameter {name!r}")
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - self.beta1**t
        c2 = 1.0 - self.beta2**t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
            v = self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * g * g
            update = (m / c1) / (np.sqrt(v / c2) + self.eps) + self.weight_decay * p.data
            p.data = (p.data - lr * update).astype(p.dtype)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name, _ in self.params:
            out[f"optim.m/{name}"] = self.m[name]
            out[f"optim.v/{name}"] = self.v[name]
        return out

    def load_state_tensors(self, tensors: dict[str, np.ndarray], step_count: int) -> None:
        for name, p in self.params:
            for buf, key in ((self.m, f"optim.m/{name}"), (self.v, f"optim.v/{name}")):
                if key not in tensors:
                    raise ConfigError(f"checkpoint lacks optimizer state {key!r}")
                if tensors[key].shape != p.shape:
                    raise ConfigError(f"optimizer state {key!r} has shape {tensors[key].shape}, expected {p.shape}")
                buf[name] = tensors[key].copy()
        self.step_count = step_count


# -- freezing ---------------------------------------------------------------
@dataclass(frozen=True)
class FreezePlan:
    trainable: frozenset = frozenset(DEFAULT_TRAINABLE)

    def __post_init__(self):
        unknown = set(self.trainable) - set(PARAM_GROUPS)
        if unknown:
            raise ConfigError(f"unknown parameter groups {sorted(unknown)}; known: {list(PARAM_GROUPS)}")

    def apply(self, model: DualVisionModel) -> list[tuple[str, Parameter]]:
        """Set ``requires_grad`` per group and return the trainable parameters."""
        out = []
        for name, p in model.named_parameters():
            flag = group_of(name) in self.trainable
            if group_of(name) == "frame_positions" and not model.cfg.learned_frame_positions:
                flag = False
            p.requires_grad = flag
            if flag:
                out.append((name, p))
        return out


# -- configuration -----------------------------------------------------------
@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 2
    batch_size: int = 8
    lr: float = 3e-5
    weight_decay: float = 0.01
    warmup_steps: int = 0
    warmup_fraction: float = 0.0  # warmup as a share of all steps; the larger of the two wins
    trainable: tuple = DEFAULT_TRAINABLE
    end_to_end: bool = False
    center_features: bool = True  # standardise branch outputs with train-split statistics
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch_size must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if not 0.0 <= self.warmup_fraction < 1.0:
            raise ConfigError("warmup_fraction must be in [0, 1)")
        FreezePlan(frozenset(self.trainable))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trainable"] = list(self.trainable)
        return d

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown training config keys: {unknown}")
        data = dict(data)
        if "model" in data:
            data["model"] = ModelConfig.from_dict(data["model"])
        if "trainable" in data:
            data["trainable"] = tuple(data["trainable"])
        return cls(**data)


# Desk-scale reference recipe for the synthetic task.  The decoder and the
# output vocabulary start from scratch rather than from a pre-trained language
# model, so within two epochs they need many small batches and a larger step.
REFERENCE_LR = 1e-3
REFERENCE_BATCH = 1
REFERENCE_WARMUP = 0.2  # share of all steps; post-norm layers trained from scratch need it
REFERENCE_TRAINABLE = DEFAULT_TRAINABLE + ("token_embedding",)


def reference_config(seed: int = 0, fusion: str = "fs", **overrides) -> TrainConfig:
    params = dict(
        seed=seed,
        lr=REFERENCE_LR,
        batch_size=REFERENCE_BATCH,
        warmup_fraction=REFERENCE_WARMUP,
        trainable=REFERENCE_TRAINABLE,
        model=ModelConfig(fusion=fusion),
    )
    params.update(overrides)
    return TrainConfig(**params)


# -- features -----------------------------------------------------------------
@dataclass
class ClipFeatures:
    frame: np.ndarray  # [N_q, D_q], before the frame projection
    scene: np.ndarray  # [1, D_S], pooled, before the scene projection


def feature_path(cache_dir, clip_id: str) -> Path:
    return Path(cache_dir) / f"{clip_id}.feat"


def compute_features(model: DualVisionModel, frames_batch: np.ndarray) -> list[ClipFeatures]:
    with no_tape():
        f, s = model.visual_features(frames_batch)
    return [ClipFeatures(f.data[i].copy(), s.data[i].copy()) for i in range(f.shape[0])]


def precompute_features(
    model: DualVisionModel,
    manifest: Manifest,
    clip_store,
    cache_dir,
    force: bool = False,
    batch_size: int = 16,
) -> dict:
    """Run both branches offline and cache their outputs per clip.

    Cached entries written for a different set of frozen branch weights are
    treated as stale and recomputed.  Unreadable clips are reported and
    skipped; the rest proceed.
    """
    fingerprint = model.feature_fingerprint()
    t = model.cfg.n_frames
    computed, skipped, failed = [], [], {}
    pending: list[tuple[str, np.ndarray]] = []

    def flush():
        if not pending:
            return
        feats = compute_features(model, np.stack([x for _, x in pending]))
        for (cid, _), feat in zip(pending, feats):
            storage.save(
                feature_path(cache_dir, cid),
                {"frame": feat.frame, "scene": feat.scene},
                {"clip_id": cid, "fingerprint": fingerprint},
            )
            computed.append(cid)
        pending.clear()

    for rec in manifest:
        path = feature_path(cache_dir, rec.clip_id)
        if not force and path.exists():
            try:
                _, meta = storage.load(path)
                if meta.get("fingerprint") == fingerprint:
                    skipped.append(rec.clip_id)
                    continue
            except DataError:
                pass
        try:
            clip = load_clip(clip_store, rec.clip_id)
            x = subsample(clip.frames, t)
            if x.shape[1:] != (model.cfg.channels, model.cfg.height, model.cfg.width):
                raise DataError(f"frame shape {x.shape[1:]} does not match the model config")
        except Exception as exc:  # noqa: BLE001 - one bad clip must not stop the batch
            failed[rec.clip_id] = str(exc)
            log.warning("clip %s failed: %s", rec.clip_id, exc)
            continue
        pending.append((rec.clip_id, x.astype(np.float32)))
        if len(pending) >= batch_size:
            flush()
    flush()
    return {"computed": computed, "skipped": skipped, "failed": failed, "fingerprint": fingerprint}


def load_features(cache_dir, clip_ids: list[str], fingerprint: Optional[str] = None) -> dict[str, ClipFeatures]:
    missing = [cid for cid in clip_ids if not feature_path(cache_dir, cid).exists()]
    if missing:
        raise DataError(f"feature cache lacks {len(missing)} clip(s): {', '.join(missing)}")
    out = {}
    for cid in clip_ids:
        tensors, meta = storage.load(feature_path(cache_dir, cid))
        if fingerprint is not None and meta.get("fingerprint") != fingerprint:
            raise DataError(f"feature cache entry {cid} was computed with different branch weights")
        out[cid] = ClipFeatures(tensors["frame"], tensors["scene"])
    return out


# -- batching -----------------------------------------------------------------
def pad_captions(captions: list[list[int]]) -> np.ndarray:
    width = max(len(c) for c in captions)
    out = np.full((len(captions), width), PAD_ID, dtype=np.int64)
    for i, c in enumerate(captions):
        out[i, : len(c)] = c
    return out


def batch_inputs(records: list[ManifestRecord], features: dict[str, ClipFeatures]):
    frame = Tensor(np.stack([features[r.clip_id].frame for r in records]))
    scene = Tensor(np.stack([features[r.clip_id].scene for r in records]))
    tokens = pad_captions([r.caption_tokens for r in records])
    return frame, scene, tokens


def sequence_nll(model: DualVisionModel, records: list[ManifestRecord], features: dict[str, ClipFeatures], batch_size: int = 64) -> float:
    """Token-weighted mean next-token loss, without recording."""
    total, count = 0.0, 0
    with no_tape():
        for i in range(0, len(records), batch_size):
            frame, scene, tokens = batch_inputs(records[i : i + batch_size], features)
            logits = model(frame, scene, tokens[:, :-1])
            n = int((tokens[:, 1:] != PAD_ID).sum())
            total += caption_loss(logits, tokens[:, 1:]).item() * n
            count += n
    return total / max(count, 1)


# -- checkpoints --------------------------------------------------------------
def _rng_state_json(rng: np.random.Generator) -> dict:
    state = rng.bit_generator.state
    return {"bit_generator": state["bit_generator"], "state": {k: str(v) for k, v in state["state"].items()},
            "has_uint32": state["has_uint32"], "uinteger": state["uinteger"]}


def _rng_from_json(data: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    rng.bit_generator.state = {
        "bit_generator": data["bit_generator"],
        "state": {k: int(v) for k, v in data["state"].items()},
        "has_uint32": data["has_uint32"],
        "uinteger": data["uinteger"],
    }
    return rng


def save_checkpoint(
    path,
    model: DualVisionModel,
    optimizer: AdamW,
    config: TrainConfig,
    rng: np.random.Generator,
    step: int,
    extra: Optional[dict] = None,
) -> None:
    tensors = dict(model.state_dict())
    tensors.update(optimizer.state_tensors())
    meta = {
        "format": CHECKPOINT_FORMAT,
        "format_version": CHECKPOINT_VERSION,
        "config": config.to_dict(),
        "step": step,
        "optimizer": {
            "step_count": optimizer.step_count,
            "betas": [optimizer.beta1, optimizer.beta2],
            "eps": optimizer.eps,
            "weight_decay": optimizer.weight_decay,
            "params": [name for name, _ in optimizer.params],
        },
        "rng": _rng_state_json(rng),
        "extra": extra or {},
    }
    storage.save(path, tensors, meta)


@dataclass
class Checkpoint:
    model: DualVisionModel
    optimizer: AdamW
    config: TrainConfig
    rng: np.random.Generator
    step: int
    meta: dict


def load_checkpoint(path, expect: Optional[ModelConfig] = None) -> Checkpoint:
    """Rebuild model and optimizer from a checkpoint file.

    With ``expect`` given, a checkpoint written for another model shape is
    refused with a :class:`ConfigError` naming the differing fields.
    """
    tensors, meta = storage.load(path)
    if meta.get("format") != CHECKPOINT_FORMAT or meta.get("format_version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    config = TrainConfig.from_dict(meta["config"])
    if expect is not None and expect != config.model:
        diff = {k: (v, getattr(config.model, k)) for k, v in expect.to_dict().items() if getattr(config.model, k) != v}
        raise ConfigError(f"checkpoint model config differs from expected: {diff}")
    model = DualVisionModel(config.model, seed=config.seed)
    model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})
    named = dict(model.named_parameters())
    opt_meta = meta["optimizer"]
    missing = [n for n in opt_meta["params"] if n not in named]
    if missing:
        raise ConfigError(f"optimizer refers to unknown parameters {missing}")
    plan = FreezePlan(frozenset(config.trainable))
    plan.apply(model)
    optimizer = AdamW(
        [(n, named[n]) for n in opt_meta["params"]],
        weight_decay=opt_meta["weight_decay"],
        betas=tuple(opt_meta["betas"]),
        eps=opt_meta["eps"],
    )
    optimizer.load_state_tensors(tensors, opt_meta["step_count"])
    return Checkpoint(model, optimizer, config, _rng_from_json(meta["rng"]), meta["step"], meta)


# -- loop -----------------------------------------------------------------------
@dataclass
class TrainResult:
    model: DualVisionModel
    optimizer: AdamW
    log: list[dict]
    epoch_eval_nll: list[float]
    final_path: Optional[Path] = None
    best_path: Optional[Path] = None
    step: int = 0

    @property
    def losses(self) -> list[float]:
        return [row["loss"] for row in self.log]


def write_metrics_csv(path, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["step", "lr", "loss"])
        for row in rows:
            writer.writerow([row["step"], repr(row["lr"]), repr(row["loss"])])


def _end_to_end_inputs(model, records, clips):
    t = model.cfg.n_frames
    x = Tensor(np.stack([subsample(clips[r.clip_id].frames, t) for r in records]).astype(np.float32))
    f, s = model.visual_features(x)
    return f, s, pad_captions([r.caption_tokens for r in records])


def train(
    manifest: Manifest,
    config: TrainConfig,
    features: Optional[dict[str, ClipFeatures]] = None,
    clips: Optional[dict] = None,
    out_dir=None,
    model: Optional[DualVisionModel] = None,
) -> TrainResult:
    """Fit the model on the manifest's train split.

    Precomputed ``features`` are required unless ``config.end_to_end`` is set,
    in which case raw ``clips`` (id -> VideoClip) are encoded every step.
    """
    train_recs = manifest.split("train")
    eval_recs = manifest.split("eval")
    if not train_recs:
        raise DataError("manifest has no train records")
    if config.end_to_end:
        if clips is None:
            raise ConfigError("end_to_end training needs the raw clips")
    else:
        if features is None:
            raise ConfigError("training needs precomputed features (or end_to_end=True)")
        missing = [r.clip_id for r in train_recs + eval_recs if r.clip_id not in features]
        if missing:
            raise DataError(f"feature cache lacks {len(missing)} clip(s): {', '.join(missing)}")

    model = model or DualVisionModel(config.model, seed=config.seed)
    plan = FreezePlan(frozenset(config.trainable))
    trainable = plan.apply(model)
    if not config.end_to_end and plan.trainable & set(FEATURE_GROUPS):
        raise ConfigError("branch internals can only be trained end to end")
    if config.center_features:
        if config.end_to_end:
            with no_tape():
                stats = [_end_to_end_inputs(model, train_recs[i : i + 32], clips)[:2] for i in range(0, len(train_recs), 32)]
            f_all = np.concatenate([f.data for f, _ in stats])
            s_all = np.concatenate([s.data for _, s in stats])
        else:
            f_all = np.stack([features[r.clip_id].frame for r in train_recs])
            s_all = np.stack([features[r.clip_id].scene for r in train_recs])
        model.centering.fit(f_all, s_all)
    optimizer = AdamW(trainable, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    steps_per_epoch = math.ceil(len(train_recs) / config.batch_size)
    total = config.epochs * steps_per_epoch
    warmup = max(config.warmup_steps, int(config.warmup_fraction * total))
    schedule = Schedule(total, config.lr, warmup)
    out_dir = Path(out_dir) if out_dir is not None else None

    rows: list[dict] = []
    epoch_eval: list[float] = []
    best_score = math.inf
    best_path = None
    step = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train_recs))
        for start in range(0, len(order), config.batch_size):
            batch = [train_recs[i] for i in order[start : start + config.batch_size]]
            lr = cosine_lr(step, schedule)
            optimizer.zero_grad()
            with Tape():
                if config.end_to_end:
                    f, s, tokens = _end_to_end_inputs(model, batch, clips)
                else:
                    f, s, tokens = batch_inputs(batch, features)
                logits = model(f, s, tokens[:, :-1])
                loss = caption_loss(logits, tokens[:, 1:])
            backward(loss)
            optimizer.step(lr)
            rows.append({"step": step, "lr": lr, "loss": float(loss.item())})
            step += 1
        if eval_recs and not config.end_to_end:
            score = sequence_nll(model, eval_recs, features)
        else:
            score = float(np.mean([r["loss"] for r in rows[-steps_per_epoch:]]))
        epoch_eval.append(score)
        log.info("epoch %d: loss %.4f, selection score %.4f", epoch, rows[-1]["loss"], score)
        if out_dir is not None and score < best_score:
            best_score = score
            best_path = out_dir / "best.ckpt"
            save_checkpoint(best_path, model, optimizer, config, rng, step, {"epoch": epoch, "score": score})

    final_path = None
    if out_dir is not None:
        final_path = out_dir / "final.ckpt"
        save_checkpoint(final_path, model, optimizer, config, rng, step, {"epoch": config.epochs - 1})
        write_metrics_csv(out_dir / "metrics.csv", rows)
    return TrainResult(model, optimizer, rows, epoch_eval, final_path, best_path, step)
