import hashlib
import math

import numpy as np
import pytest

from dualvision import storage
from dualvision.config import BOS_ID, EOS_ID, PAD_ID, ModelConfig
from dualvision.data import generate_dataset
from dualvision.errors import ConfigError, ContractError, DataError, NumericError
from dualvision.experiments import features_in_memory
from dualvision.model import FEATURE_GROUPS, DualVisionModel, group_of
from dualvision.nn import Parameter
from dualvision.tensor import Tape, Tensor, backward
from dualvision.training import (
    AdamW,
    FreezePlan,
    Schedule,
    TrainConfig,
    caption_loss,
    cosine_lr,
    load_checkpoint,
    load_features,
    precompute_features,
    save_checkpoint,
    train,
)

SMALL = ModelConfig(
    d_vision=16, d_query=8, d_scene=8, d_model=16, n_queries=4, n_frames=4, n_layers=2, n_heads=2, max_len=8
)


@pytest.fixture(scope="module")
def small_data():
    manifest, clips = generate_dataset(seed=0, n_films=3, scenes_per_film=8)
    features = features_in_memory(manifest, clips, SMALL, seed=0)
    return manifest, clips, features


def _config(**kw):
    base = dict(seed=0, epochs=1, batch_size=4, lr=1e-3, model=SMALL)
    base.update(kw)
    return TrainConfig(**base)


# -- loss ----------------------------------------------------------------------------
def test_uniform_logits_give_log_vocab():
    loss = caption_loss(Tensor(np.zeros((2, 5, 64), np.float32)), np.full((2, 5), 7))
    assert loss.item() == pytest.approx(math.log(64), abs=1e-6)
    assert math.log(64) == pytest.approx(4.1589, abs=1e-4)


def test_confident_correct_logits_give_near_zero_loss():
    targets = np.array([[4, 5, EOS_ID]])
    logits = np.zeros((1, 3, 10), np.float32)
    logits[0, np.arange(3), targets[0]] = 50.0
    assert caption_loss(Tensor(logits), targets).item() < 1e-6


def test_pad_tail_leaves_loss_unchanged():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((1, 4, 10)).astype(np.float32)
    targets = np.array([[4, 5, 6, EOS_ID]])
    padded_logits = np.concatenate([logits, rng.standard_normal((1, 3, 10)).astype(np.float32)], axis=1)
    padded_targets = np.concatenate([targets, np.full((1, 3), PAD_ID)], axis=1)
    a = caption_loss(Tensor(logits), targets).item()
    b = caption_loss(Tensor(padded_logits), padded_targets).item()
    assert a == pytest.approx(b, rel=1e-6)


def test_all_pad_targets_is_contract_error():
    with pytest.raises(ContractError):
        caption_loss(Tensor(np.zeros((1, 3, 10), np.float32)), np.zeros((1, 3), int))


# -- optimizer -----------------------------------------------------------------------
def _param(value):
    p = Parameter(np.array(value, np.float32))
    return [("p", p)], p


def test_adamw_zero_grad_no_decay_is_noop():
    named, p = _param([1.0, -2.0])
    opt = AdamW(named, weight_decay=0.0)
    p.grad = np.zeros(2, np.float32)
    opt.step(0.1)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])


def test_adamw_first_step_hand_value():
    named, p = _param([1.0])
    opt = AdamW(named, weight_decay=0.0)
    p.grad = np.array([1.0], np.float32)
    opt.step(0.1)
    assert p.data[0] == pytest.approx(0.9, abs=1e-6)
    assert opt.step_count == 1 and opt.m["p"].shape == p.shape


def test_adamw_decoupled_decay():
    named, p = _param([2.0])
    opt = AdamW(named, weight_decay=0.5)
    p.grad = np.zeros(1, np.float32)
    opt.step(0.1)
    assert p.data[0] == pytest.approx(2.0 - 0.1 * 0.5 * 2.0, abs=1e-7)


def test_adamw_nan_gradient_names_parameter():
    named, p = _param([1.0])
    opt = AdamW(named)
    p.grad = np.array([np.nan], np.float32)
    with pytest.raises(NumericError, match="'p'"):
        opt.step(0.1)
    assert opt.step_count == 0


# -- schedule ------------------------------------------------------------------------
def test_cosine_examples():
    s = Schedule(total_steps=100)
    assert cosine_lr(0, s) == pytest.approx(3e-5)
    assert cosine_lr(50, s) == pytest.approx(1.5e-5)
    assert cosine_lr(100, s) == 0.0
    for bad in (-1, 101):
        with pytest.raises(ContractError):
            cosine_lr(bad, s)


def test_cosine_warmup_and_monotone_decay():
    s = Schedule(total_steps=50, base_lr=1.0, warmup_steps=10)
    lrs = [cosine_lr(i, s) for i in range(51)]
    assert lrs[:10] == pytest.approx([(i + 1) / 10 for i in range(10)])
    assert lrs[10] == pytest.approx(1.0)
    assert all(b <= a for a, b in zip(lrs[10:], lrs[11:]))
    assert lrs[-1] == pytest.approx(0.0, abs=1e-12)
    with pytest.raises(ConfigError):
        Schedule(total_steps=10, warmup_steps=10)


# -- freezing ------------------------------------------------------------------------
def _hash(model, groups):
    h = hashlib.sha256()
    for name, p in sorted(model.named_parameters()):
        if group_of(name) in groups:
            h.update(p.data.tobytes())
    return h.hexdigest()


def test_freeze_plan_defaults_and_errors():
    model = DualVisionModel(SMALL)
    trainable = {name for name, _ in FreezePlan().apply(model)}
    assert trainable and all(group_of(n) in ("frame_projection", "scene_projection", "decoder") for n in trainable)
    frozen = [p for n, p in model.named_parameters() if n not in trainable]
    assert frozen and not any(p.requires_grad for p in frozen)
    with pytest.raises(ConfigError):
        FreezePlan(frozenset({"nonexistent"}))


def test_training_keeps_frozen_groups_and_moves_trainable(small_data):
    manifest, _, features = small_data
    model = DualVisionModel(SMALL, seed=0)
    frozen_groups = set(FEATURE_GROUPS) | {"token_embedding"}
    before = _hash(model, frozen_groups)
    snapshot = {n: p.data.copy() for n, p in model.named_parameters()}
    result = train(manifest, _config(), features=features, model=model)
    assert _hash(result.model, frozen_groups) == before
    changed = {group_of(n) for n, p in result.model.named_parameters() if not np.array_equal(p.data, snapshot[n])}
    assert changed == {"frame_projection", "scene_projection", "decoder"}


def test_one_step_moves_every_trainable_group(small_data):
    manifest, _, features = small_data
    config = _config(
        trainable=("frame_projection", "scene_projection", "decoder", "token_embedding"), batch_size=8, weight_decay=0.0
    )
    model = DualVisionModel(SMALL, seed=0)
    snapshot = {n: p.data.copy() for n, p in model.named_parameters()}
    result = train(manifest, config, features=features, model=model)
    assert result.step == 1
    moved = {group_of(n) for n, p in model.named_parameters() if not np.array_equal(p.data, snapshot[n])}
    assert moved == set(config.trainable)


def test_end_to_end_trains_branch_internals(small_data):
    manifest, clips, _ = small_data
    config = _config(trainable=("scene_encoder", "scene_projection", "decoder"), end_to_end=True, batch_size=8)
    model = DualVisionModel(SMALL, seed=0)
    snapshot = {n: p.data.copy() for n, p in model.named_parameters()}
    train(manifest, config, clips=clips, model=model)
    moved = {group_of(n) for n, p in model.named_parameters() if not np.array_equal(p.data, snapshot[n])}
    assert "scene_encoder" in moved and "frame_encoder" not in moved
    with pytest.raises(ConfigError):
        train(manifest, _config(trainable=("scene_encoder",)), features=small_data[2])


# -- features ------------------------------------------------------------------------
def test_missing_features_listed(small_data):
    manifest, _, features = small_data
    partial = dict(features)
    gone = sorted(partial)[:2]
    for cid in gone:
        del partial[cid]
    with pytest.raises(DataError) as err:
        train(manifest, _config(), features=partial)
    for cid in gone:
        assert cid in str(err.value)


def test_precompute_cache_round_trip(tmp_path, small_data):
    manifest, clips, features = small_data
    from dualvision.data import write_dataset

    write_dataset(tmp_path / "data", manifest, clips)
    model = DualVisionModel(SMALL, seed=0)
    report = precompute_features(model, manifest, tmp_path / "data" / "clips", tmp_path / "feat")
    assert len(report["computed"]) == len(manifest) and not report["failed"]
    again = precompute_features(model, manifest, tmp_path / "data" / "clips", tmp_path / "feat")
    assert len(again["skipped"]) == len(manifest)
    loaded = load_features(tmp_path / "feat", [r.clip_id for r in manifest], report["fingerprint"])
    cid = manifest.records[0].clip_id
    np.testing.assert_array_equal(loaded[cid].frame, features[cid].frame)
    assert loaded[cid].frame.shape == (SMALL.n_queries, SMALL.d_query)
    assert loaded[cid].scene.shape == (1, SMALL.d_scene)
    with pytest.raises(DataError, match="ghost"):
        load_features(tmp_path / "feat", ["ghost"])
    other = DualVisionModel(SMALL, seed=1)
    with pytest.raises(DataError):
        load_features(tmp_path / "feat", [cid], other.feature_fingerprint())


def test_unreadable_clip_is_reported_not_fatal(tmp_path, small_data):
    manifest, clips, _ = small_data
    from dualvision.data import write_dataset

    write_dataset(tmp_path / "data", manifest, clips)
    victim = manifest.records[3].clip_id
    (tmp_path / "data" / "clips" / f"{victim}.clip").write_bytes(b"garbage")
    report = precompute_features(DualVisionModel(SMALL), manifest, tmp_path / "data" / "clips", tmp_path / "feat")
    assert list(report["failed"]) == [victim]
    assert len(report["computed"]) == len(manifest) - 1


# -- checkpoints ---------------------------------------------------------------------
def test_checkpoint_runs_are_bit_identical(tmp_path, small_data):
    manifest, _, features = small_data
    for run in ("a", "b"):
        train(manifest, _config(epochs=2), features=features, out_dir=tmp_path / run)
    for name in ("final.ckpt", "best.ckpt", "metrics.csv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_checkpoint_round_trip_bytes(tmp_path, small_data):
    manifest, _, features = small_data
    result = train(manifest, _config(), features=features, out_dir=tmp_path)
    ckpt = load_checkpoint(result.final_path)
    assert ckpt.step == result.step
    save_checkpoint(tmp_path / "again.ckpt", ckpt.model, ckpt.optimizer, ckpt.config, ckpt.rng, ckpt.step, ckpt.meta["extra"])
    assert (tmp_path / "again.ckpt").read_bytes() == result.final_path.read_bytes()
    # centring statistics travel with the weights
    np.testing.assert_array_equal(ckpt.model.centering.frame_mean.data, result.model.centering.frame_mean.data)


def test_checkpoint_resume_matches_state(tmp_path, small_data):
    manifest, _, features = small_data
    result = train(manifest, _config(), features=features, out_dir=tmp_path)
    ckpt = load_checkpoint(result.final_path)
    for (n, a), (_, b) in zip(result.model.named_parameters(), ckpt.model.named_parameters()):
        assert np.array_equal(a.data, b.data), n
        assert a.requires_grad == b.requires_grad
    assert ckpt.optimizer.step_count == result.optimizer.step_count


def test_checkpoint_config_mismatch_fails_loudly(tmp_path, small_data):
    manifest, _, features = small_data
    result = train(manifest, _config(), features=features, out_dir=tmp_path)
    with pytest.raises(ConfigError, match="d_model"):
        load_checkpoint(result.final_path, expect=ModelConfig())
    tensors, meta = storage.load(result.final_path)
    meta["format_version"] = 99
    storage.save(tmp_path / "future.ckpt", tensors, meta)
    with pytest.raises(DataError):
        load_checkpoint(tmp_path / "future.ckpt")
    model = DualVisionModel(ModelConfig())
    with pytest.raises(Exception):
        model.load_state_dict({k: v for k, v in tensors.items() if not k.startswith("optim.")})


def test_metrics_log_columns(tmp_path, small_data):
    manifest, _, features = small_data
    result = train(manifest, _config(), features=features, out_dir=tmp_path)
    lines = (tmp_path / "metrics.csv").read_text().splitlines()
    assert lines[0] == "step,lr,loss"
    assert len(lines) == result.step + 1


def test_train_config_round_trip_and_validation():
    cfg = _config(trainable=("decoder",))
    assert TrainConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({**cfg.to_dict(), "momentum": 0.9})
    with pytest.raises(ConfigError):
        TrainConfig(lr=0)


def test_gradient_flow_per_group():
    model = DualVisionModel(SMALL, seed=0)
    FreezePlan().apply(model)
    f = Tensor(np.random.default_rng(0).standard_normal((2, SMALL.n_queries, SMALL.d_query)).astype(np.float32))
    s = Tensor(np.random.default_rng(1).standard_normal((2, 1, SMALL.d_scene)).astype(np.float32))
    tokens = np.array([[BOS_ID, 5, 6, EOS_ID], [BOS_ID, 7, EOS_ID, PAD_ID]])
    with Tape():
        loss = caption_loss(model(f, s, tokens[:, :-1]), tokens[:, 1:])
    backward(loss)
    nonzero = set()
    for name, p in model.named_parameters():
        if not p.requires_grad:
            assert p.grad is None, name
        elif np.abs(p.grad).sum() > 0:
            nonzero.add(group_of(name))
        else:
            # one scene key: attention weights are constantly 1, so its
            # query and key projections get exactly zero gradient
            assert "cross_scene.attn.q_proj" in name or "cross_scene.attn.k_proj" in name, name
    assert nonzero == {"frame_projection", "scene_projection", "decoder"}
