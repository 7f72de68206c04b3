"""Finite-difference cases: one per differentiable operation, plus composites.

Each builder returns ``(loss_fn, params)`` with float64 parameters.  The loss
is a weighted sum so that every output entry receives a distinct upstream
gradient.
"""
import numpy as np

from dualvision import functional as fn
from dualvision import tensor as T
from dualvision.config import BOS_ID, ModelConfig
from dualvision.model import DualVisionModel
from dualvision.tensor import Tensor
from dualvision.training import caption_loss


def _p(rng, *shape, low=None, high=None):
    if low is not None:
        data = rng.uniform(low, high, size=shape)
    else:
        data = rng.standard_normal(shape)
    return Tensor(data.astype(np.float64), requires_grad=True)


def _probe(out: Tensor, seed: int = 99) -> Tensor:
    w = np.random.default_rng(seed).standard_normal(out.shape)
    return T.sum_(out * Tensor(w))


def _unary(op, **kw):
    def build(rng):
        a = _p(rng, 4, 30, **kw)
        return (lambda: _probe(op(a))), [a]

    return build


def _binary(op, shape_b=(4, 30), **kw):
    def build(rng):
        a = _p(rng, 4, 30)
        b = _p(rng, *shape_b, **kw)
        return (lambda: _probe(op(a, b))), [a, b]

    return build


def _matmul(rng):
    a, b = _p(rng, 2, 5, 6), _p(rng, 6, 7)
    return (lambda: _probe(T.matmul(a, b))), [a, b]


def _softmax(rng):
    a = _p(rng, 3, 4, 12)
    return (lambda: _probe(fn.softmax(a, axis=-1))), [a]


def _log_softmax(rng):
    a = _p(rng, 3, 4, 12)
    return (lambda: _probe(fn.log_softmax(a, axis=1))), [a]


def _layer_norm(rng):
    x, g, b = _p(rng, 3, 5, 16), _p(rng, 16), _p(rng, 16)
    return (lambda: _probe(fn.layer_norm(x, g, b))), [x, g, b]


def _embedding(rng):
    table = _p(rng, 20, 8)
    ids = rng.integers(0, 20, size=(3, 7))
    return (lambda: _probe(fn.embedding(table, ids))), [table]


def _cross_entropy(rng):
    logits = _p(rng, 3, 6, 10)
    targets = rng.integers(0, 10, size=(3, 6))
    targets[0, -2:] = 0
    return (lambda: fn.cross_entropy(logits, targets, ignore_index=0)), [logits]


def _conv(rng):
    x, w, b = _p(rng, 2, 7, 5), _p(rng, 3, 5, 4), _p(rng, 4)
    return (lambda: _probe(fn.conv1d_time(x, w, b))), [x, w, b]


def _transpose_reshape(rng):
    a = _p(rng, 3, 4, 10)
    return (lambda: _probe(T.reshape(T.transpose(a, (2, 0, 1)), (10, 12)))), [a]


def _concat(rng):
    a, b = _p(rng, 3, 4, 5), _p(rng, 3, 2, 5)
    return (lambda: _probe(T.concat([a, b], axis=1))), [a, b]


def _reductions(rng):
    a = _p(rng, 4, 5, 6)
    return (lambda: _probe(T.sum_(a, axis=1)) + _probe(T.mean(a, axis=(0, 2)), 7)), [a]


def _slice_roll(rng):
    a = _p(rng, 3, 8, 6)
    return (lambda: _probe(T.roll(a[:, :, 1:4], 2, axis=1))), [a]


def _masked_fill(rng):
    a = _p(rng, 6, 6)
    mask = np.tril(np.ones((6, 6), bool))
    return (lambda: _probe(fn.softmax(T.masked_fill(a, ~mask, -np.inf)))), [a]


def _broadcast(rng):
    a = _p(rng, 5)
    return (lambda: _probe(fn.broadcast_to(a, (3, 4, 5)))), [a]


def _scalar_ops(rng):
    a = _p(rng, 4, 30, low=0.5, high=2.0)
    return (lambda: _probe(2.5 * a - 1.0 + a / 3.0 - (1.0 / a))), [a]


def tiny_config(**kw) -> ModelConfig:
    base = dict(
        height=8, width=8, patch=4, n_frames=4, d_vision=8, d_query=8, d_scene=8, d_model=8,
        n_queries=4, n_heads=2, ffn_expansion=2, n_layers=2, vocab_size=12, max_len=8,
    )
    base.update(kw)
    return ModelConfig(**base)


def full_model_case(mode: str = "fs"):
    """Pixels -> both branches -> decoder -> caption loss, all in float64."""

    def build(rng):
        cfg = tiny_config(fusion=mode)
        model = DualVisionModel(cfg, seed=3).to(np.float64)
        params = model.parameters()
        for p in params:
            p.requires_grad = True
        frames = Tensor(rng.standard_normal((2, cfg.n_frames, 3, cfg.height, cfg.width)))
        tokens = rng.integers(3, cfg.vocab_size, size=(2, 6))
        tokens[:, 0] = BOS_ID
        tokens[1, -1] = 0

        def loss():
            f, s = model.visual_features(frames)
            return caption_loss(model(f, s, tokens[:, :-1]), tokens[:, 1:])

        return loss, params

    return build


CASES = {
    "add": _binary(T.add),
    "add_broadcast": _binary(T.add, shape_b=(30,)),
    "sub": _binary(T.sub, shape_b=(1, 30)),
    "mul": _binary(T.mul),
    "div": _binary(T.div, low=0.5, high=2.0),
    "scalar_ops": _scalar_ops,
    "power": _unary(lambda a: T.power(a, 2.5), low=0.5, high=2.0),
    "square": _unary(lambda a: T.power(a, 2.0)),
    "exp": _unary(T.exp),
    "log": _unary(T.log, low=0.5, high=2.0),
    "sqrt": _unary(T.sqrt, low=0.5, high=2.0),
    "tanh": _unary(T.tanh),
    "gelu": _unary(fn.gelu),
    "matmul": _matmul,
    "softmax": _softmax,
    "log_softmax": _log_softmax,
    "layer_norm": _layer_norm,
    "embedding": _embedding,
    "cross_entropy": _cross_entropy,
    "conv1d_time": _conv,
    "transpose_reshape": _transpose_reshape,
    "concat": _concat,
    "sum_mean": _reductions,
    "slice_roll": _slice_roll,
    "masked_softmax": _masked_fill,
    "broadcast_to": _broadcast,
    "full_model_fs": full_model_case("fs"),
    "full_model_sf": full_model_case("sf"),
    "full_model_concat": full_model_case("concat"),
}
