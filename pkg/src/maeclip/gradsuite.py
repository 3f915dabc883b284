"""Finite-difference gradient checks for every op, every block and the full training loss."""

from __future__ import annotations

import time
import zlib
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import make_synthetic_pairs, collate
from .losses import (contrastive_loss, gen_image_loss, gen_text_loss, random_mask,
                     sharded_contrastive_loss, total_loss)
from .model import MAECLIPConfig, MAPPool, build_model, pool, text_mask_candidates
from .training import StepMasks, generative_losses
from .nn import MLP, LayerNorm, Linear, MultiHeadAttention, Transformer, TransformerConfig, TransformerLayer

TOLERANCES = {"ops": 1e-6, "blocks": 1e-4, "model": 1e-3}

# a case maps an rng to (scalar objective, parameters to check)
Case = Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]
# coordinates sampled per case; None checks every coordinate
SAMPLES = {"ops": None, "blocks": 64, "model": 32}


@dataclass
class CheckResult:
    scope: str
    name: str
    error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _leaf(rng, *shape, low=None, high=None) -> Parameter:
    data = rng.normal(size=shape) if low is None else rng.uniform(low, high, size=shape)
    return Parameter(data)


def _with_readout(build):
    """Wrap ``build(rng) -> (forward, params)`` into a scalar objective via fixed random weights."""
    def case(rng):
        forward, params = build(rng)
        w = Tensor(rng.normal(size=forward().shape))
        return (lambda: ad.sum(forward() * w)), params
    return case


# -- ops ---------------------------------------------------------------------------------------


def _unary(fn, shape=(3, 4), **leaf):
    def build(rng):
        a = _leaf(rng, *shape, **leaf)
        return (lambda: fn(a)), [a]
    return _with_readout(build)


def _binary(fn, shape_a=(3, 4), shape_b=(3, 4), **leaf):
    def build(rng):
        a, b = _leaf(rng, *shape_a), _leaf(rng, *shape_b, **leaf)
        return (lambda: fn(a, b)), [a, b]
    return _with_readout(build)


def _gather(rng):
    a = _leaf(rng, 2, 5, 3)
    idx = np.array([[4, 0, 0, 2], [1, 3, 3, 3]])
    return (lambda: ad.gather_rows(a, idx)), [a]


def _embedding(rng):
    table = _leaf(rng, 6, 3)
    ids = np.array([[0, 5, 5], [2, 0, 1]])
    return (lambda: ad.embedding(table, ids)), [table]


def _layernorm(rng):
    x, g, b = _leaf(rng, 3, 5), _leaf(rng, 5), _leaf(rng, 5)
    return (lambda: ad.layernorm(x, g, b)), [x, g, b]


def _xent(rng):
    logits = _leaf(rng, 4, 6)
    targets = np.array([0, 5, 2, 2])
    return (lambda: ad.softmax_cross_entropy(logits, targets)), [logits]


def _concat(rng):
    a, b = _leaf(rng, 2, 3), _leaf(rng, 2, 4)
    return (lambda: ad.concat([a, b], axis=1)), [a, b]


OP_CASES: dict[str, Case] = {
    "add": _binary(ad.add, shape_b=(4,)),
    "sub": _binary(ad.sub),
    "mul": _binary(ad.mul, shape_b=(1, 4)),
    "div": _binary(ad.div, low=0.5, high=2.0),
    "neg": _unary(ad.neg),
    "scale": _unary(lambda a: ad.scale(a, -1.7)),
    "matmul": _binary(ad.matmul, (2, 3, 4), (4, 5)),
    "exp": _unary(ad.exp),
    "log": _unary(ad.log, low=0.5, high=3.0),
    "gelu": _unary(ad.gelu),
    "square": _unary(ad.square),
    "sum": _unary(lambda a: ad.sum(a, axis=0)),
    "mean": _unary(lambda a: ad.mean(a, axis=1, keepdims=True)),
    "max": _unary(lambda a: ad.max(a, axis=1)),
    "minimum": _unary(lambda a: ad.minimum(ad.exp(a), 1.0), low=-2.0, high=-0.1),
    "reshape": _unary(lambda a: ad.reshape(a, (2, 6))),
    "transpose": _unary(lambda a: ad.transpose(a)),
    "swapaxes": _unary(lambda a: ad.swapaxes(a, 0, 1)),
    "broadcast_to": _unary(lambda a: ad.broadcast_to(a, (3, 4)), shape=(1, 4)),
    "concat": _with_readout(_concat),
    "slice": _unary(lambda a: a[1:, ::2]),
    "gather_rows": _with_readout(_gather),
    "embedding": _with_readout(_embedding),
    "softmax": _unary(lambda a: ad.softmax(a, axis=-1)),
    "log_softmax": _unary(lambda a: ad.log_softmax(a, axis=-1)),
    "layernorm": _with_readout(_layernorm),
    "l2_normalize": _unary(ad.l2_normalize),
    "softmax_cross_entropy": _with_readout(_xent),
}


# -- blocks ------------------------------------------------------------------------------------


def _params_of(module) -> list[Tensor]:
    return [p for _, p in module.named_parameters()]


def _randomized(module, rng, std: float = 0.3):
    """Move every parameter off its initial value so no check sits at a symmetric point."""
    for p in _params_of(module):
        p.data = p.data + rng.normal(0.0, std, size=p.shape)
    return module


def _block(make, x_shape=(2, 5, 8)):
    def build(rng):
        module = _randomized(make(rng), rng)
        x = _leaf(rng, *x_shape)
        return (lambda: module(x)), [x] + _params_of(module)
    return build


def _attention_masked(rng):
    attn = _randomized(MultiHeadAttention(8, 2, rng), rng)
    x = _leaf(rng, 2, 5, 8)
    valid = np.array([[1, 1, 1, 0, 0], [1, 1, 1, 1, 1]], bool)
    return (lambda: attn(x, key_valid=valid)), [x] + _params_of(attn)


def _attention_cross(rng):
    attn = _randomized(MultiHeadAttention(8, 2, rng), rng)
    x, kv = _leaf(rng, 2, 3, 8), _leaf(rng, 2, 4, 8)
    return (lambda: attn(x, kv)), [x, kv] + _params_of(attn)


def _pooling(strategy):
    def build(rng):
        mp = _randomized(MAPPool(8, 2, rng), rng) if strategy == "map" else None
        x = _leaf(rng, 2, 5, 8)
        valid = np.array([[1, 1, 1, 1, 0], [1, 1, 1, 1, 1]], bool)
        params = [x] + (_params_of(mp) if mp else [])
        return (lambda: pool(x, strategy, valid, mp)), params
    return build


def _contrastive(rng):
    x, y, s = _leaf(rng, 4, 6), _leaf(rng, 4, 6), Parameter(np.asarray(2.0))
    return (lambda: contrastive_loss(ad.l2_normalize(x), ad.l2_normalize(y), ad.exp(s))[2]), [x, y, s]


def _local_contrastive(rng):
    x, y = _leaf(rng, 4, 6), _leaf(rng, 4, 6)
    return (lambda: sharded_contrastive_loss(x, y, 3.0, 2, "local")[2]), [x, y]


def _gen_image(rng):
    preds, targets = _leaf(rng, 2, 3, 12), rng.normal(size=(2, 3, 12))
    return (lambda: gen_image_loss(preds, targets)), [preds]


def _gen_text(rng):
    logits = _leaf(rng, 5, 9)
    return (lambda: gen_text_loss(logits, np.array([1, 8, 3, 3, 0]))), [logits]


BLOCK_CASES: dict[str, Case] = {
    "linear": _with_readout(_block(lambda rng: Linear(8, 6, rng, std=0.3))),
    "layernorm": _with_readout(_block(lambda rng: LayerNorm(8))),
    "attention": _with_readout(_block(lambda rng: MultiHeadAttention(8, 2, rng))),
    "attention_masked": _with_readout(_attention_masked),
    "attention_cross": _with_readout(_attention_cross),
    "mlp": _with_readout(_block(lambda rng: MLP(8, 4, rng))),
    "transformer_layer": _with_readout(_block(lambda rng: TransformerLayer(8, 2, 4, rng, depth=1))),
    "transformer_depth4": _with_readout(_block(lambda rng: Transformer(TransformerConfig(4, 8, 2), rng))),
    "pool_map": _with_readout(_pooling("map")),
    "pool_gap": _with_readout(_pooling("gap")),
    "pool_max": _with_readout(_pooling("max")),
    "contrastive_loss": _with_readout(_contrastive),
    "local_contrastive_loss": _with_readout(_local_contrastive),
    "gen_image_loss": _with_readout(_gen_image),
    "gen_text_loss": _with_readout(_gen_text),
}


# -- full model ----------------------------------------------------------------------------------


def model_loss_case(rng: np.random.Generator, config: Optional[MAECLIPConfig] = None,
                    w_i: float = 0.1, w_t: float = 0.05):
    """The weighted training objective on a 2-pair batch with fixed masks."""
    config = config or MAECLIPConfig()
    model = build_model(config, int(rng.integers(2**31)))
    records = list(make_synthetic_pairs(int(rng.integers(2**31)), 2))
    batch = collate(records, config.patch_size, config.text_encoder.max_seq)
    masks = StepMasks(
        [random_mask(config.n_patches, config.mask_ratio, rng, "image") for _ in range(2)],
        [random_mask(int(n), config.text_mask_ratio, rng, "text", text_mask_candidates(n)) for n in batch.lengths],
    )

    def objective():
        pair = model.embed_pair(batch.patches, batch.tokens, batch.lengths)
        l_i2t, l_t2i, _ = contrastive_loss(pair.x, pair.y, model.inverse_temperature())
        l_gen_i, l_gen_t = generative_losses(model, batch, masks)
        return total_loss(l_i2t, l_t2i, l_gen_i, l_gen_t, w_i, w_t).tensor

    return objective, model.parameters()


MODEL_CASES: dict[str, Case] = {"mae_clip_loss": model_loss_case}


# -- runner --------------------------------------------------------------------------------------


class _FaultyIdentity:
    """Identity in the forward pass whose backward scales the gradient: a deliberate bug."""

    def __init__(self, factor: float = 1.5):
        self.factor = factor

    def __call__(self, t: Tensor) -> Tensor:
        return ad._record(t.data.copy(), [t], lambda g: (g * self.factor,), "faulty_identity")


def run_suite(scope: str, seed: int = 0, corrupt: bool = False) -> list[CheckResult]:
    """Run every registered case at ``scope`` (``ops``, ``blocks`` or ``model``)."""
    cases = {"ops": OP_CASES, "blocks": BLOCK_CASES, "model": MODEL_CASES}
    if scope not in cases:
        raise ValueError(f"unknown scope {scope!r}")
    fault = _FaultyIdentity() if corrupt else None
    results = []
    for name, case in cases[scope].items():
        rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
        f, params = case(rng)
        if fault is not None:
            f = (lambda inner: lambda: fault(inner()))(f)
        err = ad.grad_check(f, params, n_samples=SAMPLES[scope], rng=rng)
        results.append(CheckResult(scope, name, err, TOLERANCES[scope]))
    return results


def format_table(results: list[CheckResult]) -> str:
    lines = ["scope\tcheck\tmax_rel_err\ttolerance\tstatus"]
    for r in results:
        lines.append(f"{r.scope}\t{r.name}\t{r.error:.3e}\t{r.tolerance:.0e}\t{'PASS' if r.passed else 'FAIL'}")
    return "\n".join(lines)


def timed_suite(scopes=("ops", "blocks", "model"), seed: int = 0) -> tuple[list[CheckResult], float]:
    start = time.perf_counter()
    results = [r for s in scopes for r in run_suite(s, seed)]
    return results, time.perf_counter() - start
