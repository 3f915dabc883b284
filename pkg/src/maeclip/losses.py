"""Contrastive and generative objectives, their weighted combination, and masking."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .nn import ConfigError

PATCH_NORM_EPS = 1e-6


# -- contrastive ----------------------------------------------------------------------------


def _inverse_temperature(sigma) -> Tensor:
    if isinstance(sigma, Tensor):
        return sigma
    if sigma <= 0:
        raise ConfigError("temperature must be positive")
    return Tensor(np.asarray(1.0 / sigma))


def contrastive_loss(x: Tensor, y: Tensor, inv_temp) -> tuple[Tensor, Tensor, Tensor]:
    """Symmetric InfoNCE over a batch of paired, unit-norm embeddings.

    ``inv_temp`` is ``1/sigma`` either as a Tensor (learnable) or a positive
    float given as ``sigma`` via :func:`contrastive_loss_sigma`. Returns
    ``(l_i2t, l_t2i, l_c)`` with ``l_c`` their mean.
    """
    if x.shape[0] == 0:
        raise ad.DimensionError("contrastive loss on an empty batch")
    if x.shape != y.shape:
        raise ad.DimensionError(f"embedding shapes differ: {x.shape} vs {y.shape}")
    n = x.shape[0]
    logits = (x @ ad.swapaxes(y, 0, 1)) * inv_temp
    targets = np.arange(n)
    l_i2t = ad.softmax_cross_entropy(logits, targets)
    l_t2i = ad.softmax_cross_entropy(ad.swapaxes(logits, 0, 1), targets)
    return l_i2t, l_t2i, ad.scale(l_i2t + l_t2i, 0.5)


def contrastive_loss_sigma(x: Tensor, y: Tensor, sigma: float):
    return contrastive_loss(x, y, _inverse_temperature(sigma))


def sharded_contrastive_loss(x: Tensor, y: Tensor, inv_temp, world_size: int, scope: str):
    """Contrastive loss under simulated data parallelism.

    ``scope == "local"`` evaluates the loss independently inside each of
    ``world_size`` contiguous batch shards and averages; ``"global"`` uses the
    whole batch, equivalent to all-gathering the shard embeddings.
    """
    if scope == "global" or world_size == 1:
        return contrastive_loss(x, y, inv_temp)
    if scope != "local":
        raise ValueError(f"unknown contrastive scope {scope!r}")
    n = x.shape[0]
    if n % world_size:
        raise ConfigError(f"batch {n} is not divisible by world_size {world_size}")
    per = n // world_size
    parts = [contrastive_loss(x[k * per:(k + 1) * per], y[k * per:(k + 1) * per], inv_temp)
             for k in range(world_size)]
    w = 1.0 / world_size
    l_i2t = ad.scale(_add_all([p[0] for p in parts]), w)
    l_t2i = ad.scale(_add_all([p[1] for p in parts]), w)
    return l_i2t, l_t2i, ad.scale(l_i2t + l_t2i, 0.5)


def _add_all(ts: Sequence[Tensor]) -> Tensor:
    out = ts[0]
    for t in ts[1:]:
        out = out + t
    return out


# -- generative -----------------------------------------------------------------------------


def patch_normalize(target, eps: float = PATCH_NORM_EPS) -> np.ndarray:
    """Per-patch ``(t - mean) / (std + eps)`` over the last axis, population std."""
    if eps <= 0:
        raise ConfigError("eps must be positive")
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    mu = t.mean(axis=-1, keepdims=True)
    sd = t.std(axis=-1, keepdims=True)
    centered = t - mu
    # a rounded mean leaves ~1e-17 residue on constant patches; those are exactly flat
    centered[np.broadcast_to(np.ptp(t, axis=-1, keepdims=True) == 0, t.shape)] = 0.0
    return centered / (sd + eps)


def gen_image_loss(preds: Tensor, targets, normalize: bool = True, eps: float = PATCH_NORM_EPS) -> Tensor:
    """Mean squared error over every pixel value of every masked patch."""
    t = np.asarray(targets.data if isinstance(targets, Tensor) else targets)
    if preds.shape != t.shape:
        raise ad.DimensionError(f"predictions {preds.shape} vs targets {t.shape}")
    if normalize:
        t = patch_normalize(t, eps)
    diff = preds - Tensor(t.astype(preds.dtype))
    return ad.mean(ad.square(diff))


def gen_text_loss(logits: Tensor, targets) -> Tensor:
    """Cross-entropy over the vocabulary at masked token positions."""
    return ad.softmax_cross_entropy(logits, targets)


@dataclass
class LossBreakdown:
    l_i2t: float
    l_t2i: float
    l_c: float
    l_gen_i: float
    l_gen_t: float
    w_i: float
    w_t: float
    total: float
    tensor: Optional[Tensor] = field(default=None, repr=False, compare=False)

    def as_row(self) -> tuple:
        return (self.l_i2t, self.l_t2i, self.l_gen_i, self.l_gen_t, self.total)


def _value(x) -> float:
    return float(x.data) if isinstance(x, Tensor) else float(x)


def total_loss(l_i2t, l_t2i, l_gen_i, l_gen_t, w_i: float, w_t: float) -> LossBreakdown:
    """``0.5 (l_t2i + l_i2t) + w_i l_gen_i + w_t l_gen_t``.

    Components may be Tensors (the weighted total is then differentiable and
    kept on ``.tensor``) or plain floats.
    """
    if w_i < 0 or w_t < 0:
        raise ConfigError(f"loss weights must be non-negative, got w_i={w_i}, w_t={w_t}")
    parts = [l_i2t, l_t2i, l_gen_i, l_gen_t]
    l_c_val = 0.5 * (_value(l_i2t) + _value(l_t2i))
    total_val = l_c_val + w_i * _value(l_gen_i) + w_t * _value(l_gen_t)
    tensor = None
    if any(isinstance(p, Tensor) for p in parts):
        acc = ad.scale(ad.as_tensor(l_i2t) + ad.as_tensor(l_t2i), 0.5)
        if isinstance(l_gen_i, Tensor) and w_i:
            acc = acc + ad.scale(l_gen_i, w_i)
        if isinstance(l_gen_t, Tensor) and w_t:
            acc = acc + ad.scale(l_gen_t, w_t)
        tensor = acc
        total_val = float(acc.data)
    return LossBreakdown(
        l_i2t=_value(l_i2t), l_t2i=_value(l_t2i), l_c=l_c_val,
        l_gen_i=_value(l_gen_i), l_gen_t=_value(l_gen_t),
        w_i=float(w_i), w_t=float(w_t), total=total_val, tensor=tensor,
    )


# -- masking --------------------------------------------------------------------------------


@dataclass(frozen=True)
class MaskSpec:
    modality: str
    kept: np.ndarray
    masked: np.ndarray

    @property
    def total(self) -> int:
        return len(self.kept) + len(self.masked)

    def __eq__(self, other):
        return (isinstance(other, MaskSpec) and self.modality == other.modality
                and np.array_equal(self.kept, other.kept) and np.array_equal(self.masked, other.masked))

    def __hash__(self):
        return hash((self.modality, self.kept.tobytes(), self.masked.tobytes()))


def _check_ratio(ratio: float) -> None:
    if not 0.0 < ratio < 1.0:
        raise ConfigError(f"mask ratio must lie in (0, 1), got {ratio}")


def n_masked(n_positions: int, ratio: float) -> int:
    return int(round(ratio * n_positions))


def _spec(modality: str, n_positions: int, masked: np.ndarray) -> MaskSpec:
    masked = np.sort(np.asarray(masked, dtype=np.int64))
    kept = np.setdiff1d(np.arange(n_positions), masked)
    return MaskSpec(modality, kept, masked)


def random_mask(n_positions: int, ratio: float, rng: np.random.Generator, modality: str = "image",
                candidates: Optional[np.ndarray] = None) -> MaskSpec:
    """Mask a uniformly random subset of ``round(ratio * n)`` positions.

    ``candidates`` restricts the maskable positions (the others are always
    kept); ``n`` then counts the candidates.
    """
    _check_ratio(ratio)
    pool = np.arange(n_positions) if candidates is None else np.asarray(candidates, dtype=np.int64)
    k = n_masked(len(pool), ratio)
    chosen = pool[rng.permutation(len(pool))[:k]]
    return _spec(modality, n_positions, chosen)


def similarity_mask(scores, ratio: float, highest: bool = True, modality: str = "image",
                    candidates: Optional[np.ndarray] = None, n_positions: Optional[int] = None) -> MaskSpec:
    """Mask the ``round(ratio * n)`` highest-scoring positions (lowest with ``highest=False``).

    Ties go to the lower index first.
    """
    _check_ratio(ratio)
    scores = np.asarray(scores.data if isinstance(scores, Tensor) else scores, dtype=np.float64)
    n_positions = len(scores) if n_positions is None else n_positions
    pool = np.arange(len(scores)) if candidates is None else np.asarray(candidates, dtype=np.int64)
    k = n_masked(len(pool), ratio)
    vals = scores[pool]
    order = np.argsort(-vals if highest else vals, kind="stable")
    return _spec(modality, n_positions, pool[order[:k]])


def elementwise_similarity(feats, emb, eps: float = ad.L2_EPS) -> np.ndarray:
    """Cosine similarity of each row of ``feats [s, d]`` (or ``[B, s, d]``) with ``emb [d]`` (or ``[B, d]``)."""
    f = np.asarray(feats.data if isinstance(feats, Tensor) else feats, dtype=np.float64)
    e = np.asarray(emb.data if isinstance(emb, Tensor) else emb, dtype=np.float64)
    fn = f / np.maximum(np.linalg.norm(f, axis=-1, keepdims=True), eps)
    en = e / np.maximum(np.linalg.norm(e, axis=-1, keepdims=True), eps)
    return np.einsum("...sd,...d->...s", fn, en)
