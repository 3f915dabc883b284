"""The MAE-CLIP architecture: two encoders, pooled projections, temperature, cross-modal decoder."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .data import patchify
from .losses import MaskSpec
from .nn import (
    INIT_STD,
    NEG_INF,
    ConfigError,
    Linear,
    Module,
    Transformer,
    TransformerConfig,
    key_bias,
    pos_encoding_2d,
    _split_heads,
)

POOLINGS = ("map", "gap", "max")


class LengthError(ValueError):
    """Token sequence longer than the configured maximum."""


@dataclass
class MAECLIPConfig:
    image_size: int = 32
    patch_size: int = 8
    channels: int = 3
    image_encoder: TransformerConfig = field(default_factory=lambda: TransformerConfig(2, 64, 4))
    text_encoder: TransformerConfig = field(
        default_factory=lambda: TransformerConfig(2, 64, 4, vocab_size=260, max_seq=64))
    decoder: TransformerConfig = field(default_factory=lambda: TransformerConfig(2, 64, 4))
    embed_dim: int = 64
    pooling: str = "map"
    temperature_init: float = 0.07
    max_inverse_temperature: float = 100.0
    mask_ratio: float = 0.75
    text_mask_ratio: float = 0.75
    loss_weights: tuple = (0.1, 0.05)
    dtype: str = "float64"

    def __post_init__(self):
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if not 0.0 < self.mask_ratio < 1.0 or not 0.0 < self.text_mask_ratio < 1.0:
            raise ConfigError("mask ratios must lie in (0, 1)")
        if self.temperature_init <= 0:
            raise ConfigError("temperature_init must be positive")
        if self.pooling not in POOLINGS:
            raise ConfigError(f"pooling must be one of {POOLINGS}, got {self.pooling!r}")
        if self.text_encoder.vocab_size < 5 or self.text_encoder.max_seq < 2:
            raise ConfigError("text encoder needs vocab_size and max_seq")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def n_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * self.channels


@dataclass
class EmbeddingPair:
    x: Tensor   # image embeddings [N, embed_dim]
    y: Tensor   # text embeddings [N, embed_dim]


class MAPPool(Module):
    """Attention pooling with one learned query.

    Keys are projected per head; the values are the raw features, so the
    output is a per-head convex combination of the input rows.
    """

    def __init__(self, width: int, heads: int, rng: np.random.Generator, dtype=np.float64):
        self.heads = heads
        self.query = Parameter(rng.normal(0.0, INIT_STD, size=width), dtype=dtype)
        self.key = Linear(width, width, rng, bias=False, dtype=dtype)

    def __call__(self, feats: Tensor, valid: Optional[np.ndarray] = None) -> Tensor:
        B, S, D = feats.shape
        h = self.heads
        dh = D // h
        k = _split_heads(self.key(feats), h)                 # [B, h, S, dh]
        q = ad.reshape(self.query, (1, h, 1, dh))
        scores = ad.scale(q @ ad.swapaxes(k, -1, -2), 1.0 / math.sqrt(dh))  # [B, h, 1, S]
        bias = key_bias(valid, feats.dtype)
        if bias is not None:
            scores = scores + Tensor(bias)
        attn = ad.softmax(scores, axis=-1)
        out = attn @ _split_heads(feats, h)                  # [B, h, 1, dh]
        return ad.reshape(out, (B, D))


def pool(feats: Tensor, strategy: str, valid: Optional[np.ndarray] = None,
         map_pool: Optional[MAPPool] = None) -> Tensor:
    """Reduce ``[B, S, D]`` (or ``[S, D]``) features to one row per sample."""
    squeeze = feats.ndim == 2
    if squeeze:
        feats = ad.reshape(feats, (1,) + feats.shape)
        valid = None if valid is None else np.asarray(valid)[None]
    if feats.shape[1] == 0:
        raise ad.DimensionError("cannot pool an empty feature set")
    if strategy == "gap":
        if valid is None:
            out = ad.mean(feats, axis=1)
        else:
            w = np.asarray(valid, dtype=feats.dtype)
            w = w / w.sum(axis=1, keepdims=True)
            out = ad.sum(feats * Tensor(w[..., None]), axis=1)
    elif strategy == "max":
        if valid is not None:
            feats = feats + Tensor(np.where(np.asarray(valid), 0.0, NEG_INF)[..., None])
        out = ad.max(feats, axis=1)
    elif strategy == "map":
        if map_pool is None:
            raise ConfigError("MAP pooling needs its attention module")
        out = map_pool(feats, valid)
    else:
        raise ConfigError(f"unknown pooling {strategy!r}")
    return ad.reshape(out, out.shape[1:]) if squeeze else out


def _restore_index(kept: np.ndarray, kept_valid: np.ndarray, total: int) -> np.ndarray:
    """Map each position to its row in ``concat([kept_rows, filler_rows])``."""
    B, K = kept.shape
    restore = np.tile(np.arange(total) + K, (B, 1))
    for b in range(B):
        k = int(kept_valid[b].sum())
        restore[b, kept[b, :k]] = np.arange(k)
    return restore


def stack_indices(masks: Sequence[MaskSpec], attr: str) -> tuple[np.ndarray, np.ndarray]:
    """Pad per-sample index lists into ``[B, K]`` plus a validity mask."""
    rows = [getattr(m, attr) for m in masks]
    K = max((len(r) for r in rows), default=0)
    idx = np.zeros((len(rows), K), dtype=np.int64)
    valid = np.zeros((len(rows), K), dtype=bool)
    for b, r in enumerate(rows):
        idx[b, : len(r)] = r
        valid[b, : len(r)] = True
    return idx, valid


class MAECLIP(Module):
    def __init__(self, config: MAECLIPConfig, rng: np.random.Generator):
        self.config = config
        dt = np.dtype(config.dtype)
        ie, te, de = config.image_encoder, config.text_encoder, config.decoder
        V = te.vocab_size

        self.patch_embed = Linear(config.patch_dim, ie.width, rng, dtype=dt)
        self.image_encoder = Transformer(ie, rng, dt)
        self.token_embed = Parameter(rng.normal(0, INIT_STD, size=(V, te.width)), dtype=dt)
        self.text_pos = Parameter(rng.normal(0, INIT_STD, size=(te.max_seq, te.width)), dtype=dt)
        self.text_encoder = Transformer(te, rng, dt)
        if config.pooling == "map":
            self.image_pool = MAPPool(ie.width, ie.heads, rng, dt)
            self.text_pool = MAPPool(te.width, te.heads, rng, dt)
        self.image_proj = Linear(ie.width, config.embed_dim, rng, bias=False, dtype=dt)
        self.text_proj = Linear(te.width, config.embed_dim, rng, bias=False, dtype=dt)
        self.logit_scale = Parameter(np.asarray(math.log(1.0 / config.temperature_init)), dtype=dt)

        self.dec_embed_image = Linear(ie.width, de.width, rng, dtype=dt)
        self.dec_embed_text = Linear(te.width, de.width, rng, dtype=dt)
        self.mask_token_image = Parameter(rng.normal(0, INIT_STD, size=de.width), dtype=dt)
        self.mask_token_text = Parameter(rng.normal(0, INIT_STD, size=de.width), dtype=dt)
        self.modality_image = Parameter(rng.normal(0, INIT_STD, size=de.width), dtype=dt)
        self.modality_text = Parameter(rng.normal(0, INIT_STD, size=de.width), dtype=dt)
        self.dec_text_pos = Parameter(rng.normal(0, INIT_STD, size=(te.max_seq, de.width)), dtype=dt)
        self.decoder = Transformer(de, rng, dt)
        self.pixel_head = Linear(de.width, config.patch_dim, rng, dtype=dt)
        self.token_head = Linear(de.width, V, rng, dtype=dt)

        self._pos_image = pos_encoding_2d(config.grid, config.grid, ie.width).table.astype(dt)
        self._pos_decoder = pos_encoding_2d(config.grid, config.grid, de.width).table.astype(dt)

    @property
    def dtype(self):
        return np.dtype(self.config.dtype)

    # -- parameter groups -----------------------------------------------------------------

    def encoder_parameters(self) -> list[tuple[str, Parameter]]:
        skip = ("dec_", "mask_token_", "modality_", "decoder.", "pixel_head", "token_head")
        return [(n, p) for n, p in self.named_parameters() if not n.startswith(skip)]

    def decoder_parameters(self) -> list[tuple[str, Parameter]]:
        enc = {n for n, _ in self.encoder_parameters()}
        return [(n, p) for n, p in self.named_parameters() if n not in enc]

    # -- encoders -------------------------------------------------------------------------

    def inverse_temperature(self) -> Tensor:
        return ad.minimum(ad.exp(self.logit_scale), self.config.max_inverse_temperature)

    def encode_image(self, patches: np.ndarray, kept: Optional[np.ndarray] = None) -> Tensor:
        """Encode ``[B, n, patch_dim]`` patches; with ``kept [B, k]`` only those patches are read."""
        patches = np.asarray(patches, dtype=self.dtype)
        if patches.ndim != 3 or patches.shape[1:] != (self.config.n_patches, self.config.patch_dim):
            raise ad.DimensionError(
                f"expected patches [B, {self.config.n_patches}, {self.config.patch_dim}], got {patches.shape}")
        pos = self._pos_image
        if kept is not None:
            kept = np.asarray(kept, dtype=np.int64)
            patches = np.take_along_axis(patches, kept[..., None], axis=1)
            pos = pos[kept]
        x = self.patch_embed(Tensor(patches)) + Tensor(pos)
        return self.image_encoder(x)

    def encode_pixels(self, image: np.ndarray, visible: Optional[MaskSpec] = None) -> Tensor:
        """Single ``[H, W, C]`` image to ``[s, width]`` features."""
        c = self.config
        image = np.asarray(image)
        if image.shape != (c.image_size, c.image_size, c.channels):
            raise ad.DimensionError(
                f"expected image {(c.image_size, c.image_size, c.channels)}, got {image.shape}")
        kept = None if visible is None else visible.kept[None]
        feats = self.encode_image(patchify(image, c.patch_size)[None], kept)
        return ad.reshape(feats, feats.shape[1:])

    def _check_tokens(self, tokens: np.ndarray) -> None:
        te = self.config.text_encoder
        if tokens.shape[-1] > te.max_seq:
            raise LengthError(f"sequence length {tokens.shape[-1]} exceeds max_seq {te.max_seq}")
        if tokens.size and (tokens.min() < 0 or tokens.max() >= te.vocab_size):
            raise IndexError(f"token id out of range [0, {te.vocab_size})")

    def encode_text(self, tokens: np.ndarray, lengths: Optional[np.ndarray] = None,
                    kept: Optional[np.ndarray] = None, kept_valid: Optional[np.ndarray] = None
                    ) -> tuple[Tensor, np.ndarray]:
        """Encode padded ``[B, L]`` token ids; returns features and their row-validity mask."""
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim == 1:
            tokens = tokens[None]
        self._check_tokens(tokens)
        B, L = tokens.shape
        lengths = np.full(B, L) if lengths is None else np.asarray(lengths)
        if kept is None:
            positions = np.tile(np.arange(L), (B, 1))
            valid = positions < lengths[:, None]
        else:
            positions = np.asarray(kept, dtype=np.int64)
            valid = np.ones(positions.shape, bool) if kept_valid is None else np.asarray(kept_valid)
        ids = np.take_along_axis(tokens, positions, axis=1)
        x = ad.embedding(self.token_embed, ids) + ad.embedding(self.text_pos, positions)
        key_valid = None if valid.all() else valid
        return self.text_encoder(x, key_valid), valid

    # -- pooled embeddings ----------------------------------------------------------------

    def pool_image(self, feats: Tensor, valid=None) -> Tensor:
        return pool(feats, self.config.pooling, valid, getattr(self, "image_pool", None))

    def pool_text(self, feats: Tensor, valid=None) -> Tensor:
        return pool(feats, self.config.pooling, valid, getattr(self, "text_pool", None))

    def embed_image_features(self, feats: Tensor, valid=None) -> Tensor:
        return ad.l2_normalize(self.image_proj(self.pool_image(feats, valid)))

    def embed_text_features(self, feats: Tensor, valid=None) -> Tensor:
        return ad.l2_normalize(self.text_proj(self.pool_text(feats, valid)))

    def embed_images(self, patches: np.ndarray) -> Tensor:
        return self.embed_image_features(self.encode_image(patches))

    def embed_texts(self, tokens: np.ndarray, lengths=None) -> Tensor:
        feats, valid = self.encode_text(tokens, lengths)
        return self.embed_text_features(feats, valid)

    def embed_pair(self, patches: np.ndarray, tokens: np.ndarray, lengths=None) -> EmbeddingPair:
        """Encode, pool, project and normalise both modalities."""
        return EmbeddingPair(self.embed_images(patches), self.embed_texts(tokens, lengths))

    # -- decoder --------------------------------------------------------------------------

    def decode_cross_modal(self, img_feats: Tensor, txt_feats: Tensor,
                           img_masks: Sequence[MaskSpec], txt_masks: Sequence[MaskSpec],
                           lengths: np.ndarray, txt_kept_valid: Optional[np.ndarray] = None
                           ) -> tuple[Tensor, Tensor]:
        """Reconstruct masked patches and tokens from the visible-position features.

        Returns ``patch_preds [B, m_i, patch_dim]`` and ``token_logits
        [sum of m_t, vocab]`` (row-major over samples, then masked positions).
        """
        c = self.config
        B, n = img_feats.shape[0], c.n_patches
        lengths = np.asarray(lengths, dtype=np.int64)
        L = int(lengths.max())
        img_kept, img_kv = stack_indices(img_masks, "kept")
        img_masked, _ = stack_indices(img_masks, "masked")
        txt_kept, txt_kv = stack_indices(txt_masks, "kept")
        if img_kept.shape[1] != img_feats.shape[1] or not img_kv.all():
            raise ad.ContractError("image features do not match the image masks' kept positions")
        if txt_kept.shape[1] != txt_feats.shape[1]:
            raise ad.ContractError("text features do not match the text masks' kept positions")
        if any(m.total != n for m in img_masks) or any(
                m.total != int(l) for m, l in zip(txt_masks, lengths)):
            raise ad.ContractError("mask sizes do not match the inputs")
        wd = c.decoder.width

        e_img = self.dec_embed_image(img_feats)
        filler = ad.broadcast_to(ad.reshape(self.mask_token_image, (1, 1, wd)), (B, n, wd))
        img_seq = ad.gather_rows(ad.concat([e_img, filler], axis=1),
                                 _restore_index(img_kept, img_kv, n))
        img_seq = img_seq + Tensor(self._pos_decoder) + self.modality_image

        e_txt = self.dec_embed_text(txt_feats)
        filler = ad.broadcast_to(ad.reshape(self.mask_token_text, (1, 1, wd)), (B, L, wd))
        txt_seq = ad.gather_rows(ad.concat([e_txt, filler], axis=1),
                                 _restore_index(txt_kept, txt_kv, L))
        txt_seq = txt_seq + ad.embedding(self.dec_text_pos, np.arange(L)) + self.modality_text

        joint = ad.concat([img_seq, txt_seq], axis=1)
        valid = np.concatenate([np.ones((B, n), bool), np.arange(L)[None] < lengths[:, None]], axis=1)
        out = self.decoder(joint, None if valid.all() else valid)

        patch_preds = self.pixel_head(ad.gather_rows(out, img_masked))
        S = n + L
        flat = np.concatenate([b * S + n + m.masked for b, m in enumerate(txt_masks)]).astype(np.int64)
        rows = ad.gather_rows(ad.reshape(out, (1, B * S, wd)), flat[None])
        token_logits = ad.reshape(self.token_head(rows), (len(flat), c.text_encoder.vocab_size))
        return patch_preds, token_logits


def text_mask_candidates(length: int) -> np.ndarray:
    """Maskable text positions: everything except BOS (first) and EOS (last)."""
    return np.arange(1, max(int(length) - 1, 1))


def build_model(config: MAECLIPConfig, seed: int) -> MAECLIP:
    return MAECLIP(config, np.random.default_rng(seed))
