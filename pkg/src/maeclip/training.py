"""Optimisation loop: dual-pass losses, AdamW, warmup+cosine schedule, contrastive scope, checkpoints."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .config import RunConfig, TrainConfig, parse_config
from .data import PairBatch, PairRecord, collate, epoch_order, random_resized_crop
from .losses import (
    LossBreakdown,
    elementwise_similarity,
    gen_image_loss,
    gen_text_loss,
    random_mask,
    sharded_contrastive_loss,
    similarity_mask,
    total_loss,
)
from .model import MAECLIP, stack_indices, text_mask_candidates
from .nn import LayerNorm, Module

logger = logging.getLogger(__name__)

LOG_HEADER = "step\tlr\tl_i2t\tl_t2i\tl_gen_i\tl_gen_t\ttotal"


# -- schedule / scope ---------------------------------------------------------------------------


def lr_schedule(step: int, config: TrainConfig) -> float:
    """Linear warmup from 0 to ``base_lr``, then cosine decay to 0 at ``steps``."""
    if step < 0 or step > config.steps:
        raise ValueError(f"step {step} outside [0, {config.steps}]")
    if config.warmup_steps and step < config.warmup_steps:
        return config.base_lr * step / config.warmup_steps
    progress = (step - config.warmup_steps) / (config.steps - config.warmup_steps)
    return config.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))


def contrastive_scope(step: int, config: TrainConfig) -> str:
    return "local" if step < config.local_contrastive_steps else "global"


def phase_weights(step: int, config: TrainConfig) -> tuple[float, float]:
    """Generative loss weights in effect at ``step``; a plain sum during the local phase."""
    if config.mode != "mae_clip":
        return 0.0, 0.0
    if contrastive_scope(step, config) == "local" and config.local_phase_weights == "sum":
        return 1.0, 1.0
    return config.w_i, config.w_t


# -- AdamW --------------------------------------------------------------------------------------


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def named_modules(module: Module, prefix: str = ""):
    yield prefix.rstrip("."), module
    for key, value in vars(module).items():
        if isinstance(value, Module):
            yield from named_modules(value, f"{prefix}{key}.")
        elif isinstance(value, (list, tuple)):
            for i, item in enumerate(value):
                if isinstance(item, Module):
                    yield from named_modules(item, f"{prefix}{key}.{i}.")


def no_decay_names(model: Module) -> set[str]:
    """Layernorm gains/biases and the temperature are not weight-decayed."""
    names = {"logit_scale"}
    for prefix, mod in named_modules(model):
        if isinstance(mod, LayerNorm):
            names.update({f"{prefix}.gain", f"{prefix}.bias"})
    return names


def adamw_update(params: dict[str, ad.Parameter], state: OptimizerState, lr: float, config: TrainConfig,
                 no_decay: frozenset | set = frozenset(), lr_scale: Optional[dict[str, float]] = None) -> None:
    """One AdamW step with bias correction and decoupled decay ``p <- p (1 - lr wd)``.

    Parameters whose ``grad`` is None are left untouched.
    """
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if not np.isfinite(g).all():
            raise ad.NumericError(f"non-finite gradient for {name} at optimizer step {t}")
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.m[name], state.v[name] = m, v
        step_lr = lr * (lr_scale.get(name, 1.0) if lr_scale else 1.0)
        data = p.data
        if name not in no_decay and config.weight_decay:
            data = data * (1.0 - step_lr * config.weight_decay)
        p.data = (data - step_lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)).astype(p.dtype)


# -- losses for one step --------------------------------------------------------------------------


@dataclass
class StepMasks:
    image: list
    text: list


def _draw_masks(model: MAECLIP, batch: PairBatch, config: TrainConfig, rng: np.random.Generator,
                img_full: Optional[ad.Tensor] = None, txt_full: Optional[ad.Tensor] = None,
                x: Optional[ad.Tensor] = None, y: Optional[ad.Tensor] = None) -> StepMasks:
    mc = model.config
    B, n = len(batch), mc.n_patches
    use_sim = config.masking == "similarity" and img_full is not None
    if use_sim:
        # scores are constants: projected per-position features against the other modality's embedding
        img_scores = elementwise_similarity(img_full.data @ model.image_proj.weight.data, y.data)
        txt_scores = elementwise_similarity(txt_full.data @ model.text_proj.weight.data, x.data)
    image, text = [], []
    for b in range(B):
        L = int(batch.lengths[b])
        cand = text_mask_candidates(L)
        if use_sim:
            image.append(similarity_mask(img_scores[b], mc.mask_ratio, config.similarity_highest, "image"))
            text.append(similarity_mask(txt_scores[b, :L], mc.text_mask_ratio, config.similarity_highest,
                                        "text", candidates=cand, n_positions=L))
        else:
            image.append(random_mask(n, mc.mask_ratio, rng, "image"))
            text.append(random_mask(L, mc.text_mask_ratio, rng, "text", candidates=cand))
    return StepMasks(image, text)


def generative_losses(model: MAECLIP, batch: PairBatch, masks: StepMasks, normalize: bool = True):
    """Second pass: encoders on visible positions only, then the cross-modal decoder."""
    img_kept, _ = stack_indices(masks.image, "kept")
    txt_kept, txt_kv = stack_indices(masks.text, "kept")
    img_feats = model.encode_image(batch.patches, img_kept)
    txt_feats, _ = model.encode_text(batch.tokens, batch.lengths, txt_kept, txt_kv)
    patch_preds, token_logits = model.decode_cross_modal(
        img_feats, txt_feats, masks.image, masks.text, batch.lengths, txt_kv)
    img_masked, _ = stack_indices(masks.image, "masked")
    targets = np.take_along_axis(batch.patches, img_masked[..., None], axis=1)
    token_targets = np.concatenate([batch.tokens[b, m.masked] for b, m in enumerate(masks.text)])
    return gen_image_loss(patch_preds, targets, normalize), gen_text_loss(token_logits, token_targets)


def forward_losses(model: MAECLIP, batch: PairBatch, step: int, config: TrainConfig,
                   rng: np.random.Generator, masks: Optional[StepMasks] = None):
    """All loss components for one step as Tensors.

    Returns ``(l_i2t, l_t2i, l_gen_i, l_gen_t, masks)``; the generative terms
    are ``0.0`` when the mode skips the generative pass.
    """
    scope = contrastive_scope(step, config)
    inv_t = model.inverse_temperature()
    if config.mode == "masked_clip":
        masks = masks or _draw_masks(model, batch, config, rng)
        img_kept, _ = stack_indices(masks.image, "kept")
        txt_kept, txt_kv = stack_indices(masks.text, "kept")
        x = model.embed_image_features(model.encode_image(batch.patches, img_kept))
        txt_feats, valid = model.encode_text(batch.tokens, batch.lengths, txt_kept, txt_kv)
        y = model.embed_text_features(txt_feats, valid)
        l_i2t, l_t2i, _ = sharded_contrastive_loss(x, y, inv_t, config.world_size, scope)
        return l_i2t, l_t2i, 0.0, 0.0, masks

    img_full = model.encode_image(batch.patches)
    txt_full, valid = model.encode_text(batch.tokens, batch.lengths)
    x = model.embed_image_features(img_full)
    y = model.embed_text_features(txt_full, valid)
    l_i2t, l_t2i, _ = sharded_contrastive_loss(x, y, inv_t, config.world_size, scope)
    if config.mode == "clip":
        return l_i2t, l_t2i, 0.0, 0.0, None

    masks = masks or _draw_masks(model, batch, config, rng, img_full, txt_full, x, y)
    l_gen_i, l_gen_t = generative_losses(model, batch, masks, config.norm_pix_loss)
    return l_i2t, l_t2i, l_gen_i, l_gen_t, masks


def train_step(model: MAECLIP, batch: PairBatch, step: int, config: TrainConfig, state: OptimizerState,
               rng: np.random.Generator, no_decay: Optional[set] = None) -> LossBreakdown:
    """Both passes, one backward over the weighted total, one AdamW update."""
    model.zero_grad()
    l_i2t, l_t2i, l_gen_i, l_gen_t, _ = forward_losses(model, batch, step, config, rng)
    w_i, w_t = phase_weights(step, config)
    breakdown = total_loss(l_i2t, l_t2i, l_gen_i, l_gen_t, w_i, w_t)
    if not math.isfinite(breakdown.total):
        raise ad.NumericError(f"non-finite loss at step {step}")
    breakdown.tensor.backward()
    breakdown.tensor = None  # release the graph
    lr = lr_schedule(step, config)
    params = dict(model.named_parameters())
    adamw_update(params, state, lr, config, no_decay_names(model) if no_decay is None else no_decay)
    return breakdown


# -- trainer ------------------------------------------------------------------------------------


class Trainer:
    """Owns the model, optimizer state, RNG and data order for one run."""

    def __init__(self, run: RunConfig, records: Sequence[PairRecord], model: Optional[MAECLIP] = None):
        self.run = run
        self.config = run.train_config()
        self.records = list(records)
        if not self.records:
            raise ValueError("training needs at least one record")
        self.model = model or MAECLIP(run.model_config(), np.random.default_rng(run.seed))
        self.state = OptimizerState()
        self.rng = np.random.default_rng([run.seed, 1])
        self.step = 0
        self._no_decay = no_decay_names(self.model)
        self._orders: dict[int, np.ndarray] = {}

    def batch_indices(self, step: int) -> np.ndarray:
        n, B = len(self.records), self.config.batch_size
        out = np.empty(B, dtype=np.int64)
        for i in range(B):
            epoch, j = divmod(step * B + i, n)
            if epoch not in self._orders:
                # keep only the previous epoch around; batches straddle at most one boundary
                self._orders = {k: v for k, v in self._orders.items() if k == epoch - 1}
                self._orders[epoch] = epoch_order(n, self.config.seed, epoch)
            out[i] = self._orders[epoch][j]
        return out

    def batch_for_step(self, step: int) -> PairBatch:
        recs = [self.records[i] for i in self.batch_indices(step)]
        mc = self.model.config
        images = None
        if self.config.augment:
            images = [random_resized_crop(r.image, self.rng, (self.config.crop_scale_min, 1.0)) for r in recs]
        return collate(recs, mc.patch_size, mc.text_encoder.max_seq, self.model.dtype, images)

    def train_step(self) -> LossBreakdown:
        batch = self.batch_for_step(self.step)
        out = train_step(self.model, batch, self.step, self.config, self.state, self.rng, self._no_decay)
        self.step += 1
        return out

    def fit(self, until: Optional[int] = None, on_step: Optional[Callable] = None) -> list[LossBreakdown]:
        until = self.config.steps if until is None else until
        history = []
        while self.step < until:
            step = self.step
            lr = lr_schedule(step, self.config)
            lb = self.train_step()
            history.append(lb)
            if on_step is not None:
                on_step(step, lr, lb)
        return history

    # -- persistence ------------------------------------------------------------------------

    def save(self, path) -> None:
        save_checkpoint(path, self.model, self.state, self.run, self.rng, self.step)

    @classmethod
    def load(cls, path, records: Sequence[PairRecord]) -> "Trainer":
        tensors = ckpt.read_tensors(path)
        run = config_from_tensors(tensors)
        trainer = cls(run, records)
        restore_model(trainer.model, tensors)
        trainer.state = optimizer_state_from_tensors(tensors)
        trainer.step = int(tensors["train/step"])
        trainer.rng = ckpt.decode_rng_state(tensors["rng/state"])
        return trainer


def config_from_tensors(tensors: dict[str, np.ndarray]) -> RunConfig:
    if "meta/config" not in tensors:
        raise ckpt.CheckpointFormatError("checkpoint lacks 'meta/config'")
    return parse_config(ckpt.decode_text(tensors["meta/config"]))


def restore_model(model: MAECLIP, tensors: dict[str, np.ndarray]) -> None:
    names = {n for n, _ in model.named_parameters()}
    missing = sorted(names - set(tensors))
    if missing:
        raise ckpt.CheckpointFormatError(f"checkpoint is missing parameter '{missing[0]}'")
    model.load_state_dict({n: tensors[n] for n in names})


def optimizer_state_from_tensors(tensors: dict[str, np.ndarray]) -> OptimizerState:
    state = OptimizerState(step=int(tensors.get("opt/step", 0)))
    for name, arr in tensors.items():
        if name.startswith("opt/m/"):
            state.m[name[6:]] = arr
        elif name.startswith("opt/v/"):
            state.v[name[6:]] = arr
    return state


def save_checkpoint(path, model: MAECLIP, state: Optional[OptimizerState] = None, run: Optional[RunConfig] = None,
                    rng: Optional[np.random.Generator] = None, step: int = 0) -> None:
    tensors = dict(model.state_dict())
    if state is not None:
        for name in sorted(state.m):
            tensors[f"opt/m/{name}"] = state.m[name]
            tensors[f"opt/v/{name}"] = state.v[name]
        tensors["opt/step"] = np.asarray(float(state.step))
    tensors["train/step"] = np.asarray(float(step))
    if rng is not None:
        tensors["rng/state"] = ckpt.encode_rng_state(rng)
    if run is not None:
        tensors["meta/config"] = ckpt.encode_text(run.to_text())
    ckpt.write_tensors(path, tensors)


def load_checkpoint(path) -> tuple[MAECLIP, OptimizerState, RunConfig]:
    """Rebuild the model and optimizer state stored at ``path``."""
    tensors = ckpt.read_tensors(path)
    run = config_from_tensors(tensors)
    model = MAECLIP(run.model_config(), np.random.default_rng(run.seed))
    restore_model(model, tensors)
    state = optimizer_state_from_tensors(tensors)
    return model, state, run


def format_log_row(step: int, lr: float, lb: LossBreakdown) -> str:
    return "\t".join([str(step), repr(lr)] + [repr(v) for v in lb.as_row()])
