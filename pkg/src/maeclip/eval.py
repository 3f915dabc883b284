"""Evaluation: prompt-ensembled zero-shot classification, linear probes, retrieval,
zero-shot segmentation and frozen-encoder VQA finetuning."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter, Tensor
from .config import TrainConfig
from .data import QAExample, fit_tokens, pad_token_lists, patchify, tokenize
from .model import MAECLIP
from .nn import ConfigError, Linear, Module, Transformer
from .training import OptimizerState, adamw_update

ClassName = Union[str, Sequence[str]]


class DegenerateTaskError(ValueError):
    """The evaluation task cannot discriminate anything (e.g. a single class)."""


# -- prompts ------------------------------------------------------------------------------------


_ARTICLE = re.compile(r"\ba \{\}")


def fill_template(template: str, name: str) -> str:
    """Fill the ``{}`` slot, turning ``a {}`` into ``an {}`` before a vowel."""
    if name[:1].lower() in "aeiou":
        template = _ARTICLE.sub("an {}", template)
    return template.replace("{}", name)


@dataclass
class PromptSet:
    templates: list[str]
    class_names: list[ClassName]
    background_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.templates:
            raise ConfigError("prompt set has no templates")
        for t in self.templates:
            if t.count("{}") != 1:
                raise ConfigError(f"template must contain exactly one '{{}}' slot: {t!r}")
        if not self.class_names:
            raise ConfigError("prompt set has no class names")

    def names_of(self, k: int) -> list[str]:
        name = self.class_names[k]
        return [name] if isinstance(name, str) else list(name)

    @classmethod
    def from_file(cls, path, class_names, background_names=()) -> "PromptSet":
        return cls(read_templates(path), list(class_names), list(background_names))


def read_templates(path) -> list[str]:
    """One template per line; blank lines and ``#`` comments are skipped."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [ln.strip() for ln in lines if ln.strip() and not ln.lstrip().startswith("#")]


def desk_templates() -> list[str]:
    text = resources.files("maeclip").joinpath("prompts").joinpath("desk.txt").read_text(encoding="utf-8")
    return [ln.strip() for ln in text.splitlines() if ln.strip()]


# -- embedding helpers --------------------------------------------------------------------------


def embed_captions(model: MAECLIP, captions: Sequence[str], vocab=None) -> np.ndarray:
    """Unit-norm text embeddings ``[n, embed_dim]`` for raw strings."""
    max_seq = model.config.text_encoder.max_seq
    tokens, lengths = pad_token_lists([fit_tokens(tokenize(c, vocab), max_seq) for c in captions])
    with ad.no_grad():
        return model.embed_texts(tokens, lengths).data.copy()


def embed_images(model: MAECLIP, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Unit-norm image embeddings ``[n, embed_dim]`` for ``[n, H, W, C]`` images."""
    images = np.asarray(images, dtype=model.dtype)
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            patches = patchify(images[i:i + batch_size], model.config.patch_size)
            out.append(model.embed_images(patches).data)
    return np.concatenate(out)


def pooled_image_features(model: MAECLIP, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Pooled (pre-projection) image encoder features for probing."""
    images = np.asarray(images, dtype=model.dtype)
    out = []
    with ad.no_grad():
        for i in range(0, len(images), batch_size):
            feats = model.encode_image(patchify(images[i:i + batch_size], model.config.patch_size))
            out.append(model.pool_image(feats).data)
    return np.concatenate(out)


def _unit(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.linalg.norm(x, axis=-1, keepdims=True), ad.L2_EPS)


def ensemble_embedding(model: MAECLIP, templates: Sequence[str], name: str, vocab=None) -> np.ndarray:
    """Normalise each filled template's embedding, average, renormalise."""
    embs = embed_captions(model, [fill_template(t, name) for t in templates], vocab)
    return _unit(_unit(embs).mean(axis=0))


def class_embeddings(prompts: PromptSet, model: MAECLIP, vocab=None) -> np.ndarray:
    """``[K, embed_dim]`` unit-norm class embeddings; multi-name classes average over all their prompts."""
    out = []
    for k in range(len(prompts.class_names)):
        filled = [fill_template(t, n) for n in prompts.names_of(k) for t in prompts.templates]
        out.append(_unit(_unit(embed_captions(model, filled, vocab)).mean(axis=0)))
    return np.stack(out)


# -- zero-shot classification ---------------------------------------------------------------------


@dataclass
class ZeroShotResult:
    predictions: np.ndarray
    accuracy: Optional[float]


def zero_shot_classify(image_embs: np.ndarray, class_embs: np.ndarray,
                       labels: Optional[np.ndarray] = None) -> ZeroShotResult:
    """Nearest class embedding by cosine similarity; ties go to the lowest class index."""
    sims = _unit(np.asarray(image_embs, dtype=np.float64)) @ np.asarray(class_embs, dtype=np.float64).T
    preds = np.argmax(sims, axis=1)
    acc = None if labels is None else float(np.mean(preds == np.asarray(labels)))
    return ZeroShotResult(preds, acc)


# -- linear probe ---------------------------------------------------------------------------------


@dataclass
class ProbeConfig:
    epochs: int = 40
    lr: float = 0.01
    weight_decay: float = 0.0
    seed: int = 0


@dataclass
class ProbeResult:
    accuracy: float
    train_accuracy: float
    weight: np.ndarray
    bias: np.ndarray


def linear_probe(train_x: np.ndarray, train_y: np.ndarray, test_x: np.ndarray, test_y: np.ndarray,
                 config: ProbeConfig = ProbeConfig()) -> ProbeResult:
    """Softmax regression on frozen features, full-batch AdamW, one step per epoch.

    Features are standardised with the training-set mean and population std.
    """
    train_x = np.asarray(train_x, dtype=np.float64)
    test_x = np.asarray(test_x, dtype=np.float64)
    train_y = np.asarray(train_y, dtype=np.int64)
    test_y = np.asarray(test_y, dtype=np.int64)
    if len(np.unique(train_y)) < 2:
        raise DegenerateTaskError("linear probe needs at least two classes in the training labels")
    K = int(max(train_y.max(), test_y.max() if len(test_y) else 0)) + 1
    mu = train_x.mean(axis=0)
    sd = train_x.std(axis=0) + 1e-8
    xs_train = (train_x - mu) / sd
    xs_test = (test_x - mu) / sd

    rng = np.random.default_rng(config.seed)
    w = Parameter(rng.normal(0.0, 0.01, size=(train_x.shape[1], K)), name="weight")
    b = Parameter(np.zeros(K), name="bias")
    opt_cfg = TrainConfig(steps=config.epochs + 1, warmup_steps=0, base_lr=config.lr,
                          weight_decay=config.weight_decay, beta2=0.999, adam_eps=1e-8)
    state = OptimizerState()
    inputs = Tensor(xs_train)
    for _ in range(config.epochs):
        w.grad = b.grad = None
        loss = ad.softmax_cross_entropy(inputs @ w + b, train_y)
        loss.backward()
        adamw_update({"weight": w, "bias": b}, state, config.lr, opt_cfg, no_decay={"bias"})

    def accuracy(xs, ys):
        if not len(ys):
            return float("nan")
        return float(np.mean(np.argmax(xs @ w.data + b.data, axis=1) == ys))

    return ProbeResult(accuracy(xs_test, test_y), accuracy(xs_train, train_y), w.data.copy(), b.data.copy())


# -- retrieval -----------------------------------------------------------------------------------


def match_ranks(sims: np.ndarray) -> np.ndarray:
    """Rank of the true match (the diagonal) in each row; equal scores rank the lower index first."""
    n = sims.shape[0]
    true = np.diag(sims)[:, None]
    greater = (sims > true).sum(axis=1)
    cols = np.arange(n)[None, :]
    ties_before = ((sims == true) & (cols < np.arange(n)[:, None])).sum(axis=1)
    return greater + ties_before


def retrieval_eval(img_embs: np.ndarray, txt_embs: np.ndarray, ks: Sequence[int] = (1, 5, 10)) -> dict[str, float]:
    """Recall@k in both directions; row ``i`` of each matrix is a true pair."""
    img = np.asarray(img_embs, dtype=np.float64)
    txt = np.asarray(txt_embs, dtype=np.float64)
    if img.shape[0] == 0:
        raise ValueError("retrieval over an empty set")
    if img.shape != txt.shape:
        raise ad.DimensionError(f"embedding shapes differ: {img.shape} vs {txt.shape}")
    sims = _unit(img) @ _unit(txt).T
    r_i2t = match_ranks(sims)
    r_t2i = match_ranks(sims.T)
    out = {}
    for k in ks:
        out[f"i2t_r@{k}"] = float(np.mean(r_i2t < k))
        out[f"t2i_r@{k}"] = float(np.mean(r_t2i < k))
    return out


# -- segmentation --------------------------------------------------------------------------------


def interpolate_patch_features(grid: np.ndarray, ys: np.ndarray, xs: np.ndarray, patch_size: int) -> np.ndarray:
    """Bilinearly sample ``grid [gh, gw, d]`` at pixel coordinates ``(ys, xs)``.

    Patch ``(r, c)`` sits at ``((r + 0.5) P, (c + 0.5) P)``; queries outside the
    hull of those anchors are clamped to the edge.
    """
    gh, gw = grid.shape[:2]
    u = np.clip(np.asarray(ys, dtype=np.float64) / patch_size - 0.5, 0.0, gh - 1)
    v = np.clip(np.asarray(xs, dtype=np.float64) / patch_size - 0.5, 0.0, gw - 1)
    r0 = np.minimum(np.floor(u).astype(np.int64), gh - 1)
    c0 = np.minimum(np.floor(v).astype(np.int64), gw - 1)
    r1 = np.minimum(r0 + 1, gh - 1)
    c1 = np.minimum(c0 + 1, gw - 1)
    fu = (u - r0)[..., None]
    fv = (v - c0)[..., None]
    top = grid[r0, c0] * (1 - fv) + grid[r0, c1] * fv
    bottom = grid[r1, c0] * (1 - fv) + grid[r1, c1] * fv
    return top * (1 - fu) + bottom * fu


def patch_embeddings(model: MAECLIP, image: np.ndarray) -> np.ndarray:
    """Per-patch features projected into the joint space, ``[grid, grid, embed_dim]``."""
    c = model.config
    with ad.no_grad():
        feats = model.encode_pixels(np.asarray(image, dtype=model.dtype))
        proj = model.image_proj(feats).data
    return proj.reshape(c.grid, c.grid, -1)


def label_pixels(pixel_feats: np.ndarray, class_name_embs: Sequence[np.ndarray],
                 background_embs: Optional[np.ndarray] = None) -> np.ndarray:
    """Label each pixel ``k + 1`` for its best class, or 0 when a background name wins.

    ``class_name_embs[k]`` holds one unit-norm embedding per name of class ``k``;
    a class scores the maximum similarity over its names.
    """
    f = _unit(pixel_feats)
    scores = np.stack([(f @ e.T).max(axis=-1) for e in class_name_embs], axis=-1)
    labels = np.argmax(scores, axis=-1) + 1
    if background_embs is not None and len(background_embs):
        bg = (f @ np.asarray(background_embs).T).max(axis=-1)
        labels = np.where(bg > scores.max(axis=-1), 0, labels)
    return labels


@dataclass
class SegmentResult:
    labels: np.ndarray
    per_class_iou: Optional[dict[int, float]] = None
    miou: Optional[float] = None


def zero_shot_segment(image: np.ndarray, prompts: PromptSet, model: MAECLIP, vocab=None,
                      gt: Optional[np.ndarray] = None) -> SegmentResult:
    """Pixel labels from interpolated per-patch features; IoU when ground truth ``gt`` is given.

    Labels: 0 background, ``k + 1`` for ``prompts.class_names[k]``.
    """
    grid = patch_embeddings(model, image)
    H, W = image.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64) + 0.5
    pixel_feats = interpolate_patch_features(grid, ys, xs, model.config.patch_size)
    per_class = [np.stack([ensemble_embedding(model, prompts.templates, n, vocab) for n in prompts.names_of(k)])
                 for k in range(len(prompts.class_names))]
    bg = None
    if prompts.background_names:
        bg = np.stack([ensemble_embedding(model, prompts.templates, n, vocab) for n in prompts.background_names])
    labels = label_pixels(pixel_feats, per_class, bg)
    if gt is None:
        return SegmentResult(labels)
    K = len(prompts.class_names) + 1
    ious = per_class_iou(labels, gt, K)
    return SegmentResult(labels, ious, float(np.mean(list(ious.values()))))


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, K: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64).ravel()
    gt = np.asarray(gt, dtype=np.int64).ravel()
    if pred.shape != gt.shape:
        raise ad.DimensionError(f"label maps differ in size: {pred.shape} vs {gt.shape}")
    for name, arr in (("prediction", pred), ("ground truth", gt)):
        if arr.size and (arr.min() < 0 or arr.max() >= K):
            raise IndexError(f"{name} label out of range [0, {K})")
    return np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)


def per_class_iou(pred: np.ndarray, gt: np.ndarray, K: int) -> dict[int, float]:
    """IoU for every class that occurs in the prediction or the ground truth."""
    cm = confusion_matrix(pred, gt, K)
    inter = np.diag(cm)
    union = cm.sum(axis=0) + cm.sum(axis=1) - inter
    return {k: float(inter[k] / union[k]) for k in range(K) if union[k] > 0}


def miou(pred: np.ndarray, gt: np.ndarray, K: int) -> float:
    """Mean IoU over classes present in either map."""
    ious = per_class_iou(pred, gt, K)
    if not ious:
        raise ValueError("mIoU of empty label maps")
    return float(np.mean(list(ious.values())))


# -- VQA finetuning ------------------------------------------------------------------------------


@dataclass
class FinetuneConfig:
    steps: int = 200
    batch_size: int = 32
    lr: float = 3e-3
    weight_decay: float = 0.05
    layer_decay: float = 0.65
    seed: int = 0
    unfreeze_encoders: bool = False


class VQADecoder(Module):
    """A fresh cross-modal decoder whose BOS-position output feeds an answer classifier."""

    def __init__(self, model: MAECLIP, n_answers: int, rng: np.random.Generator):
        c = model.config
        dt = model.dtype
        de = c.decoder
        self.dec_embed_image = Linear(c.image_encoder.width, de.width, rng, dtype=dt)
        self.dec_embed_text = Linear(c.text_encoder.width, de.width, rng, dtype=dt)
        self.modality_image = Parameter(rng.normal(0, 0.02, size=de.width), dtype=dt)
        self.modality_text = Parameter(rng.normal(0, 0.02, size=de.width), dtype=dt)
        self.dec_text_pos = Parameter(rng.normal(0, 0.02, size=(c.text_encoder.max_seq, de.width)), dtype=dt)
        self.decoder = Transformer(de, rng, dt)
        self.head = Linear(de.width, n_answers, rng, dtype=dt)
        self._pos = model._pos_decoder

    def __call__(self, img_feats: Tensor, txt_feats: Tensor, txt_valid: np.ndarray) -> Tensor:
        B, n = img_feats.shape[:2]
        L = txt_feats.shape[1]
        img = self.dec_embed_image(img_feats) + Tensor(self._pos) + self.modality_image
        txt = self.dec_embed_text(txt_feats) + ad.embedding(self.dec_text_pos, np.arange(L)) + self.modality_text
        valid = np.concatenate([np.ones((B, n), bool), txt_valid], axis=1)
        out = self.decoder(ad.concat([img, txt], axis=1), None if valid.all() else valid)
        bos = ad.reshape(out[:, n:n + 1], (B, out.shape[2]))
        return self.head(bos)


def layerwise_lr_scales(names: Sequence[str], depth: int, decay: float) -> dict[str, float]:
    """Decoder layer ``l`` (1-based) of ``depth`` gets ``decay**(depth - l)``.

    Input embeddings sit below layer 1 (``decay**depth``); the final norm and
    the answer head get the full rate.
    """
    out = {}
    for name in names:
        m = re.match(r"decoder\.layers\.(\d+)\.", name)
        if m:
            out[name] = decay ** (depth - (int(m.group(1)) + 1))
        elif name.startswith(("decoder.ln_final", "head")):
            out[name] = 1.0
        else:
            out[name] = decay ** depth
    return out


@dataclass
class VQAResult:
    head: VQADecoder
    answers: list[str]
    accuracy: float
    losses: list[float]


def _encode_qa(model: MAECLIP, examples: Sequence[QAExample], vocab=None):
    c = model.config
    images = np.stack([np.asarray(e.image, dtype=model.dtype) for e in examples])
    tokens, lengths = pad_token_lists(
        [fit_tokens(tokenize(e.question, vocab), c.text_encoder.max_seq) for e in examples])
    img_feats = model.encode_image(patchify(images, c.patch_size))
    txt_feats, valid = model.encode_text(tokens, lengths)
    return img_feats, txt_feats, valid


def vqa_predict(model: MAECLIP, head: VQADecoder, examples: Sequence[QAExample], vocab=None,
                batch_size: int = 64) -> np.ndarray:
    preds = []
    with ad.no_grad():
        for i in range(0, len(examples), batch_size):
            img, txt, valid = _encode_qa(model, examples[i:i + batch_size], vocab)
            preds.append(np.argmax(head(img, txt, valid).data, axis=1))
    return np.concatenate(preds)


def vqa_finetune(model: MAECLIP, train: Sequence[QAExample], answers: Sequence[str],
                 config: FinetuneConfig = FinetuneConfig(), test: Optional[Sequence[QAExample]] = None,
                 vocab=None) -> VQAResult:
    """Train a fresh decoder plus answer classifier on frozen encoders.

    Encoder parameters get ``requires_grad = False`` so they never receive a
    gradient; with ``unfreeze_encoders`` they train one decay step below the embeddings.
    """
    answers = list(answers)
    if not answers:
        raise ConfigError("empty answer vocabulary")
    index = {a: i for i, a in enumerate(answers)}
    missing = {e.answer for e in train} - set(index)
    if missing:
        raise ConfigError(f"answers outside the answer vocabulary: {sorted(missing)}")
    rng = np.random.default_rng(config.seed)
    head = VQADecoder(model, len(answers), rng)
    depth = model.config.decoder.depth
    params = dict(head.named_parameters())
    scales = layerwise_lr_scales(list(params), depth, config.layer_decay)
    frozen = not config.unfreeze_encoders
    enc = dict(model.encoder_parameters())
    for p in enc.values():
        p.requires_grad = not frozen
        p.grad = None
    if not frozen:
        for n, p in enc.items():
            params[f"encoder/{n}"] = p
            scales[f"encoder/{n}"] = config.layer_decay ** (depth + 1)

    opt_cfg = TrainConfig(steps=config.steps + 1, warmup_steps=0, base_lr=config.lr,
                          weight_decay=config.weight_decay)
    no_decay = {n for n in params if n.endswith(("gain", "bias"))}
    state = OptimizerState()
    labels = np.array([index[e.answer] for e in train], dtype=np.int64)
    cache = None
    if frozen:
        with ad.no_grad():
            cache = _encode_qa(model, train, vocab)
    losses = []
    try:
        for step in range(config.steps):
            idx = rng.choice(len(train), size=min(config.batch_size, len(train)), replace=False)
            if cache is not None:
                img = Tensor(cache[0].data[idx])
                txt = Tensor(cache[1].data[idx])
                valid = cache[2][idx]
            else:
                model.zero_grad()
                img, txt, valid = _encode_qa(model, [train[i] for i in idx], vocab)
            head.zero_grad()
            loss = ad.softmax_cross_entropy(head(img, txt, valid), labels[idx])
            loss.backward()
            losses.append(float(loss.data))
            adamw_update(params, state, config.lr, opt_cfg, no_decay, scales)
    finally:
        for p in enc.values():
            p.requires_grad = True
    evaluate_on = test if test is not None else train
    preds = vqa_predict(model, head, evaluate_on, vocab)
    truth = np.array([index.get(e.answer, -1) for e in evaluate_on])
    return VQAResult(head, answers, float(np.mean(preds == truth)), losses)


# -- reports -------------------------------------------------------------------------------------


_UNIT_INTERVAL = re.compile(r"(acc|accuracy|r@\d+|miou|iou)", re.IGNORECASE)


@dataclass
class EvalReport:
    metrics: dict[str, float]
    config_digest: str = ""
    checkpoint_digest: str = ""

    def __post_init__(self):
        for name, value in self.metrics.items():
            if _UNIT_INTERVAL.search(name) and not 0.0 <= value <= 1.0:
                raise ValueError(f"metric {name} = {value} lies outside [0, 1]")

    def to_text(self) -> str:
        lines = [f"{k}\t{v!r}" for k, v in self.metrics.items()]
        block = json.dumps({"metrics": self.metrics, "config_digest": self.config_digest,
                            "checkpoint_digest": self.checkpoint_digest}, sort_keys=True)
        return "\n".join(lines + ["---", block]) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalReport":
        block = text.split("\n---\n", 1)[1]
        data = json.loads(block)
        return cls(data["metrics"], data["config_digest"], data["checkpoint_digest"])
