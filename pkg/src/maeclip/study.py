"""Side-by-side comparison of training modes on held-out synthetic scenes."""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from . import eval as ev
from .config import RunConfig
from .data import SynthSpec, make_synthetic_pairs, synthetic_attributes, synthetic_label_map
from .model import MAECLIP
from .training import Trainer

STUDY_MODES = ("clip", "mae_clip", "masked_clip")
BACKGROUND_NAMES = ("background",)


@dataclass
class StudyData:
    train: list
    test: list
    spec: SynthSpec

    def labels(self, records, attribute: str) -> np.ndarray:
        names = list(getattr(self.spec, attribute + "s"))
        return np.array([names.index(synthetic_attributes(r.caption, self.spec)[attribute]) for r in records])


def make_study_data(seed: int, n_train: int = 512, n_test: int = 128, spec: Optional[SynthSpec] = None) -> StudyData:
    """Training pairs and a disjointly seeded held-out set."""
    spec = spec or SynthSpec()
    train = list(make_synthetic_pairs(seed, n_train, spec))
    test = list(make_synthetic_pairs(seed + 7919, n_test, spec))
    return StudyData(train, test, spec)


def evaluate_model(model: MAECLIP, data: StudyData, templates: Sequence[str], n_segment: int = 32) -> dict[str, float]:
    """Zero-shot, linear-probe, retrieval and segmentation metrics on the held-out set."""
    metrics: dict[str, float] = {}
    test_imgs = np.stack([r.image for r in data.test])
    train_imgs = np.stack([r.image for r in data.train])
    img_embs = ev.embed_images(model, test_imgs)

    for attribute in ("color", "shape"):
        names = list(getattr(data.spec, attribute + "s"))
        ce = ev.class_embeddings(ev.PromptSet(list(templates), names), model)
        zs = ev.zero_shot_classify(img_embs, ce, data.labels(data.test, attribute))
        metrics[f"zeroshot_{attribute}_acc"] = zs.accuracy
        probe = ev.linear_probe(ev.pooled_image_features(model, train_imgs), data.labels(data.train, attribute),
                                ev.pooled_image_features(model, test_imgs), data.labels(data.test, attribute))
        metrics[f"probe_{attribute}_acc"] = probe.accuracy

    txt_embs = ev.embed_captions(model, [r.caption for r in data.test])
    metrics.update({f"retrieval_{k}": v for k, v in ev.retrieval_eval(img_embs, txt_embs, (1, 5)).items()})

    colors = list(data.spec.colors)
    prompts = ev.PromptSet(list(templates), colors, list(BACKGROUND_NAMES))
    scores = []
    for rec in data.test[:n_segment]:
        gt = synthetic_label_map(rec.image, colors)
        scores.append(ev.zero_shot_segment(rec.image, prompts, model, gt=gt).miou)
    metrics["segment_miou"] = float(np.mean(scores))
    return metrics


@dataclass
class StudyReport:
    modes: tuple
    metrics: dict[str, dict[str, float]]            # mode -> metric -> value
    final_losses: dict[str, dict[str, float]] = field(default_factory=dict)

    def consistency_problems(self) -> list[str]:
        """Violations of the report's internal invariants (empty when consistent)."""
        problems = []
        for mode, values in self.metrics.items():
            for name, v in values.items():
                if not 0.0 <= v <= 1.0:
                    problems.append(f"{mode}: {name} = {v} outside [0, 1]")
            for attribute in ("color", "shape"):
                zs, probe = values[f"zeroshot_{attribute}_acc"], values[f"probe_{attribute}_acc"]
                if probe < zs:
                    problems.append(f"{mode}: probe {attribute} accuracy {probe} below zero-shot {zs}")
        return problems

    def to_text(self) -> str:
        names = list(next(iter(self.metrics.values())))
        lines = ["metric\t" + "\t".join(self.modes)]
        for name in names:
            lines.append(name + "\t" + "\t".join(f"{self.metrics[m][name]:.6f}" for m in self.modes))
        for loss in ("l_c", "l_gen_i", "l_gen_t"):
            lines.append(f"final_{loss}\t" + "\t".join(f"{self.final_losses[m][loss]:.6f}" for m in self.modes))
        problems = self.consistency_problems()
        lines.append("consistent\t" + ("yes" if not problems else "no"))
        lines.extend(f"# {p}" for p in problems)
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _tail_mean(history, attr: str, n: int = 50) -> float:
    return float(np.mean([getattr(lb, attr) for lb in history[-n:]]))


def run_study(run: RunConfig, data: StudyData, modes: Sequence[str] = STUDY_MODES,
              templates: Optional[Sequence[str]] = None,
              on_mode: Optional[Callable[[str, Trainer], None]] = None) -> StudyReport:
    """Train one model per mode from the same seed and data, then evaluate each."""
    templates = list(templates or ev.desk_templates())
    metrics, losses = {}, {}
    for mode in modes:
        trainer = Trainer(run.replace(mode=mode), data.train)
        history = trainer.fit()
        losses[mode] = {a: _tail_mean(history, a) for a in ("l_c", "l_gen_i", "l_gen_t")}
        metrics[mode] = evaluate_model(trainer.model, data, templates)
        if on_mode is not None:
            on_mode(mode, trainer)
    return StudyReport(tuple(modes), metrics, losses)
