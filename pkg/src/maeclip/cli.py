"""``maeclip`` command line: synth, train, eval, gradcheck, study.

Exit codes: 0 success, 1 runtime or numeric failure, 2 usage or config error.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import checkpoint as ckpt
from . import eval as ev
from .autodiff import NumericError
from .config import RunConfig, resolve_config
from .data import (DatasetFormatError, QAExample, SynthSpec, dataset_digest, dedup_by_image_bytes,
                   make_synthetic_pairs, read_dataset, synthetic_attributes, synthetic_label_map, write_dataset,
                   QUESTIONS)
from .gradsuite import format_table, run_suite
from .nn import ConfigError
from .study import make_study_data, run_study
from .training import LOG_HEADER, Trainer, format_log_row, load_checkpoint

logger = logging.getLogger("maeclip")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Flags or inputs that do not fit the requested command."""


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


@dataclass
class RunManifest:
    """Written before training starts; parses back as a config file that reproduces the run."""

    config: RunConfig
    data_path: str
    data_digest: str
    outputs: dict[str, str]
    started: str = field(default_factory=_now)
    finished: str = ""
    version: str = __version__

    def to_text(self) -> str:
        meta = [
            f"# maeclip {self.version}",
            f"# seed: {self.config.seed}",
            f"# data: {self.data_path} sha256={self.data_digest}",
            f"# started: {self.started}",
            f"# finished: {self.finished or '-'}",
        ]
        meta += [f"# output {k}: {v}" for k, v in self.outputs.items()]
        return "\n".join(meta) + "\n" + self.config.to_text()

    def write(self, path: Path) -> None:
        path.write_text(self.to_text(), encoding="utf-8")


# -- synth ---------------------------------------------------------------------------------------


def cmd_synth(args) -> int:
    spec = SynthSpec()
    if args.spec:
        try:
            spec = SynthSpec.from_text(Path(args.spec).read_text(encoding="utf-8"))
        except (KeyError, ValueError) as exc:
            raise UsageError(f"bad scene spec {args.spec}: {exc}") from exc
    records = list(make_synthetic_pairs(args.seed, args.n, spec, planted_duplicates=args.plant_dups))
    count = write_dataset(args.out, records)
    unique = sum(1 for _ in dedup_by_image_bytes(records))
    print(f"records\t{count}")
    print(f"unique_images\t{unique}")
    print(f"sha256\t{dataset_digest(args.out)}")
    return EXIT_OK


# -- train ---------------------------------------------------------------------------------------


def cmd_train(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    records = read_dataset(args.data)
    if args.resume:
        trainer = Trainer.load(args.resume, records)
        if args.mode and args.mode != trainer.run.mode:
            raise UsageError(f"--mode {args.mode} differs from the checkpoint's mode {trainer.run.mode}")
    else:
        run = resolve_config(args.config)
        overrides = {k: v for k, v in (("mode", args.mode), ("steps", args.steps), ("seed", args.seed)) if v is not None}
        if args.steps is not None:
            overrides["warmup_steps"] = min(run.warmup_steps, args.steps - 1)
        if overrides:
            run = run.replace(**overrides)
        trainer = Trainer(run, records)

    paths = {"log": str(out / "loss_log.tsv"), "checkpoint": str(out / "final.ckpt"),
             "manifest": str(out / "manifest.cfg")}
    manifest = RunManifest(trainer.run, str(args.data), dataset_digest(args.data), paths)
    manifest.write(Path(paths["manifest"]))

    with open(paths["log"], "w", encoding="utf-8") as log:
        log.write(LOG_HEADER + "\n")

        def on_step(step, lr, lb):
            log.write(format_log_row(step, lr, lb) + "\n")
            if args.save_every and (step + 1) % args.save_every == 0:
                trainer.save(out / f"step{step + 1}.ckpt")

        try:
            trainer.fit(on_step=on_step)
        except NumericError as exc:
            log.flush()
            print(f"error: training aborted at step {trainer.step}: {exc}", file=sys.stderr)
            return EXIT_RUNTIME
    trainer.save(paths["checkpoint"])
    manifest.finished = _now()
    manifest.write(Path(paths["manifest"]))
    print(f"checkpoint\t{paths['checkpoint']}")
    print(f"log\t{paths['log']}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------------------


TASKS = ("zeroshot", "probe", "retrieval", "segment", "vqa")


def _labels(records, attribute: str, spec: SynthSpec) -> tuple[list[str], np.ndarray]:
    names = list(getattr(spec, attribute + "s"))
    found = [synthetic_attributes(r.caption, spec)[attribute] for r in records]
    if any(f is None for f in found):
        raise UsageError(f"task needs captions naming a {attribute}; the dataset has captions without one")
    return names, np.array([names.index(f) for f in found])


def _split(n: int) -> tuple[np.ndarray, np.ndarray]:
    """Even indices train, odd indices test."""
    idx = np.arange(n)
    return idx[::2], idx[1::2]


def _templates(args) -> list[str]:
    if not args.prompts:
        raise UsageError(f"--prompts is required for --task {args.task}")
    return ev.desk_templates() if args.prompts == "desk" else ev.read_templates(args.prompts)


def run_eval(task: str, model, records, args) -> dict[str, float]:
    spec = SynthSpec()
    images = np.stack([r.image for r in records])
    if task == "retrieval":
        return ev.retrieval_eval(ev.embed_images(model, images),
                                 ev.embed_captions(model, [r.caption for r in records]), (1, 5, 10))
    if task == "zeroshot":
        templates = _templates(args)
        names, labels = _labels(records, args.attribute, spec)
        ce = ev.class_embeddings(ev.PromptSet(templates, names), model)
        return {f"zeroshot_{args.attribute}_acc": ev.zero_shot_classify(ev.embed_images(model, images), ce, labels).accuracy}
    if task == "probe":
        _, labels = _labels(records, args.attribute, spec)
        tr, te = _split(len(records))
        feats = ev.pooled_image_features(model, images)
        res = ev.linear_probe(feats[tr], labels[tr], feats[te], labels[te], ev.ProbeConfig(epochs=args.epochs))
        return {f"probe_{args.attribute}_acc": res.accuracy}
    if task == "segment":
        templates = _templates(args)
        colors = list(spec.colors)
        prompts = ev.PromptSet(templates, colors, ["background"])
        scores = [ev.zero_shot_segment(r.image, prompts, model, gt=synthetic_label_map(r.image, colors)).miou
                  for r in records]
        return {"segment_miou": float(np.mean(scores))}
    if task == "vqa":
        answers, labels = _labels(records, "color", spec)
        qa = [QAExample(r.image, QUESTIONS["color"], answers[k]) for r, k in zip(records, labels)]
        tr, te = _split(len(qa))
        res = ev.vqa_finetune(model, [qa[i] for i in tr], answers, ev.FinetuneConfig(steps=args.steps),
                              test=[qa[i] for i in te])
        return {"vqa_color_acc": res.accuracy}
    raise UsageError(f"unknown task {task!r}")


def cmd_eval(args) -> int:
    if args.task in ("zeroshot", "segment") and not args.prompts:
        raise UsageError(f"--prompts is required for --task {args.task}")
    model, _, run = load_checkpoint(args.ckpt)
    records = read_dataset(args.data)
    if not records:
        raise UsageError("evaluation dataset is empty")
    metrics = run_eval(args.task, model, records, args)
    report = ev.EvalReport(
        metrics,
        config_digest=hashlib.sha256(run.to_text().encode()).hexdigest(),
        checkpoint_digest=hashlib.sha256(Path(args.ckpt).read_bytes()).hexdigest(),
    )
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# -- gradcheck / study ---------------------------------------------------------------------------


def cmd_gradcheck(args) -> int:
    results = run_suite(args.scope, args.seed, corrupt=args.inject_fault)
    print(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


def cmd_study(args) -> int:
    run = resolve_config(args.config)
    if args.steps is not None:
        run = run.replace(steps=args.steps, warmup_steps=min(run.warmup_steps, args.steps - 1))
    data = make_study_data(run.seed, args.n_train, args.n_test)
    report = run_study(run, data)
    text = report.to_text()
    sys.stdout.write(text)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maeclip", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"maeclip {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic image-text dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--spec", help="synthetic scene spec file (key = value lines)")
    p.add_argument("--out", required=True)
    p.add_argument("--plant-dups", type=int, default=0, help="number of byte-identical image copies to plant")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", default="desk-overfit", help="preset name or config file")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", choices=("mae_clip", "clip", "masked_clip"))
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--save-every", type=int, default=0)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--task", required=True, choices=TASKS)
    p.add_argument("--data", required=True)
    p.add_argument("--prompts", help="template file, or 'desk' for the built-in set")
    p.add_argument("--attribute", choices=("color", "shape"), default="color")
    p.add_argument("--epochs", type=int, default=40)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--scope", choices=("ops", "blocks", "model"), default="ops")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--inject-fault", action="store_true", help="corrupt every gradient (the suite must fail)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("study", help="compare clip, mae_clip and masked_clip on held-out data")
    p.add_argument("--config", default="desk-small")
    p.add_argument("--n-train", type=int, default=512)
    p.add_argument("--n-test", type=int, default=128)
    p.add_argument("--steps", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_study)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericError, OSError, DatasetFormatError, ckpt.CheckpointFormatError, ev.DegenerateTaskError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
