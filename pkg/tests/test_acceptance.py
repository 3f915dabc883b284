"""End-to-end acceptance checks, one test per criterion.

Each test records a one-line PASS/FAIL verdict that the terminal summary prints
at the end of the session, then asserts on the same condition.
"""

import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE, small_config, timed_overfit
from maeclip import eval as ev
from maeclip.autodiff import Tensor
from maeclip.config import load_preset
from maeclip.data import SynthSpec, make_synthetic_pairs, make_synthetic_qa, patchify
from maeclip.gradsuite import TOLERANCES, timed_suite
from maeclip.losses import (contrastive_loss, gen_image_loss, gen_text_loss, n_masked, random_mask,
                            sharded_contrastive_loss, similarity_mask)
from maeclip.model import MAPPool, build_model, pool
from maeclip.study import make_study_data, run_study
from maeclip.training import (Trainer, contrastive_scope, format_log_row, load_checkpoint)
from test_losses import check_linearity
from test_training import small_run


def verdict(number: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[number] = f"criterion {number:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(ACCEPTANCE[number])


def unit_rows(rng, n, d):
    x = rng.normal(size=(n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def test_01_gradient_suite():
    results, seconds = timed_suite()
    worst = {s: max(r.error for r in results if r.scope == s) for s in TOLERANCES}
    ok = all(r.passed for r in results) and seconds < 120
    verdict(1, ok, f"{len(results)} checks in {seconds:.1f}s; worst " +
            ", ".join(f"{s} {worst[s]:.1e} (< {TOLERANCES[s]:.0e})" for s in TOLERANCES))
    assert ok


def test_02_loss_oracles():
    rng = np.random.default_rng(2)
    worst = {"contrastive": 0.0, "gen_image": 0.0, "gen_text": 0.0}
    for _ in range(100):
        n, d = int(rng.integers(1, 9)), int(rng.integers(2, 65))
        x, y, sigma = unit_rows(rng, n, d), unit_rows(rng, n, d), rng.uniform(0.01, 1.0)
        got = [float(t.data) for t in contrastive_loss(Tensor(x), Tensor(y), 1.0 / sigma)]
        want = oracles.contrastive(x.tolist(), y.tolist(), sigma)
        worst["contrastive"] = max(worst["contrastive"], max(abs(a - b) for a, b in zip(got, want)))

        normalize = bool(rng.integers(2))
        preds, targets = rng.normal(size=(n, d)), rng.uniform(size=(n, d))
        got = float(gen_image_loss(Tensor(preds), targets, normalize).data)
        worst["gen_image"] = max(worst["gen_image"],
                                 abs(got - oracles.masked_mse(preds.tolist(), targets.tolist(), normalize)))

        logits, labels = rng.normal(size=(n, d)) * 3, rng.integers(0, d, size=n)
        got = float(gen_text_loss(Tensor(logits), labels).data)
        worst["gen_text"] = max(worst["gen_text"], abs(got - oracles.cross_entropy(logits.tolist(), labels.tolist())))
    ok = all(v <= 1e-12 for v in worst.values())
    verdict(2, ok, "100 instances each; max abs err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))
    assert ok


def test_03_total_loss_gradient_linearity():
    rng = np.random.default_rng(3)
    weights = [(0.1, 0.05)] + [tuple(rng.uniform(0, 2, size=2)) for _ in range(9)]
    try:
        worst = check_linearity(rng, weights)
    except AssertionError as exc:
        verdict(3, False, f"max abs diff {exc}")
        raise
    verdict(3, True, f"10 weight settings incl. (0.1, 0.05); max abs diff {worst:.1e} (< 1e-9)")


def test_04_masking():
    rng = np.random.default_rng(4)
    m = random_mask(196, 0.75, rng)
    counts_ok = (len(m.masked), len(m.kept)) == (147, 49)

    mismatches = 0
    for _ in range(1000):
        n = int(rng.integers(2, 200))
        scores = rng.normal(size=n)
        if rng.integers(2):
            scores = np.round(scores)  # exercise ties
        oracle = sorted(sorted(range(n), key=lambda i: (-scores[i], i))[:n_masked(n, 0.75)])
        mismatches += similarity_mask(scores, 0.75).masked.tolist() != oracle

    model = build_model(small_config(), 4)
    invisible = True
    for _ in range(5):
        patches = patchify(rng.uniform(size=(32, 32, 3)), 8)
        mask = random_mask(16, 0.75, rng)
        perturbed = patches.copy()
        perturbed[mask.masked] = rng.uniform(size=(len(mask.masked), patches.shape[1]))
        a = model.encode_image(patches[None], mask.kept[None]).data
        b = model.encode_image(perturbed[None], mask.kept[None]).data
        invisible &= a.tobytes() == b.tobytes()

    ok = counts_ok and mismatches == 0 and invisible
    verdict(4, ok, f"196 -> {len(m.masked)} masked / {len(m.kept)} kept; "
                   f"{mismatches}/1000 sort-oracle mismatches; masked content invisible: {invisible}")
    assert ok


def test_05_local_global_contrastive():
    rng = np.random.default_rng(5)
    ws1 = ws4 = 0.0
    for _ in range(20):
        x, y, sigma = unit_rows(rng, 8, 16), unit_rows(rng, 8, 16), rng.uniform(0.02, 1.0)
        local = [float(t.data) for t in sharded_contrastive_loss(Tensor(x), Tensor(y), 1 / sigma, 1, "local")]
        plain = [float(t.data) for t in contrastive_loss(Tensor(x), Tensor(y), 1 / sigma)]
        ws1 = max(ws1, max(abs(a - b) for a, b in zip(local, plain)))
        glob = float(sharded_contrastive_loss(Tensor(x), Tensor(y), 1 / sigma, 4, "global")[2].data)
        ws4 = max(ws4, abs(glob - oracles.contrastive(x.tolist(), y.tolist(), sigma)[2]))
    cfg = load_preset("paper-cc").train_config()
    switch = next(s for s in range(2000) if contrastive_scope(s, cfg) == "global")
    ok = ws1 <= 1e-12 and ws4 <= 1e-12 and switch == 500
    verdict(5, ok, f"ws=1 diff {ws1:.1e}; ws=4 global vs oracle {ws4:.1e}; local->global at step {switch}")
    assert ok


@pytest.fixture(scope="module")
def overfit_clip_trainer():
    return timed_overfit(load_preset("desk-overfit").replace(mode="clip"))


def _in_batch_recall(trainer):
    model, recs = trainer.model, trainer.records
    return ev.retrieval_eval(ev.embed_images(model, np.stack([r.image for r in recs])),
                             ev.embed_captions(model, [r.caption for r in recs]), (1,))


def test_06_overfit(overfit_trainer, overfit_clip_trainer):
    run = overfit_trainer.run
    shape_ok = (run.image_depth, run.text_depth, run.image_width, run.patch_size, run.image_size,
                run.vocab_size) == (2, 2, 64, 8, 32, 260) and run.steps <= 500 and len(overfit_trainer.records) == 8
    r_mae, r_clip = _in_batch_recall(overfit_trainer), _in_batch_recall(overfit_clip_trainer)
    g0, g_end = overfit_trainer.history[0].l_gen_i, overfit_trainer.history[-1].l_gen_i
    seconds = max(overfit_trainer.seconds, overfit_clip_trainer.seconds)
    ok = (shape_ok and all(v == 1.0 for v in r_mae.values()) and all(v == 1.0 for v in r_clip.values())
          and g_end < 0.5 * g0 and seconds < 300)
    verdict(6, ok, f"mae_clip R@1 i2t/t2i {r_mae['i2t_r@1']}/{r_mae['t2i_r@1']}, "
                   f"clip {r_clip['i2t_r@1']}/{r_clip['t2i_r@1']}; l_gen_i {g0:.3f} -> {g_end:.3f}; "
                   f"slowest run {seconds:.0f}s")
    assert ok


def test_07_directional_study():
    data = make_study_data(0)
    start = time.perf_counter()
    full = run_study(load_preset("desk-small"), data)
    seconds = time.perf_counter() - start
    print(full.to_text())

    # repeat a shortened schedule twice on the same data to check the harness is deterministic end to end
    short = load_preset("desk-small").replace(steps=100, warmup_steps=10)
    digests = {run_study(short, data).digest() for _ in range(2)}

    problems = full.consistency_problems()
    columns = set(full.metrics) == {"clip", "mae_clip", "masked_clip"}
    wanted = {"zeroshot_color_acc", "probe_color_acc", "retrieval_i2t_r@1", "segment_miou"}
    ok = columns and all(wanted <= set(v) for v in full.metrics.values()) and not problems and len(digests) == 1
    verdict(7, ok, f"3-mode report in {seconds:.0f}s, digest {full.digest()[:16]}; "
                   f"consistency problems {len(problems)}; repeat runs identical: {len(digests) == 1}")
    assert ok


def test_08_pooling():
    worst = 0.0
    for seed in range(10):
        rng = np.random.default_rng(seed)
        mp = MAPPool(16, 4, rng)
        for p in mp.parameters():
            p.data = p.data + rng.normal(size=p.shape)
        x = rng.normal(size=(12, 16))
        for strategy in ("gap", "max", "map"):
            a = pool(Tensor(x), strategy, map_pool=mp).data
            b = pool(Tensor(x[rng.permutation(12)]), strategy, map_pool=mp).data
            worst = max(worst, float(np.max(np.abs(a - b))))

    batch_recs = list(make_synthetic_pairs(8, 6))
    norm_err = 0.0
    for strategy in ("gap", "max", "map"):
        model = build_model(small_config(pooling=strategy), 8)
        imgs = ev.embed_images(model, np.stack([r.image for r in batch_recs]))
        txts = ev.embed_captions(model, [r.caption for r in batch_recs])
        norm_err = max(norm_err, float(np.max(np.abs(np.linalg.norm(np.vstack([imgs, txts]), axis=1) - 1.0))))
    ok = worst <= 1e-12 and norm_err <= 1e-12
    verdict(8, ok, f"permutation diff {worst:.1e} over gap/max/map; unit-norm err {norm_err:.1e}")
    assert ok


def test_09_determinism_and_persistence(tmp_path):
    records = list(make_synthetic_pairs(5, 6))
    run = small_run(augment=True)

    def log():
        rows = []
        Trainer(run, records).fit(until=15, on_step=lambda s, lr, lb: rows.append(format_log_row(s, lr, lb)))
        return rows

    logs_identical = log() == log()

    first = Trainer(run, records)
    first.fit(until=5)
    first.save(tmp_path / "mid.ckpt")
    model, state, saved_run = load_checkpoint(tmp_path / "mid.ckpt")
    round_trip = saved_run == run and all(
        p.data.tobytes() == q.data.tobytes()
        for (_, p), (_, q) in zip(first.model.named_parameters(), model.named_parameters())) and all(
        state.m[k].tobytes() == first.state.m[k].tobytes() and state.v[k].tobytes() == first.state.v[k].tobytes()
        for k in first.state.m)

    full = Trainer(run, records).fit(until=15)
    tail = Trainer.load(tmp_path / "mid.ckpt", records).fit(until=15)
    resume_err = max(abs(a - b) for x, y in zip(full[5:], tail) for a, b in zip(x.as_row(), y.as_row()))
    ok = logs_identical and round_trip and len(tail) == 10 and resume_err <= 1e-10
    verdict(9, ok, f"logs bit-identical: {logs_identical}; checkpoint bit-exact: {round_trip}; "
                   f"resume over {len(tail)} steps max diff {resume_err:.1e}")
    assert ok


def test_10_evaluation_oracles():
    rng = np.random.default_rng(10)
    img, txt = unit_rows(rng, 256, 8), unit_rows(rng, 256, 8)
    sims = img @ txt.T
    got = ev.retrieval_eval(img, txt, (1, 5, 10))
    retrieval_ok = all(got[f"i2t_r@{k}"] == oracles.recall_at_k(sims.tolist(), k) and
                       got[f"t2i_r@{k}"] == oracles.recall_at_k(sims.T.tolist(), k) for k in (1, 5, 10))

    miou_err = 0.0
    for _ in range(20):
        k = int(rng.integers(2, 8))
        gt = rng.integers(0, k, size=500)
        pred = np.where(rng.uniform(size=500) < 0.6, gt, rng.integers(0, k, size=500))
        miou_err = max(miou_err, abs(ev.miou(pred, gt, k) - oracles.miou(pred.tolist(), gt.tolist(), k)))

    rescale_ok = True
    for _ in range(20):
        im, ce = unit_rows(rng, 32, 8), unit_rows(rng, 5, 8)
        base = ev.zero_shot_classify(im, ce).predictions
        for c in (1e-3, 0.5, 7.0, 1e3):
            rescale_ok &= np.array_equal(base, ev.zero_shot_classify(im * c, ce).predictions)

    model = build_model(small_config(), 10)
    before = {n: p.data.tobytes() for n, p in model.encoder_parameters()}
    ev.vqa_finetune(model, make_synthetic_qa(0, 16), list(SynthSpec().colors), ev.FinetuneConfig(steps=5, batch_size=8))
    frozen = before == {n: p.data.tobytes() for n, p in model.encoder_parameters()}

    ok = retrieval_ok and miou_err <= 1e-12 and rescale_ok and frozen
    verdict(10, ok, f"n=256 recall matches brute force: {retrieval_ok}; mIoU err {miou_err:.1e}; "
                    f"zero-shot rescale invariant: {rescale_ok}; VQA encoders unchanged: {frozen}")
    assert ok
