import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from maeclip.data import (BOS, EOS, PAD, BPEVocab, ByteVocab, DatasetFormatError, SynthSpec, center_resize, collate,
                          dataset_digest, dedup_by_image_bytes, detokenize, epoch_order, fit_tokens, iter_dataset,
                          make_record, make_synthetic_pairs, make_synthetic_qa, patchify, random_resized_crop,
                          read_dataset, synthetic_attributes, synthetic_label_map, tokenize, unpatchify,
                          write_dataset)


class TestVocab:
    def test_reserved_ids(self):
        assert (PAD, BOS, EOS) == (0, 1, 2)
        assert ByteVocab.size == 260

    def test_empty(self):
        assert tokenize("").tolist() == [BOS, EOS]

    def test_ab(self):
        assert tokenize("ab").tolist() == [1, 101, 102, 2]

    @given(st.text(max_size=40))
    def test_round_trip(self, s):
        ids = tokenize(s)
        assert detokenize(ids) == s
        assert ids[1:-1].min(initial=4) >= 4

    def test_bpe_merges(self, tmp_path):
        path = tmp_path / "merges.txt"
        path.write_text("# rank order\n61 62\n6162 63\n", encoding="utf-8")
        vocab = BPEVocab.from_file(path)
        assert vocab.size == 262
        ids = tokenize("abcab", vocab)
        assert ids.tolist() == [BOS, 261, 260, EOS]
        assert detokenize(ids, vocab) == "abcab"

    @given(st.text(max_size=20))
    def test_bpe_round_trip(self, s):
        vocab = BPEVocab([(b"e", b" "), (b"t", b"h"), (b"th", b"e ")])
        assert detokenize(tokenize(s, vocab), vocab) == s


class TestPatchify:
    def test_vit_b16_counts(self):
        assert patchify(np.zeros((224, 224, 3)), 16).shape == (196, 768)

    def test_round_trip(self, rng):
        x = rng.uniform(size=(32, 24, 3))
        np.testing.assert_array_equal(unpatchify(patchify(x, 8), 8, 4, 3, 3), x)

    def test_first_patch_slice(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        np.testing.assert_array_equal(patchify(x, 4)[0], x[:4, :4, :].reshape(-1))

    def test_row_major_order(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        # patch index 5 on a 4x4 grid is row 1, col 1
        np.testing.assert_array_equal(patchify(x, 4)[5], x[4:8, 4:8, :].reshape(-1))

    def test_batched(self, rng):
        x = rng.uniform(size=(2, 8, 8, 3))
        np.testing.assert_array_equal(patchify(x, 4)[1], patchify(x[1], 4))

    def test_indivisible(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((10, 8, 3)), 4)


def _bow_classifier_accuracy(captions, labels):
    """Perceptron over bag-of-words counts, trained and scored on the same captions."""
    vocab = sorted({w for c in captions for w in c.split()})
    X = np.array([[c.split().count(w) for w in vocab] for c in captions], float)
    k = max(labels) + 1
    W = np.zeros((k, len(vocab)))
    for _ in range(20):
        for x, y in zip(X, labels):
            pred = int(np.argmax(W @ x))
            if pred != y:
                W[y] += x
                W[pred] -= x
    return float(np.mean(np.argmax(X @ W.T, axis=1) == np.array(labels)))


class TestSynthetic:
    def test_deterministic(self):
        a = list(make_synthetic_pairs(3, 10))
        b = list(make_synthetic_pairs(3, 10))
        assert [r.image_digest for r in a] == [r.image_digest for r in b]
        assert [r.caption for r in a] == [r.caption for r in b]

    def test_distinct_images_and_captions(self):
        recs = list(make_synthetic_pairs(0, 64))
        assert len({r.image_digest for r in recs}) == 64
        assert len({r.caption for r in recs}) == 64

    def test_record_invariants(self):
        for r in make_synthetic_pairs(1, 16):
            assert r.tokens[0] == BOS and r.tokens[-1] == EOS
            assert np.isfinite(r.image).all() and r.image.min() >= 0 and r.image.max() <= 1

    def test_captions_separate_shapes(self):
        spec = SynthSpec()
        recs = list(make_synthetic_pairs(2, 64, spec))
        labels = [spec.shapes.index(synthetic_attributes(r.caption, spec)["shape"]) for r in recs]
        assert _bow_classifier_accuracy([r.caption for r in recs], labels) == 1.0

    def test_label_map_matches_caption_color(self):
        spec = SynthSpec()
        for r in make_synthetic_pairs(4, 8, spec):
            color = synthetic_attributes(r.caption, spec)["color"]
            labels = synthetic_label_map(r.image, spec.colors)
            present = set(np.unique(labels).tolist())
            assert present == {0, spec.colors.index(color) + 1}

    def test_spec_from_text(self):
        spec = SynthSpec.from_text("shapes = circle, ring\ncolors = red\nimage_size = 16\n")
        recs = list(make_synthetic_pairs(0, 3, spec))
        assert recs[0].image.shape == (16, 16, 3)

    def test_spec_unknown_key(self):
        with pytest.raises(KeyError):
            SynthSpec.from_text("texture = wood")

    def test_qa(self):
        qa = make_synthetic_qa(0, 5, kind="shape")
        assert all(q.answer in SynthSpec().shapes for q in qa)

    def test_n_must_be_positive(self):
        with pytest.raises(ValueError):
            list(make_synthetic_pairs(0, 0))


class TestDedup:
    def test_unchanged_without_duplicates(self):
        recs = list(make_synthetic_pairs(0, 12))
        assert [id(r) for r in dedup_by_image_bytes(recs)] == [id(r) for r in recs]

    def test_first_occurrence_kept(self, rng):
        img = rng.uniform(size=(8, 8, 3))
        a, b = make_record(img, "first"), make_record(img.copy(), "second")
        assert [r.caption for r in dedup_by_image_bytes([a, b])] == ["first"]

    def test_planted_duplicates_against_hash_set(self):
        recs = list(make_synthetic_pairs(7, 1000, planted_duplicates=100))
        seen = set()
        for r in recs:
            seen.add(hashlib.sha256(r.image.astype("<f4").tobytes()).hexdigest())
        kept = list(dedup_by_image_bytes(recs))
        assert len(kept) == len(seen) == 900

    def test_stable_order(self):
        recs = list(make_synthetic_pairs(7, 50, planted_duplicates=10))
        kept = list(dedup_by_image_bytes(recs))
        where = {id(r): i for i, r in enumerate(recs)}
        positions = [where[id(r)] for r in kept]
        assert positions == sorted(positions)


class TestEpochOrder:
    def test_pure_function(self):
        np.testing.assert_array_equal(epoch_order(20, 3, 5), epoch_order(20, 3, 5))

    def test_is_permutation(self):
        assert sorted(epoch_order(30, 1, 2).tolist()) == list(range(30))

    def test_epochs_differ(self):
        assert not np.array_equal(epoch_order(30, 1, 0), epoch_order(30, 1, 1))


class TestDatasetFile:
    def test_round_trip(self, tmp_path):
        recs = list(make_synthetic_pairs(0, 5))
        path = tmp_path / "d.itp"
        assert write_dataset(path, recs) == 5
        back = read_dataset(path)
        for a, b in zip(recs, back):
            assert a.image.tobytes() == b.image.tobytes()
            assert a.tokens.tolist() == b.tokens.tolist() and a.caption == b.caption

    def test_layout(self, tmp_path):
        rec = make_record(np.full((1, 2, 3), 0.5, np.float32), "hi")
        path = tmp_path / "one.itp"
        write_dataset(path, [rec])
        raw = path.read_bytes()
        assert raw[:4] == b"ITP1"
        assert raw[4:16] == np.array([1, 2, 3], "<u4").tobytes()
        assert raw[-2:] == b"hi"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "x.itp"
        path.write_bytes(b"NOPE")
        with pytest.raises(DatasetFormatError):
            read_dataset(path)

    def test_truncated(self, tmp_path):
        path = tmp_path / "t.itp"
        write_dataset(path, make_synthetic_pairs(0, 2))
        path.write_bytes(path.read_bytes()[:-3])
        it = iter_dataset(path)
        next(it)
        with pytest.raises(DatasetFormatError, match="record 1"):
            next(it)

    def test_digest_stable(self, tmp_path):
        a, b = tmp_path / "a.itp", tmp_path / "b.itp"
        write_dataset(a, make_synthetic_pairs(9, 4))
        write_dataset(b, make_synthetic_pairs(9, 4))
        assert dataset_digest(a) == dataset_digest(b)


class TestBatching:
    def test_collate_padding(self):
        recs = [make_record(np.zeros((8, 8, 3)), "a"), make_record(np.zeros((8, 8, 3)), "abcd")]
        batch = collate(recs, 4, 16)
        assert batch.tokens.shape == (2, 6)
        assert batch.lengths.tolist() == [3, 6]
        assert batch.tokens[0, 3:].tolist() == [PAD] * 3

    def test_fit_tokens_keeps_eos(self):
        out = fit_tokens(tokenize("abcdefgh"), 5)
        assert len(out) == 5 and out[-1] == EOS and out[0] == BOS

    @settings(max_examples=20)
    @given(st.integers(0, 2**31 - 1))
    def test_crop_stays_in_range(self, seed):
        img = next(make_synthetic_pairs(0, 1)).image
        out = random_resized_crop(img, np.random.default_rng(seed))
        assert out.shape == img.shape and out.min() >= 0 and out.max() <= 1

    def test_center_resize_identity(self, rng):
        img = rng.uniform(size=(8, 8, 3))
        np.testing.assert_array_equal(center_resize(img, 8), img)
        assert center_resize(rng.uniform(size=(10, 12, 3)), 6).shape == (6, 6, 3)
