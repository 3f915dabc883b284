import numpy as np
import pytest

from maeclip import autodiff as ad
from maeclip.autodiff import Tensor
from maeclip.data import collate, make_synthetic_pairs, patchify, tokenize
from maeclip.losses import MaskSpec, random_mask
from maeclip.model import MAPPool, LengthError, build_model, pool, stack_indices, text_mask_candidates
from maeclip.nn import ConfigError, TransformerConfig

from conftest import small_config


@pytest.fixture
def model(tiny_config):
    return build_model(tiny_config, 0)


def _image(rng):
    return rng.uniform(size=(32, 32, 3))


def _perturb_patches(image, patch_ids, rng, patch=8):
    out = image.copy()
    grid = image.shape[0] // patch
    for pid in patch_ids:
        r, c = divmod(int(pid), grid)
        out[r * patch:(r + 1) * patch, c * patch:(c + 1) * patch] = rng.uniform(size=(patch, patch, 3))
    return out


class TestConfig:
    @pytest.mark.parametrize("overrides", [
        dict(image_size=30), dict(mask_ratio=0.0), dict(mask_ratio=1.0),
        dict(temperature_init=0.0), dict(pooling="cls"),
    ])
    def test_invalid(self, overrides):
        with pytest.raises(ConfigError):
            small_config(**overrides)

    def test_counts(self, tiny_config):
        assert (tiny_config.grid, tiny_config.n_patches, tiny_config.patch_dim) == (4, 16, 192)


class TestEncodeImage:
    def test_full_rows(self, model, rng):
        assert model.encode_pixels(_image(rng)).shape == (16, 16)

    def test_masked_rows(self, model, rng):
        mask = random_mask(16, 0.75, rng)
        assert model.encode_pixels(_image(rng), mask).shape == (4, 16)

    def test_wrong_size(self, model):
        with pytest.raises(ad.DimensionError):
            model.encode_pixels(np.zeros((24, 24, 3)))

    def test_masked_pixels_invisible(self, model, rng):
        img = _image(rng)
        mask = random_mask(16, 0.75, rng)
        a = model.encode_pixels(img, mask).data
        b = model.encode_pixels(_perturb_patches(img, mask.masked, rng), mask).data
        np.testing.assert_array_equal(a, b)

    def test_permuting_masked_patches_invisible(self, model, rng):
        img = _image(rng)
        mask = random_mask(16, 0.75, rng)
        patches = patchify(img, 8)
        shuffled = patches.copy()
        shuffled[mask.masked] = patches[rng.permutation(mask.masked)]
        a = model.encode_image(patches[None], mask.kept[None]).data
        b = model.encode_image(shuffled[None], mask.kept[None]).data
        np.testing.assert_array_equal(a, b)


class TestEncodeText:
    @pytest.mark.parametrize("t", [1, 5, 64])
    def test_shape(self, model, t):
        feats, valid = model.encode_text(np.arange(t) % 260)
        assert feats.shape == (1, t, 16) and valid.all()

    def test_deterministic(self, model):
        tokens = tokenize("a red circle")
        np.testing.assert_array_equal(model.encode_text(tokens)[0].data, model.encode_text(tokens)[0].data)

    def test_too_long(self, model):
        with pytest.raises(LengthError):
            model.encode_text(np.zeros(65, dtype=int))

    @pytest.mark.parametrize("bad", [-1, 260])
    def test_bad_id(self, model, bad):
        with pytest.raises(IndexError):
            model.encode_text(np.array([1, bad, 2]))

    def test_gradient_through_embedding(self, rng):
        model = build_model(small_config(text_encoder=TransformerConfig(1, 8, 2, vocab_size=12, max_seq=6)), 3)
        for p in (model.token_embed, model.text_pos):
            p.data = p.data + rng.normal(0, 0.5, size=p.shape)
        tokens = np.array([[1, 4, 4, 9, 2]])
        w = Tensor(rng.normal(size=(1, 5, 8)))
        params = [model.token_embed, model.text_pos]
        err = ad.grad_check(lambda: ad.sum(model.encode_text(tokens)[0] * w), params)
        assert err < 1e-5

    def test_padding_invisible(self, model, rng):
        tokens = np.array([[1, 70, 71, 2, 0, 0], [1, 70, 71, 2, 0, 0]])
        tokens[1, 4:] = [99, 123]
        feats, valid = model.encode_text(tokens, np.array([4, 4]))
        np.testing.assert_array_equal(feats.data[0, :4], feats.data[1, :4])
        assert valid[:, :4].all() and not valid[:, 4:].any()


class TestPool:
    def test_gap_and_max_examples(self):
        x = Tensor(np.array([[0.0, 2.0], [2.0, 0.0]]))
        np.testing.assert_array_equal(pool(x, "gap").data, [1.0, 1.0])
        np.testing.assert_array_equal(pool(x, "max").data, [2.0, 2.0])

    @pytest.mark.parametrize("strategy", ["gap", "max", "map"])
    def test_identical_rows_return_the_row(self, rng, strategy):
        v = rng.normal(size=16)
        mp = MAPPool(16, 4, rng)
        out = pool(Tensor(np.tile(v, (6, 1))), strategy, map_pool=mp).data
        np.testing.assert_allclose(out, v, rtol=0, atol=1e-12)

    @pytest.mark.parametrize("strategy", ["gap", "max", "map"])
    @pytest.mark.parametrize("seed", range(5))
    def test_permutation_invariance(self, strategy, seed):
        rng = np.random.default_rng(seed)
        mp = MAPPool(16, 4, rng)
        for p in mp.parameters():
            p.data = p.data + rng.normal(size=p.shape)
        x = rng.normal(size=(8, 16))
        a = pool(Tensor(x), strategy, map_pool=mp).data
        b = pool(Tensor(x[rng.permutation(8)]), strategy, map_pool=mp).data
        assert np.max(np.abs(a - b)) <= 1e-12

    @pytest.mark.parametrize("strategy", ["gap", "max", "map"])
    def test_empty(self, rng, strategy):
        with pytest.raises(ad.DimensionError):
            pool(Tensor(np.zeros((0, 4))), strategy, map_pool=MAPPool(4, 2, rng))

    def test_map_needs_module(self):
        with pytest.raises(ConfigError):
            pool(Tensor(np.ones((2, 4))), "map")

    @pytest.mark.parametrize("strategy", ["gap", "max", "map"])
    def test_invalid_rows_ignored(self, rng, strategy):
        mp = MAPPool(8, 2, rng)
        x = rng.normal(size=(1, 5, 8))
        valid = np.array([[1, 1, 1, 0, 0]], bool)
        a = pool(Tensor(x), strategy, valid, mp).data
        b = pool(Tensor(x[:, :3]), strategy, None, mp).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)


class TestEmbedPair:
    @pytest.fixture
    def batch(self, tiny_config):
        return collate(list(make_synthetic_pairs(0, 4)), 8, 64)

    @pytest.mark.parametrize("pooling", ["gap", "max", "map"])
    def test_unit_norm(self, batch, pooling):
        m = build_model(small_config(pooling=pooling), 0)
        pair = m.embed_pair(batch.patches, batch.tokens, batch.lengths)
        for e in (pair.x.data, pair.y.data):
            np.testing.assert_allclose(np.linalg.norm(e, axis=1), 1.0, atol=1e-6)

    def test_projection_scale_invariance(self, model, batch):
        a = model.embed_images(batch.patches).data
        model.image_proj.weight.data = model.image_proj.weight.data * 3.7
        b = model.embed_images(batch.patches).data
        np.testing.assert_allclose(a, b, rtol=0, atol=1e-12)

    def test_self_similarity(self, model, batch):
        x = model.embed_images(batch.patches).data
        np.testing.assert_allclose(np.sum(x * x, axis=1), 1.0, atol=1e-12)

    def test_temperature_clamp(self, model):
        assert float(model.inverse_temperature().data) == pytest.approx(1 / 0.07)
        model.logit_scale.data = np.asarray(np.log(500.0))
        assert float(model.inverse_temperature().data) == 100.0


class TestDecoder:
    def _masks(self, batch, rng, ratio=0.75):
        img = [random_mask(16, ratio, rng) for _ in range(len(batch))]
        txt = [random_mask(int(n), ratio, rng, "text", text_mask_candidates(n)) for n in batch.lengths]
        return img, txt

    def _decode(self, model, batch, img, txt):
        kept_i, _ = stack_indices(img, "kept")
        kept_t, kv_t = stack_indices(txt, "kept")
        fi = model.encode_image(batch.patches, kept_i)
        ft, _ = model.encode_text(batch.tokens, batch.lengths, kept_t, kv_t)
        return model.decode_cross_modal(fi, ft, img, txt, batch.lengths, kv_t)

    def test_row_counts(self, model, rng):
        batch = collate(list(make_synthetic_pairs(1, 3)), 8, 64)
        img, txt = self._masks(batch, rng)
        preds, logits = self._decode(model, batch, img, txt)
        assert preds.shape == (3, 12, 192)
        assert logits.shape == (sum(len(m.masked) for m in txt), 260)

    def test_all_visible_gives_empty_outputs(self, model):
        batch = collate(list(make_synthetic_pairs(1, 2)), 8, 64)
        empty = np.array([], dtype=np.int64)
        img = [MaskSpec("image", np.arange(16), empty) for _ in range(2)]
        txt = [MaskSpec("text", np.arange(int(n)), empty) for n in batch.lengths]
        preds, logits = self._decode(model, batch, img, txt)
        assert preds.shape[1] == 0 and logits.shape[0] == 0

    def test_mismatched_features(self, model, rng):
        batch = collate(list(make_synthetic_pairs(1, 2)), 8, 64)
        img, txt = self._masks(batch, rng)
        fi = model.encode_image(batch.patches)          # all 16 rows, mask keeps 4
        ft, _ = model.encode_text(batch.tokens, batch.lengths)
        with pytest.raises(ad.ContractError):
            model.decode_cross_modal(fi, ft, img, txt, batch.lengths)

    def test_gradient_reaches_image_encoder(self, model, rng):
        batch = collate(list(make_synthetic_pairs(1, 2)), 8, 64)
        img, txt = self._masks(batch, rng)
        preds, _ = self._decode(model, batch, img, txt)
        ad.sum(ad.square(preds)).backward()
        grads = [p.grad for n, p in model.named_parameters() if n.startswith(("image_encoder", "patch_embed"))]
        assert all(g is not None and np.any(g != 0) for g in grads)

    def test_encoder_and_decoder_groups_partition(self, model):
        enc = {n for n, _ in model.encoder_parameters()}
        dec = {n for n, _ in model.decoder_parameters()}
        assert not enc & dec
        assert enc | dec == {n for n, _ in model.named_parameters()}
        assert "logit_scale" in enc and "token_head.weight" in dec


def test_text_mask_candidates_exclude_bos_and_eos():
    np.testing.assert_array_equal(text_mask_candidates(6), [1, 2, 3, 4])


def test_build_is_deterministic(tiny_config):
    a, b = build_model(tiny_config, 4).state_dict(), build_model(tiny_config, 4).state_dict()
    assert all(np.array_equal(a[k], b[k]) for k in a)
