"""Model structure contracts: autoencoders, fusers, denoiser, classifier."""

import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from voximage.errors import ShapeError
from voximage.masking import full_visibility
from voximage.models.classifier import ConvClassifier, cross_entropy
from voximage.models.denoiser import CondUNet
from voximage.models.latent_ae import ConvLatentAE
from voximage.models.mae import FmriMae, ImageMae, MaskedAutoencoder
from voximage.models.xmodal import CrossModalModel
from voximage.nn import TransformerConfig
from voximage.rng import make_rng
from voximage.tensor import Tensor, backward


def tiny_cfg(dim=16, depth=1, heads=2):
    return TransformerConfig(dim=dim, depth=depth, heads=heads, mlp_ratio=2.0)


class TestMaskedAutoencoderCore:
    def _core(self, n_tokens=6, token_dim=4, dim=16):
        return MaskedAutoencoder(make_rng(0), n_tokens, token_dim,
                                 tiny_cfg(dim), tiny_cfg(dim))

    def test_encode_full_length_shape(self):
        core = self._core()
        h = core.encode(Tensor(make_rng(1).standard_normal((3, 6, 4))))
        assert h.shape == (3, 6, 16)

    def test_encode_visible_subset_shape(self):
        core = self._core()
        toks = Tensor(make_rng(1).standard_normal((3, 6, 4)))
        vis = np.tile(np.array([0, 2, 5]), (3, 1))
        assert core.encode(toks, vis).shape == (3, 3, 16)

    def test_encode_wrong_token_count_rejected(self):
        with pytest.raises(ShapeError, match="tokens"):
            self._core().encode(Tensor(np.zeros((2, 5, 4))))

    def test_encode_no_visible_tokens_rejected(self):
        with pytest.raises(ShapeError, match="visible"):
            self._core().encode(Tensor(np.zeros((2, 6, 4))),
                                np.zeros((2, 0), dtype=np.int64))

    def test_mismatched_widths_rejected(self):
        with pytest.raises(ShapeError, match="dim"):
            MaskedAutoencoder(make_rng(0), 6, 4, tiny_cfg(16), tiny_cfg(32))

    def test_expand_places_mask_token_and_visible_rows(self):
        core = self._core()
        h_vis = Tensor(make_rng(2).standard_normal((2, 3, 16)))
        vis = np.tile(np.array([1, 3, 4]), (2, 1))
        canvas = core.expand_with_mask_tokens(h_vis, vis)
        assert canvas.shape == (2, 6, 16)
        for b in range(2):
            for j, pos in enumerate([1, 3, 4]):
                assert_array_equal(canvas.data[b, pos], h_vis.data[b, j])
            for pos in [0, 2, 5]:
                assert_array_equal(canvas.data[b, pos], core.mask_token.data[0, 0])

    def test_decode_wrong_length_rejected(self):
        with pytest.raises(ShapeError, match="decoder"):
            self._core().decode(Tensor(np.zeros((2, 4, 16))))

    def test_encoder_decoder_params_partition_everything(self):
        core = self._core()
        enc = set(core.encoder_params())
        dec = set(core.decoder_params())
        assert enc and dec
        assert not enc & dec
        assert enc | dec == set(core.named_params())


class TestFmriMae:
    def _mae(self, n_voxels=24, patch=4):
        return FmriMae(make_rng(0), n_voxels, patch, tiny_cfg(), tiny_cfg())

    def test_token_count_rounds_up_for_padding(self):
        mae = self._mae(n_voxels=30, patch=8)
        assert mae.n_tokens == 4
        recon, _ = mae.reconstruct(make_rng(1).standard_normal((2, 30)), 0.5, make_rng(2))
        assert recon.shape == (2, 30)

    def test_encode_full_shape(self):
        mae = self._mae()
        assert mae.encode_full(make_rng(1).standard_normal((3, 24))).shape == (3, 6, 16)

    def test_wrong_voxel_width_rejected(self):
        with pytest.raises(ShapeError, match="voxels"):
            self._mae().tokens(np.zeros((2, 25)))

    def test_zero_ratio_ignores_mask_rng(self):
        mae = self._mae()
        v = make_rng(1).standard_normal((2, 24))
        r1, m1 = mae.reconstruct(v, 0.0, make_rng(10))
        r2, m2 = mae.reconstruct(v, 0.0, make_rng(99))
        assert_array_equal(r1.data, r2.data)
        assert m1.mask_indices.shape[1] == 0

    def test_reconstruction_gradient_reaches_both_halves(self):
        mae = self._mae()
        v = make_rng(1).standard_normal((2, 24))
        recon, _ = mae.reconstruct(v, 0.5, make_rng(2))
        backward(((recon - Tensor(v)) ** 2).mean())
        for params in (mae.encoder_params(), mae.decoder_params()):
            grads = [p.grad for p in params.values()]
            assert all(g is not None for g in grads)
            assert any(np.abs(g).max() > 0 for g in grads)


class TestImageMae:
    def _mae(self, image_size=8, patch=4):
        return ImageMae(make_rng(0), image_size, patch, 3, tiny_cfg(), tiny_cfg())

    def test_indivisible_patch_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            self._mae(image_size=10, patch=4)

    def test_reconstruct_shape(self):
        mae = self._mae()
        imgs = make_rng(1).random((2, 8, 8, 3))
        recon, masked = mae.reconstruct(imgs, 0.5, make_rng(2))
        assert recon.shape == (2, 8, 8, 3)
        assert masked.visible_indices.shape[1] == 2  # 4 tokens at ratio 0.5

    def test_wrong_image_shape_rejected(self):
        with pytest.raises(ShapeError, match="images"):
            self._mae().tokens(np.zeros((2, 16, 16, 3)))


class TestCrossModalModel:
    def _model(self):
        # 24 voxels / patch 4 and 8x8 images / patch 4 both tile to 6 vs 4:
        # use 16 voxels patch 4 -> 4 tokens, image 8 patch 4 -> 4 tokens.
        fmri = FmriMae(make_rng(0), 16, 4, tiny_cfg(16), tiny_cfg(16))
        image = ImageMae(make_rng(1), 8, 4, 3, tiny_cfg(12), tiny_cfg(12))
        return CrossModalModel(make_rng(2), fmri, image)

    def test_token_count_mismatch_rejected(self):
        fmri = FmriMae(make_rng(0), 24, 4, tiny_cfg(), tiny_cfg())  # 6 tokens
        image = ImageMae(make_rng(1), 8, 4, 3, tiny_cfg(), tiny_cfg())  # 4 tokens
        with pytest.raises(ShapeError, match="token counts"):
            CrossModalModel(make_rng(2), fmri, image)

    def test_guided_reconstruction_shapes(self):
        model = self._model()
        v = make_rng(3).standard_normal((2, 16))
        u = make_rng(4).random((2, 8, 8, 3))
        v_rec, u_rec = model.guided_reconstructions(v, u, 0.75, 0.5, make_rng(5))
        assert v_rec.shape == (2, 16)
        assert u_rec.shape == (2, 8, 8, 3)

    def test_single_output_helpers_match_joint_call(self):
        model = self._model()
        v = make_rng(3).standard_normal((2, 16))
        u = make_rng(4).random((2, 8, 8, 3))
        joint = model.guided_reconstructions(v, u, 0.5, 0.5, make_rng(7))
        only_v = model.reconstruct_fmri_guided(v, u, 0.5, 0.5, make_rng(7))
        only_u = model.reconstruct_image_guided(v, u, 0.5, 0.5, make_rng(7))
        assert_array_equal(only_v.data, joint[0].data)
        assert_array_equal(only_u.data, joint[1].data)

    def test_image_loss_trains_voxel_encoder(self):
        # The point of the coupling: image reconstruction error must
        # backpropagate into the other modality's encoder via the queries.
        model = self._model()
        v = make_rng(3).standard_normal((2, 16))
        u = make_rng(4).random((2, 8, 8, 3))
        u_rec = model.reconstruct_image_guided(v, u, 0.75, 0.5, make_rng(5))
        backward(((u_rec - Tensor(u)) ** 2).mean())
        grads = [p.grad for p in model.fmri.encoder_params().values()]
        assert all(g is not None for g in grads)
        assert any(np.abs(g).max() > 0 for g in grads)


class TestConvLatentAE:
    def test_shapes_through_the_bottleneck(self):
        ae = ConvLatentAE(make_rng(0), image_size=16, channels=8, latent_channels=4)
        imgs = make_rng(1).random((3, 16, 16, 3))
        z = ae.encode(Tensor(imgs))
        assert z.shape == (3, 4, 4, 4)
        assert ae.decode(z).shape == (3, 16, 16, 3)

    def test_indivisible_image_size_rejected(self):
        with pytest.raises(ShapeError, match="divisible"):
            ConvLatentAE(make_rng(0), image_size=18)

    def test_decode_np_clips_to_image_range(self):
        ae = ConvLatentAE(make_rng(0), image_size=8, channels=4, latent_channels=2)
        out = ae.decode_np(10.0 * make_rng(1).standard_normal((2, 2, 2, 2)))
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_batched_encoding_matches_single_shot(self):
        ae = ConvLatentAE(make_rng(0), image_size=8, channels=4, latent_channels=2)
        imgs = make_rng(1).random((5, 8, 8, 3))
        assert_array_equal(ae.encode_np(imgs, batch=2), ae.encode_np(imgs, batch=64))

    def test_default_latent_scale_is_identity(self):
        assert ConvLatentAE(make_rng(0)).latent_scale == 1.0


class TestCondUNet:
    def _unet(self, **kw):
        kw.setdefault("latent_channels", 2)
        kw.setdefault("latent_size", 4)
        kw.setdefault("base", 4)
        kw.setdefault("temb_dim", 8)
        kw.setdefault("cond_dim", 6)
        kw.setdefault("n_classes", 3)
        kw.setdefault("max_t", 10)
        return CondUNet(make_rng(0), **kw)

    def test_output_matches_input_shape(self):
        model = self._unet()
        z = make_rng(1).standard_normal((2, 2, 4, 4))
        cond = Tensor(make_rng(2).standard_normal((2, 5, 6)))
        assert model(z, np.array([0, 9]), cond).shape == (2, 2, 4, 4)

    def test_untrained_model_predicts_exactly_zero(self):
        # Zero-initialised output convolution: the reverse process starts
        # as the identity, so early training cannot explode.
        model = self._unet()
        z = make_rng(1).standard_normal((3, 2, 4, 4))
        cond = model.class_condition(np.array([0, 1, 2]))
        assert_array_equal(model(z, 5, cond).data, np.zeros((3, 2, 4, 4)))

    def test_odd_latent_size_rejected(self):
        with pytest.raises(ShapeError, match="even"):
            self._unet(latent_size=5)

    def test_wrong_channel_count_rejected(self):
        model = self._unet()
        with pytest.raises(ShapeError, match="denoiser"):
            model(np.zeros((2, 3, 4, 4)), 1, Tensor(np.zeros((2, 1, 6))))

    def test_wrong_condition_width_rejected(self):
        model = self._unet()
        with pytest.raises(ShapeError, match="condition"):
            model(np.zeros((2, 2, 4, 4)), 1, Tensor(np.zeros((2, 1, 7))))

    def test_scalar_t_broadcasts_to_batch(self):
        model = self._unet()
        self._nudge(model)
        z = make_rng(1).standard_normal((2, 2, 4, 4))
        cond = model.class_condition(np.array([0, 1]))
        assert_array_equal(model(z, 7, cond).data,
                           model(z, np.array([7, 7]), cond).data)

    def test_class_condition_rows_come_from_table(self):
        model = self._unet()
        cond = model.class_condition(np.array([2, 0]))
        assert cond.shape == (2, 1, 6)
        assert_array_equal(cond.data[0, 0], model.class_emb.data[2])
        assert_array_equal(cond.data[1, 0], model.class_emb.data[0])

    def _nudge(self, model):
        # Zero-init output conv hides upstream differences; give it signal.
        model.out_conv.w.data[:] = 0.01 * make_rng(9).standard_normal(
            model.out_conv.w.data.shape)

    def test_condition_changes_output(self):
        model = self._unet()
        self._nudge(model)
        z = make_rng(1).standard_normal((2, 2, 4, 4))
        a = model(z, 3, model.class_condition(np.array([0, 0])))
        b = model(z, 3, model.class_condition(np.array([1, 1])))
        assert np.abs(a.data - b.data).max() > 0

    def test_noise_level_changes_output(self):
        model = self._unet()
        self._nudge(model)
        z = make_rng(1).standard_normal((2, 2, 4, 4))
        cond = model.class_condition(np.array([0, 1]))
        assert np.abs(model(z, 1, cond).data - model(z, 9, cond).data).max() > 0

    def test_parameter_subsets_are_disjoint_and_labelled(self):
        model = self._unet()
        ca = set(model.cross_attention_params())
        pool = set(model.conditioning_params())
        assert ca and pool and not ca & pool
        assert all(n.partition(".")[0] in ("attn_down", "attn_mid", "attn_up")
                   for n in ca)
        assert all(n.startswith("cond_pool.") for n in pool)
        assert (ca | pool) < set(model.named_params())


class TestConvClassifier:
    def _clf(self):
        return ConvClassifier(make_rng(0), n_classes=5, image_size=8, base=4)

    def test_probs_rows_are_distributions(self):
        probs = self._clf().probs(make_rng(1).random((6, 8, 8, 3)))
        assert probs.shape == (6, 5)
        assert probs.min() >= 0.0
        assert_allclose(probs.sum(axis=1), np.ones(6), atol=1e-9)

    def test_batched_probs_match_single_shot(self):
        clf = self._clf()
        imgs = make_rng(1).random((7, 8, 8, 3))
        assert_allclose(clf.probs(imgs, batch=3), clf.probs(imgs, batch=128),
                        rtol=0, atol=1e-12)

    def test_single_class_rejected(self):
        with pytest.raises(ShapeError, match="classes"):
            ConvClassifier(make_rng(0), n_classes=1, image_size=8)

    def test_non_image_input_rejected(self):
        with pytest.raises(ShapeError, match="images"):
            self._clf().logits(np.zeros((2, 8, 8)))

    def test_cross_entropy_matches_log_softmax_oracle(self):
        logits = Tensor(make_rng(1).standard_normal((4, 5)))
        labels = np.array([0, 3, 2, 4])
        expected = 0.0
        for i in range(4):
            row = logits.data[i]
            m = row.max()
            lse = m + math.log(np.exp(row - m).sum())
            expected += lse - row[labels[i]]
        assert_allclose(cross_entropy(logits, labels).item(), expected / 4, rtol=1e-12)

    def test_cross_entropy_gradient_flows(self):
        clf = self._clf()
        imgs = make_rng(1).random((4, 8, 8, 3))
        loss = cross_entropy(clf.logits(imgs), np.array([0, 1, 2, 3]))
        backward(loss)
        assert clf.head.w.grad is not None
        assert np.abs(clf.head.w.grad).max() > 0
