"""Patchify / mask / reassemble invariants.

Masked and visible index sets must partition the patch range, mask counts
follow round-half-up, patchify and its inverse are mutually inverse, and
sparsification zeroes exactly the requested fraction per row.
"""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voximage import masking
from voximage.errors import ShapeError
from voximage.rng import make_rng
from voximage.tensor import Tensor, backward


class TestRoundHalfUp:
    @pytest.mark.parametrize("x,want", [
        (3.5, 4), (2.5, 3), (-0.5, 0), (0.49, 0), (0.5, 1), (7.0, 7),
    ])
    def test_values(self, x, want):
        assert masking.round_half_up(x) == want

    def test_mask_count_half_of_seven(self):
        # Ratio 0.5 of 7 patches masks 4, not 3.
        assert masking.mask_count(7, 0.5) == 4

    def test_mask_count_bounds(self):
        assert masking.mask_count(10, 0.0) == 0
        assert masking.mask_count(10, 1.0) == 10
        with pytest.raises(ShapeError):
            masking.mask_count(10, 1.5)


class TestRandomMask:
    def test_partition_property(self, rng):
        tokens = Tensor(rng.standard_normal((3, 11, 4)))
        ms = masking.random_mask(tokens, 0.6, rng)
        for i in range(3):
            both = np.concatenate([ms.visible_indices[i], ms.mask_indices[i]])
            assert sorted(both.tolist()) == list(range(11))
            # Each half is sorted ascending.
            assert np.all(np.diff(ms.visible_indices[i]) > 0)
            assert np.all(np.diff(ms.mask_indices[i]) > 0)

    def test_mask_count_follows_ratio(self, rng):
        tokens = Tensor(rng.standard_normal((2, 7, 3)))
        ms = masking.random_mask(tokens, 0.5, rng)
        assert ms.mask_indices.shape == (2, 4)
        assert ms.visible_tokens.shape == (2, 3, 3)

    def test_visible_tokens_gathered(self, rng):
        x = rng.standard_normal((2, 9, 5))
        ms = masking.random_mask(Tensor(x), 0.4, rng)
        for i in range(2):
            np.testing.assert_array_equal(ms.visible_tokens.data[i],
                                          x[i, ms.visible_indices[i]])

    def test_rows_masked_independently(self):
        rng = make_rng(7)
        tokens = Tensor(np.zeros((8, 32, 2)))
        ms = masking.random_mask(tokens, 0.5, rng)
        rows = {tuple(r) for r in ms.mask_indices}
        assert len(rows) > 1  # astronomically unlikely to collide

    def test_deterministic_under_seed(self):
        x = np.arange(60.0).reshape(2, 10, 3)
        a = masking.random_mask(Tensor(x), 0.3, make_rng(5))
        b = masking.random_mask(Tensor(x), 0.3, make_rng(5))
        np.testing.assert_array_equal(a.mask_indices, b.mask_indices)

    def test_non_token_input_rejected(self, rng):
        with pytest.raises(ShapeError):
            masking.random_mask(Tensor(np.zeros((4, 5))), 0.5, rng)

    def test_full_visibility(self, rng):
        x = rng.standard_normal((2, 6, 3))
        ms = masking.full_visibility(Tensor(x))
        assert ms.mask_indices.shape == (2, 0)
        np.testing.assert_array_equal(ms.visible_tokens.data, x)

    @given(p=st.integers(2, 20), ratio=st.floats(0.0, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_partition_any_size(self, p, ratio):
        rng = make_rng(p)
        ms = masking.random_mask(Tensor(np.zeros((1, p, 2))), ratio, rng)
        both = np.concatenate([ms.visible_indices[0], ms.mask_indices[0]])
        assert sorted(both.tolist()) == list(range(p))
        assert ms.mask_indices.shape[1] == masking.round_half_up(ratio * p)


class TestSparsify:
    def test_exact_zero_count_per_row(self, rng):
        x = rng.standard_normal((5, 40)) + 10.0  # keep away from zero
        out = masking.random_sparsify(x, 0.25, rng)
        assert out.shape == x.shape
        np.testing.assert_array_equal((out == 0).sum(axis=1), 10)

    def test_survivors_unchanged(self, rng):
        x = rng.standard_normal((3, 20)) + 5.0
        out = masking.random_sparsify(x, 0.5, rng)
        kept = out != 0
        np.testing.assert_array_equal(out[kept], x[kept])

    def test_input_not_mutated(self, rng):
        x = rng.standard_normal((2, 10)) + 5.0
        before = x.copy()
        masking.random_sparsify(x, 0.5, rng)
        np.testing.assert_array_equal(x, before)

    def test_vector_input(self, rng):
        x = rng.standard_normal(30) + 5.0
        out = masking.random_sparsify(x, 0.2, rng)
        assert out.shape == (30,)
        assert (out == 0).sum() == 6

    def test_full_fraction_rejected(self, rng):
        with pytest.raises(ShapeError):
            masking.random_sparsify(np.ones(4), 1.0, rng)


class TestVectorPatchify:
    def test_exact_multiple_no_pad(self, rng):
        v = rng.standard_normal((2, 12))
        tokens, pad = masking.patchify_vector(v, 4)
        assert pad == 0 and tokens.shape == (2, 3, 4)
        np.testing.assert_array_equal(tokens.reshape(2, 12), v)

    def test_padding_recorded_and_zero(self, rng):
        v = rng.standard_normal((1, 10))
        tokens, pad = masking.patchify_vector(v, 4)
        assert pad == 2 and tokens.shape == (1, 3, 4)
        np.testing.assert_array_equal(tokens[0, 2, 2:], [0.0, 0.0])

    def test_reassemble_inverts(self, rng):
        v = rng.standard_normal((2, 10))
        tokens, _ = masking.patchify_vector(v, 4)
        ms = masking.random_mask(Tensor(tokens), 0.5, rng)
        out = masking.reassemble(ms, Tensor(tokens), n_values=10)
        np.testing.assert_array_equal(out.data, v)

    def test_reassemble_token_count_checked(self, rng):
        tokens, _ = masking.patchify_vector(rng.standard_normal((1, 12)), 4)
        ms = masking.random_mask(Tensor(tokens), 0.5, rng)
        with pytest.raises(ShapeError):
            masking.reassemble(ms, Tensor(np.zeros((1, 5, 4))))

    @given(n=st.integers(1, 30), patch=st.integers(1, 8))
    @settings(max_examples=40, deadline=None)
    def test_roundtrip_any_shape(self, n, patch):
        rng = make_rng(n * 31 + patch)
        v = rng.standard_normal((2, n))
        tokens, pad = masking.patchify_vector(v, patch)
        assert tokens.shape[1] * patch == n + pad and 0 <= pad < patch
        ms = masking.full_visibility(Tensor(tokens))
        out = masking.reassemble(ms, Tensor(tokens), n_values=n)
        np.testing.assert_array_equal(out.data, v)


class TestImagePatchify:
    def test_roundtrip(self, rng):
        img = rng.standard_normal((2, 8, 8, 3))
        tokens = masking.patchify_image(img, 4)
        assert tokens.shape == (2, 4, 48)
        back = masking.unpatchify_image(Tensor(tokens), 8, 4, 3)
        np.testing.assert_array_equal(back.data, img)

    def test_token_layout(self):
        # Pixel (row r, col c, channel ch) of patch (gi, gj) lands at token
        # gi*grid+gj, coordinate (r*patch + c)*C + ch.
        img = np.arange(2 * 4 * 4 * 1, dtype=np.float64).reshape(2, 4, 4, 1)
        tokens = masking.patchify_image(img, 2)
        assert tokens[0, 0].tolist() == [0, 1, 4, 5]
        assert tokens[0, 1].tolist() == [2, 3, 6, 7]
        assert tokens[0, 3].tolist() == [10, 11, 14, 15]

    def test_indivisible_rejected(self):
        with pytest.raises(ShapeError):
            masking.patchify_image(np.zeros((1, 6, 6, 3)), 4)
        with pytest.raises(ShapeError):
            masking.patchify_image(np.zeros((1, 6, 4, 3)), 2)

    def test_unpatchify_shape_checked(self):
        with pytest.raises(ShapeError):
            masking.unpatchify_image(Tensor(np.zeros((1, 4, 12))), 8, 4, 3)

    def test_unpatchify_differentiable(self, rng):
        tokens = Tensor(rng.standard_normal((1, 4, 12)), requires_grad=True)
        out = masking.unpatchify_image(tokens, 4, 2, 3)
        backward((out * out).sum())
        np.testing.assert_allclose(tokens.grad, 2 * tokens.data, rtol=1e-14)
