"""Binary PPM round-trips and image-directory layout."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voximage import imageio
from voximage.errors import MissingArtifactError, ShapeError
from voximage.rng import make_rng


class TestPpmRoundTrip:
    def test_quantised_roundtrip_exact(self, rng, tmp_path):
        # Quantise first: 8-bit grid values survive a write/read unchanged.
        img = np.round(rng.uniform(0, 1, size=(6, 9, 3)) * 255) / 255.0
        path = str(tmp_path / "a.ppm")
        imageio.write_ppm(path, img)
        np.testing.assert_array_equal(imageio.read_ppm(path), img)

    def test_quantisation_error_bounded(self, rng, tmp_path):
        img = rng.uniform(0, 1, size=(5, 5, 3))
        path = str(tmp_path / "b.ppm")
        imageio.write_ppm(path, img)
        back = imageio.read_ppm(path)
        assert np.abs(back - img).max() <= 0.5 / 255.0 + 1e-12

    def test_out_of_range_clipped(self, tmp_path):
        img = np.array([[[-0.5, 0.0, 1.7]]])
        path = str(tmp_path / "c.ppm")
        imageio.write_ppm(path, img)
        np.testing.assert_array_equal(imageio.read_ppm(path)[0, 0], [0.0, 0.0, 1.0])

    def test_header_layout(self, tmp_path):
        path = str(tmp_path / "d.ppm")
        imageio.write_ppm(path, np.zeros((2, 3, 3)))
        raw = open(path, "rb").read()
        assert raw.startswith(b"P6\n3 2\n255\n")
        assert len(raw) == len(b"P6\n3 2\n255\n") + 2 * 3 * 3

    def test_write_determinism(self, rng, tmp_path):
        img = rng.uniform(0, 1, size=(4, 4, 3))
        p1, p2 = str(tmp_path / "e1.ppm"), str(tmp_path / "e2.ppm")
        imageio.write_ppm(p1, img)
        imageio.write_ppm(p2, img)
        assert open(p1, "rb").read() == open(p2, "rb").read()

    @given(h=st.integers(1, 8), w=st.integers(1, 8), seed=st.integers(0, 50))
    @settings(max_examples=25, deadline=None)
    def test_any_shape_roundtrips(self, h, w, seed, tmp_path_factory):
        img = np.round(make_rng(seed).uniform(0, 1, size=(h, w, 3)) * 255) / 255.0
        path = str(tmp_path_factory.mktemp("ppm") / "x.ppm")
        imageio.write_ppm(path, img)
        np.testing.assert_array_equal(imageio.read_ppm(path), img)


class TestPpmErrors:
    def test_bad_shape_rejected(self, tmp_path):
        with pytest.raises(ShapeError):
            imageio.write_ppm(str(tmp_path / "x.ppm"), np.zeros((4, 4)))
        with pytest.raises(ShapeError):
            imageio.write_ppm(str(tmp_path / "x.ppm"), np.zeros((4, 4, 1)))

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            imageio.read_ppm(str(tmp_path / "absent.ppm"))

    def test_wrong_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bad.ppm")
        open(path, "wb").write(b"P5\n2 2\n255\n" + b"\x00" * 4)
        with pytest.raises(ShapeError):
            imageio.read_ppm(path)

    def test_truncated_pixels_rejected(self, tmp_path):
        path = str(tmp_path / "trunc.ppm")
        imageio.write_ppm(path, np.zeros((4, 4, 3)))
        raw = open(path, "rb").read()
        open(path, "wb").write(raw[:-5])
        with pytest.raises(ShapeError):
            imageio.read_ppm(path)

    def test_unsupported_maxval(self, tmp_path):
        path = str(tmp_path / "deep.ppm")
        open(path, "wb").write(b"P6\n1 1\n65535\n" + b"\x00" * 6)
        with pytest.raises(ShapeError):
            imageio.read_ppm(path)


class TestImageDir:
    def test_roundtrip_with_labels(self, rng, tmp_path):
        imgs = np.round(rng.uniform(0, 1, size=(5, 4, 4, 3)) * 255) / 255.0
        labels = np.array([3, 1, 4, 1, 5])
        d = str(tmp_path / "gen")
        imageio.save_image_dir(d, imgs, "gen", labels=labels)
        np.testing.assert_array_equal(imageio.load_image_dir(d, "gen"), imgs)
        np.testing.assert_array_equal(imageio.load_labels(d), labels)

    def test_index_order_stable(self, rng, tmp_path):
        # 5-digit zero padding keeps lexicographic == numeric order.
        imgs = np.round(rng.uniform(0, 1, size=(12, 2, 2, 3)) * 255) / 255.0
        d = str(tmp_path / "many")
        imageio.save_image_dir(d, imgs, "gen")
        np.testing.assert_array_equal(imageio.load_image_dir(d, "gen"), imgs)

    def test_prefix_filtering(self, rng, tmp_path):
        a = np.round(rng.uniform(0, 1, size=(2, 3, 3, 3)) * 255) / 255.0
        b = np.round(rng.uniform(0, 1, size=(3, 3, 3, 3)) * 255) / 255.0
        d = str(tmp_path / "mixed")
        imageio.save_image_dir(d, a, "gen")
        imageio.save_image_dir(d, b, "gt")
        assert imageio.load_image_dir(d, "gen").shape[0] == 2
        assert imageio.load_image_dir(d, "gt").shape[0] == 3

    def test_missing_dir_and_empty_dir(self, tmp_path):
        with pytest.raises(MissingArtifactError):
            imageio.load_image_dir(str(tmp_path / "absent"), "gen")
        empty = tmp_path / "empty"
        empty.mkdir()
        with pytest.raises(MissingArtifactError):
            imageio.load_image_dir(str(empty), "gen")

    def test_labels_absent_is_none(self, tmp_path):
        d = tmp_path / "nolabels"
        d.mkdir()
        assert imageio.load_labels(str(d)) is None
