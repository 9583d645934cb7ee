"""Filter bank features and the FEAT binary format."""

import numpy as np
import pytest

from pointbox import (
    ConfigError,
    FeatureMap,
    FilterBankSpec,
    FormatError,
    ImageGrid,
    extract_features,
    load_features,
    save_features,
)
from pointbox.features import sobel_gradients


def _sobel_by_hand(gray):
    kx = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=float)
    padded = np.pad(gray.astype(float), 1, mode="symmetric")
    h, w = gray.shape
    gx = np.zeros((h, w))
    gy = np.zeros((h, w))
    for r in range(h):
        for c in range(w):
            win = padded[r : r + 3, c : c + 3]
            gx[r, c] = (kx * win).sum()
            gy[r, c] = (kx.T * win).sum()
    return gx, gy


class TestFilterBank:
    def test_channel_count(self):
        assert FilterBankSpec().channels == 10
        assert FilterBankSpec(gaussian_sigmas=(0.0,), include_color=False).channels == 2
        assert FilterBankSpec(gaussian_sigmas=(0.0, 1.0, 2.0), include_gradients=False).channels == 9

    def test_constant_image_all_zero(self, flat_image):
        fm = extract_features(flat_image, FilterBankSpec())
        assert np.array_equal(fm.data, np.zeros_like(fm.data))

    def test_deterministic(self, noise_image):
        a = extract_features(noise_image, FilterBankSpec())
        b = extract_features(noise_image, FilterBankSpec())
        assert np.array_equal(a.data, b.data)

    def test_checkerboard_matches_hand_sobel(self):
        board = np.indices((4, 4)).sum(axis=0) % 2 * 255
        img = ImageGrid(np.stack([board] * 3, axis=-1).astype(np.uint8))
        spec = FilterBankSpec(gaussian_sigmas=(0.0,), include_color=False)
        fm = extract_features(img, spec)
        gx, gy = _sobel_by_hand(board.astype(float))
        mag = np.sqrt(gx**2 + gy**2)
        expected = (mag - mag.mean()) / mag.std()
        np.testing.assert_allclose(fm.data[..., 0], expected, atol=1e-12)

    def test_standardization_moments(self, noise_image):
        fm = extract_features(noise_image, FilterBankSpec())
        flat = fm.data.reshape(-1, fm.channels)
        for c in range(fm.channels):
            if np.ptp(flat[:, c]) == 0:
                continue
            assert abs(flat[:, c].mean()) < 1e-6
            assert abs(flat[:, c].var() - 1.0) < 1e-4

    def test_translation_equivariance_interior(self, rng):
        # raw (unstandardized) responses shift exactly with the content;
        # compare two crops of one canvas, staying clear of the 4-sigma
        # blur radius at every border
        canvas = np.clip(rng.normal(128, 50, size=(40, 40, 3)), 0, 255).astype(np.uint8)
        crop_a = ImageGrid(canvas[0:30, 0:30])
        crop_b = ImageGrid(canvas[2:32, 3:33])
        spec = FilterBankSpec()
        fa = extract_features(crop_a, spec, standardize=False).data
        fb = extract_features(crop_b, spec, standardize=False).data
        np.testing.assert_allclose(fa[12:20, 12:20], fb[10:18, 9:17], atol=1e-9)

    def test_stride_pooling_shape(self, rng):
        img = ImageGrid(np.clip(rng.normal(128, 40, (13, 9, 3)), 0, 255).astype(np.uint8))
        fm = extract_features(img, FilterBankSpec(stride=4))
        assert (fm.height, fm.width) == (4, 3)

    def test_stride_too_large(self, flat_image):
        with pytest.raises(ConfigError):
            extract_features(flat_image, FilterBankSpec(stride=100))

    def test_sobel_transpose_symmetry(self, rng):
        gray = rng.normal(size=(7, 5))
        gx, gy = sobel_gradients(gray)
        gxt, gyt = sobel_gradients(gray.T)
        np.testing.assert_allclose(gxt, gy.T, atol=1e-12)
        np.testing.assert_allclose(gyt, gx.T, atol=1e-12)


class TestFeatFormat:
    def test_round_trip(self, tmp_path, rng):
        fm = FeatureMap(rng.normal(size=(5, 4, 3)).astype(np.float32).astype(np.float64))
        save_features(tmp_path / "f.feat", fm)
        again = load_features(tmp_path / "f.feat")
        assert np.array_equal(again.data, fm.data)

    def test_reference_bytes(self, tmp_path):
        # FEAT1 | u32 h=2 w=2 d=1 | f32 payload 1,2,3,4
        raw = b"FEAT1" + np.array([2, 2, 1], dtype="<u4").tobytes() + np.array(
            [1, 2, 3, 4], dtype="<f4"
        ).tobytes()
        (tmp_path / "ref.feat").write_bytes(raw)
        fm = load_features(tmp_path / "ref.feat")
        assert fm.data[..., 0].tolist() == [[1.0, 2.0], [3.0, 4.0]]

    def test_payload_size_mismatch(self, tmp_path):
        raw = b"FEAT1" + np.array([1, 1, 16], dtype="<u4").tobytes() + b"\0" * (4 * 15)
        (tmp_path / "bad.feat").write_bytes(raw)
        with pytest.raises(FormatError, match="1x1x16"):
            load_features(tmp_path / "bad.feat")

    def test_bad_magic(self, tmp_path):
        (tmp_path / "bad.feat").write_bytes(b"NOPE!" + b"\0" * 12)
        with pytest.raises(FormatError, match="magic"):
            load_features(tmp_path / "bad.feat")
