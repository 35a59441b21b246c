import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from changesplat import masks, ssim
from changesplat.scene import ChangeMask, FeatureMap, ImageBuffer


def reference_ssim(a, b):
    """Direct sliding-window SSIM with renormalized windows at the borders."""
    r = ssim.WINDOW_SIZE // 2
    k1 = np.exp(-0.5 * ((np.arange(ssim.WINDOW_SIZE) - r) / ssim.WINDOW_SIGMA) ** 2)
    k2d = np.outer(k1, k1)
    k2d /= k2d.sum()
    h, w = a.shape
    out = np.empty((h, w))
    for i in range(h):
        for j in range(w):
            y0, y1 = max(i - r, 0), min(i + r + 1, h)
            x0, x1 = max(j - r, 0), min(j + r + 1, w)
            win = k2d[y0 - i + r:y1 - i + r, x0 - j + r:x1 - j + r]
            win = win / win.sum()
            pa = a[y0:y1, x0:x1]
            pb = b[y0:y1, x0:x1]
            m1 = (win * pa).sum()
            m2 = (win * pb).sum()
            v1 = (win * pa * pa).sum() - m1 * m1
            v2 = (win * pb * pb).sum() - m2 * m2
            cov = (win * pa * pb).sum() - m1 * m2
            out[i, j] = ((2 * m1 * m2 + ssim.C1) * (2 * cov + ssim.C2)) / (
                (m1 * m1 + m2 * m2 + ssim.C1) * (v1 + v2 + ssim.C2))
    return out


class TestSsim:
    def test_self_similarity(self):
        rng = np.random.default_rng(0)
        a = rng.random((24, 24))
        np.testing.assert_allclose(ssim.ssim_map_gray(a, a), 1.0, atol=1e-9)

    def test_constant_images_closed_form(self):
        a = np.zeros((16, 16))
        b = np.ones((16, 16))
        expected = ssim.C1 / (1.0 + ssim.C1)
        np.testing.assert_allclose(ssim.ssim_map_gray(a, b), expected, atol=1e-12)

    def test_matches_sliding_window_reference(self):
        rng = np.random.default_rng(1)
        for _ in range(3):
            a = rng.random((32, 32))
            b = rng.random((32, 32))
            np.testing.assert_allclose(
                ssim.ssim_map_gray(a, b), reference_ssim(a, b), atol=1e-6)

    def test_symmetric(self):
        rng = np.random.default_rng(2)
        a, b = rng.random((20, 20)), rng.random((20, 20))
        np.testing.assert_allclose(
            ssim.ssim_map_gray(a, b), ssim.ssim_map_gray(b, a), atol=1e-9)

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(3)
        a = rng.random((12, 12))
        b = rng.random((12, 12))
        upstream = rng.normal(size=(12, 12))
        _, grad = ssim.ssim_map_gray_with_grad(a, b, upstream)
        h = 1e-6
        idx = [(0, 0), (5, 7), (11, 11), (3, 0)]
        for i, j in idx:
            ap, am = a.copy(), a.copy()
            ap[i, j] += h
            am[i, j] -= h
            fd = ((ssim.ssim_map_gray(ap, b) * upstream).sum()
                  - (ssim.ssim_map_gray(am, b) * upstream).sum()) / (2 * h)
            assert grad[i, j] == pytest.approx(fd, rel=1e-5, abs=1e-9)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="mismatch"):
            ssim.ssim_map_gray(np.zeros((4, 4)), np.zeros((4, 5)))


class TestSsimMap:
    def test_rgb_converted_to_luma(self):
        rng = np.random.default_rng(4)
        rgb = rng.random((16, 16, 3))
        a = ImageBuffer(rgb)
        s = masks.ssim_map(a, a)
        np.testing.assert_allclose(s, 1.0, atol=1e-9)

    def test_mismatch_raises(self):
        with pytest.raises(ValueError, match="mismatch"):
            masks.ssim_map(ImageBuffer(np.zeros((4, 4))), ImageBuffer(np.zeros((5, 4))))


class TestStructureMask:
    def test_identical_images_no_change(self):
        img = ImageBuffer(np.random.default_rng(5).random((16, 16)))
        m = masks.structure_mask(img, img)
        assert m.binary_flag
        assert m.values.sum() == 0

    def test_constant_black_vs_white_all_change(self):
        a = ImageBuffer(np.zeros((16, 16)))
        b = ImageBuffer(np.ones((16, 16)))
        m = masks.structure_mask(a, b)
        assert m.values.min() == 1.0

    def test_threshold_inclusive_at_half(self):
        # Values exactly at the threshold count as change.
        s = np.array([[0.49, 0.5, 0.51]])
        flagged = (s <= masks.SSIM_CHANGE_THRESHOLD).astype(float)
        np.testing.assert_array_equal(flagged, [[1.0, 1.0, 0.0]])


class TestFeatureDiffMask:
    def grid(self, values, d=2):
        data = np.zeros(values.shape + (d,))
        data[..., 0] = values
        return FeatureMap(data=data, patch_size=1)

    def test_equal_features_zero_mask(self):
        f = self.grid(np.random.default_rng(6).random((4, 4)))
        m = masks.feature_diff_mask(f, f, 4, 4)
        assert m.values.sum() == 0

    def test_hand_computed_normalization_and_threshold(self):
        # Per-patch summed diffs (0, 1, 2, 4) normalize to (0, .25, .5, 1),
        # then sub-0.5 values are zeroed.
        f_a = self.grid(np.zeros((2, 2)))
        f_b = self.grid(np.array([[0.0, 1.0], [2.0, 4.0]]))
        m = masks.feature_diff_mask(f_a, f_b, 2, 2)
        np.testing.assert_allclose(m.values, [[0.0, 0.0], [0.5, 1.0]])

    def test_constant_grid_upsamples_to_constant(self):
        up = masks.upsample_bicubic(np.full((3, 3), 0.7), 12, 12)
        np.testing.assert_allclose(up, 0.7, atol=1e-12)

    def test_mismatch_raises(self):
        with pytest.raises(ValueError, match="mismatch"):
            masks.feature_diff_mask(self.grid(np.zeros((2, 2))),
                                    self.grid(np.zeros((3, 2))), 4, 4)

    def test_embedding_permutation_invariance(self):
        rng = np.random.default_rng(7)
        a = rng.random((4, 4, 6))
        b = rng.random((4, 4, 6))
        perm = rng.permutation(6)
        m1 = masks.feature_diff_mask(FeatureMap(a, 8), FeatureMap(b, 8), 32, 32)
        m2 = masks.feature_diff_mask(FeatureMap(a[..., perm], 8),
                                     FeatureMap(b[..., perm], 8), 32, 32)
        np.testing.assert_allclose(m1.values, m2.values, atol=1e-12)


class TestCombineFilterBinarize:
    def test_combine_identity_and_annihilator(self):
        m_f = ChangeMask(np.array([[0.0, 0.6, 0.9]]))
        ones = ChangeMask(np.ones((1, 3)))
        zeros = ChangeMask(np.zeros((1, 3)))
        np.testing.assert_array_equal(masks.combine_masks(m_f, ones).values, m_f.values)
        assert masks.combine_masks(m_f, zeros).values.sum() == 0

    def test_combine_elementwise(self):
        m_f = ChangeMask(np.array([[0.0, 0.6, 0.9]]))
        m_s = ChangeMask(np.array([[1.0, 0.0, 1.0]]), binary_flag=True)
        np.testing.assert_allclose(masks.combine_masks(m_f, m_s).values, [[0.0, 0.0, 0.9]])

    def test_combine_commutative_and_bounded(self):
        rng = np.random.default_rng(8)
        a = ChangeMask(rng.random((5, 5)))
        b = ChangeMask(rng.random((5, 5)))
        ab = masks.combine_masks(a, b).values
        np.testing.assert_array_equal(ab, masks.combine_masks(b, a).values)
        assert np.all(ab <= np.minimum(a.values, b.values) + 1e-15)

    def test_filter_unseen_inclusive_threshold(self):
        m = ChangeMask(np.array([[0.8, 0.8]]))
        alpha = ImageBuffer(np.array([[0.49, 0.5]]))
        np.testing.assert_allclose(masks.filter_unseen(m, alpha).values, [[0.0, 0.8]])

    def test_filter_unseen_extremes(self):
        m = ChangeMask(np.random.default_rng(9).random((4, 4)))
        ones = ImageBuffer(np.ones((4, 4)))
        zeros = ImageBuffer(np.zeros((4, 4)))
        np.testing.assert_array_equal(masks.filter_unseen(m, ones).values, m.values)
        assert masks.filter_unseen(m, zeros).values.sum() == 0

    def test_filter_never_increases(self):
        rng = np.random.default_rng(10)
        m = ChangeMask(rng.random((6, 6)))
        alpha = ImageBuffer(rng.random((6, 6)))
        assert np.all(masks.filter_unseen(m, alpha).values <= m.values)

    def test_binarize_inclusive(self):
        m = ChangeMask(np.array([[0.2, 0.5, 0.8]]))
        out = masks.binarize(m)
        assert out.binary_flag
        np.testing.assert_array_equal(out.values, [[0.0, 1.0, 1.0]])

    def test_binarize_all_half(self):
        m = ChangeMask(np.full((3, 3), 0.5))
        assert masks.binarize(m).values.min() == 1.0

    def test_binarize_idempotent(self):
        m = ChangeMask(np.random.default_rng(11).random((4, 4)))
        once = masks.binarize(m)
        twice = masks.binarize(once)
        np.testing.assert_array_equal(once.values, twice.values)

    def test_binarize_bad_threshold(self):
        with pytest.raises(ValueError, match="threshold"):
            masks.binarize(ChangeMask(np.zeros((2, 2))), threshold=1.5)


@settings(max_examples=25, deadline=None)
@given(st.integers(min_value=0, max_value=2**31 - 1))
def test_mask_pipeline_properties(seed):
    rng = np.random.default_rng(seed)
    a = ChangeMask(rng.random((6, 6)))
    b = ChangeMask(rng.random((6, 6)))
    combined = masks.combine_masks(a, b)
    assert np.all(combined.values <= a.values + 1e-15)
    assert np.all(combined.values <= b.values + 1e-15)
    binary = masks.binarize(combined)
    assert set(np.unique(binary.values)) <= {0.0, 1.0}
    alpha = ImageBuffer(rng.random((6, 6)))
    filtered = masks.filter_unseen(binary, alpha)
    assert np.all(filtered.values <= binary.values)
