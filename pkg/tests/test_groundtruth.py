import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ssrhef import groundtruth as gt
from ssrhef.groundtruth import AnnotationSet


def ann(points, h=64, w=64):
    return AnnotationSet(points, h, w)


def random_ann(rng, n, h=64, w=64):
    pts = np.column_stack([rng.uniform(0, w, n), rng.uniform(0, h, n)]) if n else np.zeros((0, 2))
    pts = np.minimum(pts, [w - 1e-9, h - 1e-9])
    return AnnotationSet(pts, h, w)


class TestAnnotationSet:
    def test_out_of_bounds_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            ann([[64.0, 3.0]])

    def test_empty_dims_rejected(self):
        with pytest.raises(ValueError):
            AnnotationSet([], 0, 10)


class TestDensity:
    def test_empty(self):
        d = gt.encode_density(ann([]))
        assert d.values.shape == (64, 64) and not d.values.any()

    def test_centre_head(self):
        d = gt.encode_density(ann([[32.0, 32.0]]), 4.0)
        assert abs(d.values.sum() - 1.0) < 1e-9
        assert np.unravel_index(d.values.argmax(), d.values.shape) == (32, 32)

    def test_corner_head_renormalised(self):
        d = gt.encode_density(ann([[0.0, 0.0]]), 4.0)
        total = 0.0
        for row in d.values:
            for v in row:
                total += v
        assert abs(total - 1.0) < 1e-9
        assert d.values.min() >= 0

    def test_truncation_radius(self):
        d = gt.encode_density(ann([[32.0, 32.0]]), 2.0)
        nz = np.argwhere(d.values > 0)
        assert nz.min() == 32 - 8 and nz.max() == 32 + 8

    def test_bad_sigma(self):
        with pytest.raises(ValueError):
            gt.encode_density(ann([]), 0.0)

    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(0, 50))
    def test_conservation(self, seed, n):
        rng = np.random.default_rng(seed)
        a = random_ann(rng, n)
        d = gt.encode_density(a)
        assert abs(d.values.sum() - n) < 1e-6 * max(1, n)

    def test_translation_equivariance_interior(self):
        pts = np.array([[20.3, 22.0], [30.0, 35.7], [40.5, 26.1]])
        d0 = gt.encode_density(ann(pts)).values
        d1 = gt.encode_density(ann(pts + 2)).values
        assert np.array_equal(d1[2:, 2:], d0[:-2, :-2])


class TestSegmentation:
    def test_empty(self):
        assert not gt.encode_segmentation(ann([])).any()

    def test_single_block(self):
        s = gt.encode_segmentation(ann([[32.0, 32.0]]))
        assert s.sum() == 225
        assert s[25:40, 25:40].all()

    def test_overlap_union_by_enumeration(self):
        pts = [(30, 32), (35, 32)]
        cells = {(y, x) for cx, cy in pts for y in range(cy - 7, cy + 8) for x in range(cx - 7, cx + 8)}
        s = gt.encode_segmentation(ann(pts))
        assert s.sum() == len(cells) < 450

    def test_clipped_at_border(self):
        assert gt.encode_segmentation(ann([[0.0, 0.0]])).sum() == 64

    def test_non_overlapping_count(self):
        pts = [[10, 10], [30, 10], [50, 10], [10, 40], [40, 45]]
        assert gt.encode_segmentation(ann(pts)).sum() == 225 * len(pts)


class TestPyramid:
    def test_zero(self):
        p = gt.build_seg_pyramid(np.zeros((64, 64)))
        assert [lv.shape for lv in p.levels] == [(32, 32), (16, 16), (8, 8)]
        assert not any(lv.any() for lv in p.levels)

    def test_single_pixel(self):
        s = np.zeros((8, 8))
        s[0, 0] = 1
        assert all(lv[0, 0] == 1 and lv.sum() == 1 for lv in gt.build_seg_pyramid(s).levels)

    def test_block_area(self):
        s = gt.encode_segmentation(ann([[32.0, 32.0]]))
        covered = {(y // 2, x // 2) for y, x in np.argwhere(s)}
        lv = gt.build_seg_pyramid(s).levels[0]
        assert lv.sum() == len(covered) == 64

    def test_soundness_random(self):
        rng = np.random.default_rng(0)
        s0 = gt.encode_segmentation(random_ann(rng, 20))
        levels = [s0] + gt.build_seg_pyramid(s0).levels
        for fine, coarse in zip(levels, levels[1:]):
            h, w = coarse.shape
            assert np.array_equal(coarse, fine[:2 * h, :2 * w].reshape(h, 2, w, 2).max(axis=(1, 3)))
            assert set(np.unique(coarse)) <= {0, 1}

    def test_odd_dims(self):
        s = np.zeros((9, 9))
        s[8, 8] = 1
        p = gt.build_seg_pyramid(s)
        assert [lv.shape for lv in p.levels] == [(5, 5), (3, 3), (2, 2)]
        assert p.levels[2][1, 1] == 1


class TestDownsample:
    def test_uniform(self):
        d = gt.downsample_density(gt.DensityMap(np.full((16, 24), 0.5)), 8)
        assert d.stride == 8 and np.all(d.values == 32.0)

    def test_block_oracle_and_sum(self):
        v = np.random.default_rng(1).random((20, 13))
        d = gt.downsample_density(gt.DensityMap(v), 8)
        expected = np.zeros((3, 2))
        for i in range(20):
            for j in range(13):
                expected[i // 8, j // 8] += v[i, j]
        assert np.allclose(d.values, expected, atol=1e-13)
        assert abs(d.values.sum() - v.sum()) < 1e-12

    def test_bad_factor(self):
        with pytest.raises(ValueError):
            gt.downsample_density(gt.DensityMap(np.zeros((8, 8))), 0)


class TestClasses:
    def test_worked_example(self):
        spec = gt.compute_thr([0, 12, 30, 7], K=3)
        assert spec.thr == 10
        assert [gt.encode_class_label(c, spec) for c in (5, 15, 25)] == [0, 1, 2]

    @pytest.mark.parametrize("c_max,thr", [(3139, 209.3), (578, 38.5), (4543, 302.9), (12865, 857.7), (253, 16.9), (7286, 485.7)])
    def test_dataset_thresholds(self, c_max, thr):
        assert abs(gt.compute_thr([1, c_max]).thr - thr) < 0.1

    def test_edges(self):
        spec = gt.compute_thr([30], K=3)
        assert gt.encode_class_label(0, spec) == 0
        assert gt.encode_class_label(10, spec) == 1
        assert gt.encode_class_label(30, spec) == 2
        assert gt.encode_class_label(1000, spec) == 2

    def test_degenerate_and_errors(self):
        assert gt.compute_thr([0, 0]).thr == 1.0
        with pytest.raises(ValueError):
            gt.compute_thr([])
        with pytest.raises(ValueError):
            gt.encode_class_label(-1, gt.compute_thr([3]))

    def test_monotone_surjective(self):
        spec = gt.compute_thr([150], K=15)
        labels = [gt.encode_class_label(c, spec) for c in np.linspace(0, 150, 1001)]
        assert all(a <= b for a, b in zip(labels, labels[1:]))
        assert set(labels) == set(range(15))


class TestBundle:
    def test_empty(self):
        b = gt.make_bundle(ann([]), 4.0, gt.compute_thr([10]))
        assert b.count == 0 and b.label == 0
        assert not b.density.values.any() and not any(lv.any() for lv in b.pyramid.levels)

    def test_consistency(self):
        rng = np.random.default_rng(3)
        a = random_ann(rng, 17)
        b = gt.make_bundle(a, 4.0, gt.compute_thr([40]))
        assert b.count == 17
        assert b.label == 17 * 15 // 40
        assert abs(b.density_s8.values.sum() - b.density.values.sum()) < 1e-12
        assert b.density_s8.values.shape == (8, 8)
