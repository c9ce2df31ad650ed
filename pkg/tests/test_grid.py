import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eraseg.grid import (
    ClassMask,
    Image2D,
    ProbMap,
    assd,
    diagonal_sentinel,
    dsc,
    evaluate,
    mean_foreground_dsc,
    surface_pixels,
)
from oracles import assd_oracle, dsc_oracle, evaluate_oracle, surface_oracle


def mask3x3(bits: int) -> np.ndarray:
    return np.array([(bits >> i) & 1 for i in range(9)], dtype=bool).reshape(3, 3)


class TestTypes:
    def test_image_validation(self):
        Image2D(np.zeros((8, 8), dtype=np.float32))
        with pytest.raises(ValueError):
            Image2D(np.zeros((4, 8), dtype=np.float32))
        with pytest.raises(ValueError):
            Image2D(np.full((8, 8), np.nan, dtype=np.float32))
        with pytest.raises(ValueError):
            Image2D(np.zeros((8, 8, 2), dtype=np.float32))

    def test_classmask_validation(self):
        ClassMask(np.zeros((3, 3), dtype=np.uint8), 2)
        with pytest.raises(ValueError):
            ClassMask(np.full((3, 3), 2, dtype=np.uint8), 2)

    def test_probmap_validation(self):
        ProbMap(np.full((4, 2, 2), 0.25))
        with pytest.raises(ValueError):
            ProbMap(np.full((4, 2, 2), 0.3))
        with pytest.raises(ValueError):
            ProbMap(-np.full((1, 2, 2), -1.0) * -1)


class TestDsc:
    def test_identical_nonempty(self):
        m = np.zeros((4, 4), dtype=bool)
        m[1:3, 1:3] = True
        assert dsc(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0] = True
        b[3, 3] = True
        assert dsc(a, b) == 0.0

    def test_half_overlap(self):
        # A and B each 4 pixels on a 16-pixel grid, overlapping in 2
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[0, 0:4] = True
        b[0, 2:4] = True
        b[1, 0:2] = True
        assert dsc(a, b) == 0.5
        assert dsc_oracle(a, b) == 0.5

    def test_degenerate_cases(self):
        empty = np.zeros((3, 3), dtype=bool)
        full = np.ones((3, 3), dtype=bool)
        assert dsc(empty, empty) == 1.0
        assert dsc(empty, full) == 0.0
        assert dsc(full, empty) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            dsc(np.zeros((3, 3), dtype=bool), np.zeros((3, 4), dtype=bool))

    @given(st.integers(0, 511), st.integers(0, 511))
    @settings(max_examples=300, deadline=None)
    def test_symmetry_and_oracle_3x3(self, pa, pb):
        a, b = mask3x3(pa), mask3x3(pb)
        val = dsc(a, b)
        assert val == dsc(b, a)
        assert val == pytest.approx(dsc_oracle(a, b), abs=0)

    def test_nested_formula(self):
        rng = np.random.default_rng(5)
        for _ in range(50):
            big = rng.uniform(size=(6, 6)) < 0.5
            keep = rng.uniform(size=(6, 6)) < 0.6
            small = big & keep
            na, nb = small.sum(), big.sum()
            expected = 1.0 if (na + nb) == 0 else 2.0 * na / (na + nb)
            assert dsc(small, big) == pytest.approx(expected, abs=0)


class TestSurface:
    def test_surface_matches_oracle(self):
        rng = np.random.default_rng(11)
        for _ in range(30):
            m = rng.uniform(size=(7, 9)) < 0.4
            got = sorted(map(tuple, np.argwhere(surface_pixels(m))))
            assert got == surface_oracle(m)

    def test_border_counts_as_outside(self):
        m = np.ones((3, 3), dtype=bool)
        assert surface_pixels(m).sum() == 8  # all but the center


class TestAssd:
    def test_identical(self):
        m = np.zeros((5, 5), dtype=bool)
        m[1:4, 1:4] = True
        assert assd(m, m) == 0.0

    def test_single_pixels_three_apart(self):
        a = np.zeros((5, 8), dtype=bool)
        b = np.zeros((5, 8), dtype=bool)
        a[2, 2] = True
        b[2, 5] = True
        assert assd(a, b, spacing=1.0) == pytest.approx(3.0, abs=1e-12)
        assert assd_oracle(a, b) == pytest.approx(3.0, abs=1e-12)

    def test_spacing_scales(self):
        a = np.zeros((5, 8), dtype=bool)
        b = np.zeros((5, 8), dtype=bool)
        a[2, 2] = True
        b[2, 5] = True
        assert assd(a, b, spacing=0.5) == pytest.approx(1.5, abs=1e-12)

    def test_empty_is_undefined(self):
        m = np.zeros((4, 4), dtype=bool)
        n = m.copy()
        n[0, 0] = True
        assert assd(m, n) is None
        assert assd(n, m) is None
        assert assd(m, m) is None

    def test_symmetry_and_oracle_random(self):
        rng = np.random.default_rng(3)
        for _ in range(40):
            a = rng.uniform(size=(10, 10)) < 0.35
            b = rng.uniform(size=(10, 10)) < 0.35
            got = assd(a, b)
            want = assd_oracle(a, b)
            if want is None:
                assert got is None
            else:
                assert got == pytest.approx(want, abs=1e-9)
                assert assd(b, a) == pytest.approx(got, abs=1e-12)

    def test_invalid_spacing(self):
        m = np.ones((3, 3), dtype=bool)
        with pytest.raises(ValueError):
            assd(m, m, spacing=0.0)


class TestEvaluate:
    def test_perfect_prediction(self):
        data = np.zeros((6, 6), dtype=np.uint8)
        data[0:2, 0:2] = 1
        data[3:5, 3:5] = 2
        gt = ClassMask(data, 3)
        rep = evaluate(gt, gt)
        assert rep.per_class_dsc == [1.0, 1.0, 1.0]
        assert rep.per_class_assd == [0.0, 0.0, 0.0]
        assert rep.mean_dsc == 1.0
        assert rep.mean_assd == 0.0

    def test_all_background_prediction(self):
        gt_data = np.zeros((6, 6), dtype=np.uint8)
        gt_data[2:4, 2:4] = 1
        gt = ClassMask(gt_data, 2)
        pred = ClassMask(np.zeros((6, 6), dtype=np.uint8), 2)
        rep = evaluate(pred, gt)
        assert rep.per_class_dsc[1] == 0.0
        assert rep.per_class_assd[1] == pytest.approx(diagonal_sentinel(6, 6))
        assert rep.assd_defined[1] is False

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(9)
        for _ in range(10):
            pred = ClassMask(rng.integers(0, 3, size=(8, 8)).astype(np.uint8), 3)
            gt = ClassMask(rng.integers(0, 3, size=(8, 8)).astype(np.uint8), 3)
            rep = evaluate(pred, gt, spacing=1.0)
            want = evaluate_oracle(pred.data, gt.data, 3)
            assert rep.per_class_dsc == pytest.approx(want["per_class_dsc"], abs=0)
            assert rep.per_class_assd == pytest.approx(want["per_class_assd"], abs=1e-9)
            assert rep.mean_dsc == pytest.approx(want["mean_dsc"], abs=1e-12)
            assert rep.mean_assd == pytest.approx(want["mean_assd"], abs=1e-9)

    def test_mean_is_arithmetic_mean_of_foreground(self):
        rng = np.random.default_rng(2)
        pred = ClassMask(rng.integers(0, 4, size=(8, 8)).astype(np.uint8), 4)
        gt = ClassMask(rng.integers(0, 4, size=(8, 8)).astype(np.uint8), 4)
        rep = evaluate(pred, gt)
        assert len(rep.per_class_dsc) == 4
        assert rep.mean_dsc == pytest.approx(float(np.mean(rep.per_class_dsc[1:])))
        assert rep.mean_assd == pytest.approx(float(np.mean(rep.per_class_assd[1:])))

    def test_class_count_mismatch(self):
        a = ClassMask(np.zeros((6, 6), dtype=np.uint8), 2)
        b = ClassMask(np.zeros((6, 6), dtype=np.uint8), 3)
        with pytest.raises(ValueError):
            evaluate(a, b)


class TestMeanForegroundDsc:
    def test_composition(self):
        a = np.zeros((4, 4), dtype=np.uint8)
        b = np.zeros((4, 4), dtype=np.uint8)
        a[0, 0:2] = 1
        b[0, 1:3] = 1
        a[3, 0:2] = 2
        b[3, 0:2] = 2
        am, bm = ClassMask(a, 3), ClassMask(b, 3)
        per_class = [dsc(a == c, b == c) for c in (1, 2)]
        assert mean_foreground_dsc(am, bm) == pytest.approx(float(np.mean(per_class)))

    def test_diagonal_value(self):
        assert diagonal_sentinel(3, 4) == pytest.approx(5.0)
        assert diagonal_sentinel(3, 4, spacing=2.0) == pytest.approx(10.0)
