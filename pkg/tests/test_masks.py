import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellseg import masks
from cellseg.errors import (
    DimensionMismatch,
    EmptyInput,
    MalformedRuns,
    SizeMismatch,
)

from conftest import mask_from, random_mask
from oracles import flip_oracle, iou_oracle, rle_encode_oracle, vote_oracle


class TestRle:
    def test_all_zero_2x2(self):
        rle = masks.rle_encode(np.zeros((2, 2), dtype=bool))
        assert rle.counts == (4,)
        assert rle.size == (2, 2)

    def test_all_one_2x2(self):
        assert masks.rle_encode(np.ones((2, 2), dtype=bool)).counts == (0, 4)

    def test_single_pixel_column_major(self):
        # (row 0, col 1) is the third pixel in column-major order
        m = mask_from([(0, 1)], (2, 2))
        assert masks.rle_encode(m).counts == (2, 1, 1)

    def test_decode_trivial_cases(self):
        assert not masks.rle_decode(masks.Rle((2, 2), (4,))).any()
        assert masks.rle_decode(masks.Rle((2, 2), (0, 4))).all()
        m = masks.rle_decode(masks.Rle((2, 2), (2, 1, 1)))
        assert m[0, 1] and m.sum() == 1

    def test_decode_size_mismatch(self):
        with pytest.raises(SizeMismatch):
            masks.rle_decode(masks.Rle((2, 2), (5,)))

    def test_decode_interior_zero_run(self):
        with pytest.raises(MalformedRuns):
            masks.rle_decode(masks.Rle((2, 2), (2, 0, 2)))

    def test_decode_negative_run(self):
        with pytest.raises(MalformedRuns):
            masks.rle_decode(masks.Rle((2, 2), (-1, 5)))

    def test_roundtrip_1000_random(self, rng):
        for _ in range(1000):
            h, w = rng.integers(1, 65, size=2)
            m = random_mask(rng, (int(h), int(w)), density=float(rng.random()))
            assert np.array_equal(masks.rle_decode(masks.rle_encode(m)), m)

    def test_encode_matches_oracle(self, rng):
        for _ in range(50):
            m = random_mask(rng, (7, 5))
            assert list(masks.rle_encode(m).counts) == rle_encode_oracle(m)

    def test_area_equals_foreground_runs(self, rng):
        for _ in range(50):
            m = random_mask(rng, (9, 6))
            counts = masks.rle_encode(m).counts
            assert masks.area(m) == sum(counts[1::2])

    @given(st.integers(1, 20), st.integers(1, 20), st.integers(0, 2**32 - 1))
    @settings(max_examples=200, deadline=None)
    def test_roundtrip_property(self, h, w, seed):
        m = np.random.default_rng(seed).random((h, w)) < 0.5
        assert np.array_equal(masks.rle_decode(masks.rle_encode(m)), m)


class TestSetOps:
    def test_identity(self):
        a = mask_from([(0, 0), (1, 1)], (2, 2))
        inter, uni, diff = masks.set_ops(a, a)
        assert np.array_equal(inter, a) and np.array_equal(uni, a)
        assert not diff.any()

    def test_disjoint(self):
        a = mask_from([(0, 0)], (2, 2))
        b = mask_from([(1, 1)], (2, 2))
        inter, uni, _ = masks.set_ops(a, b)
        assert not inter.any()
        assert masks.area(uni) == masks.area(a) + masks.area(b)

    def test_derived_example(self):
        a = mask_from([(0, 0), (0, 1)], (2, 2))
        b = mask_from([(0, 1), (1, 1)], (2, 2))
        inter, uni, diff = masks.set_ops(a, b)
        assert np.array_equal(inter, mask_from([(0, 1)], (2, 2)))
        assert masks.area(uni) == 3
        assert np.array_equal(diff, mask_from([(0, 0)], (2, 2)))

    def test_inclusion_exclusion(self, rng):
        for _ in range(100):
            a, b = random_mask(rng, (8, 8)), random_mask(rng, (8, 8))
            inter, uni, _ = masks.set_ops(a, b)
            assert masks.area(uni) == masks.area(a) + masks.area(b) - masks.area(inter)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            masks.set_ops(np.zeros((2, 2), bool), np.zeros((3, 2), bool))


class TestIou:
    def test_identical(self):
        a = mask_from([(0, 0)], (2, 2))
        assert masks.iou(a, a) == 1.0

    def test_disjoint(self):
        assert masks.iou(mask_from([(0, 0)], (2, 2)), mask_from([(1, 1)], (2, 2))) == 0.0

    def test_one_third(self):
        a = mask_from([(0, 0), (0, 1)], (2, 2))
        b = mask_from([(0, 1), (1, 1)], (2, 2))
        assert masks.iou(a, b) == pytest.approx(1 / 3, abs=0)

    def test_both_empty_is_zero(self):
        z = np.zeros((3, 3), bool)
        assert masks.iou(z, z) == 0.0

    def test_bounds_and_symmetry(self, rng):
        for _ in range(200):
            a, b = random_mask(rng, (10, 10)), random_mask(rng, (10, 10))
            v = masks.iou(a, b)
            assert 0.0 <= v <= 1.0
            assert v == masks.iou(b, a)
            assert v == pytest.approx(iou_oracle(a, b), abs=0)


class TestMajorityVote:
    def test_identical_inputs(self, rng):
        m = random_mask(rng, (6, 6))
        assert np.array_equal(masks.majority_vote([m, m, m]), m)

    def test_single_mask(self, rng):
        m = random_mask(rng, (6, 6))
        assert np.array_equal(masks.majority_vote([m]), m)

    def test_strict_majority_example(self):
        a = mask_from([(0, 0), (0, 1)], (2, 2))
        b = mask_from([(0, 0)], (2, 2))
        c = mask_from([(0, 0), (1, 1)], (2, 2))
        assert np.array_equal(masks.majority_vote([a, b, c]), mask_from([(0, 0)], (2, 2)))

    def test_even_tie_excluded(self):
        a = mask_from([(0, 0)], (2, 2))
        b = np.zeros((2, 2), bool)
        assert not masks.majority_vote([a, b]).any()

    def test_matches_oracle(self, rng):
        for k in (1, 2, 3, 4, 5, 7):
            ms = [random_mask(rng, (7, 7)) for _ in range(k)]
            got = masks.majority_vote(ms)
            assert set(zip(*np.nonzero(got))) == set(vote_oracle(ms))

    def test_monotonicity(self, rng):
        for _ in range(30):
            ms = [random_mask(rng, (6, 6)) for _ in range(3)]
            base = masks.majority_vote(ms)
            again = masks.majority_vote(ms + [base])
            assert not (base & ~again).any()

    def test_inclusion_bounds(self, rng):
        ms = [random_mask(rng, (8, 8)) for _ in range(5)]
        out = masks.majority_vote(ms)
        inter = np.logical_and.reduce(ms)
        uni = np.logical_or.reduce(ms)
        assert not (out & ~uni).any()
        assert not (inter & ~out).any()

    def test_empty_input(self):
        with pytest.raises(EmptyInput):
            masks.majority_vote([])

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            masks.majority_vote([np.zeros((2, 2), bool), np.zeros((2, 3), bool)])


class TestFlip:
    def test_involution(self, rng):
        m = random_mask(rng, (5, 7))
        for axis in masks.FLIP_AXES:
            assert np.array_equal(masks.flip(masks.flip(m, axis), axis), m)

    def test_full_mask_symmetric(self):
        m = np.ones((4, 4), bool)
        for axis in masks.FLIP_AXES:
            assert np.array_equal(masks.flip(m, axis), m)

    def test_corner_pixel(self):
        m = mask_from([(0, 0)], (2, 2))
        assert np.array_equal(masks.flip(m, "horizontal"), mask_from([(0, 1)], (2, 2)))
        assert np.array_equal(masks.flip(m, "diagonal"), mask_from([(1, 1)], (2, 2)))

    def test_matches_oracle_and_preserves_area(self, rng):
        for axis in masks.FLIP_AXES:
            m = random_mask(rng, (6, 9))
            out = masks.flip(m, axis)
            assert np.array_equal(out, flip_oracle(m, axis))
            assert masks.area(out) == masks.area(m)

    def test_unknown_axis(self):
        with pytest.raises(ValueError):
            masks.flip(np.zeros((2, 2), bool), "transpose")
