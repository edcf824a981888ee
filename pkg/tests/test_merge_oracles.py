"""Exact equivalence of the vectorized strategies against straight-line
brute-force re-implementations on small tensors.

Random fixtures draw values from a dyadic lattice (multiples of 2^-10 in
[-2, 2]) and strengths from multiples of 1/64, so every sum and product in
both implementations is exactly representable and any disagreement is an
algorithmic bug, not rounding noise.
"""

import numpy as np
import pytest

from mergespectrum import merge_methods as mm

import reference_impls as ref
from conftest import lattice_floats

N_CASES = 200


def lattice_case(rng, with_base=True, shape=None):
    if shape is None:
        shape = (int(rng.integers(1, 9)),)
    n = int(np.prod(shape))
    direct = lattice_floats(rng, n).reshape(shape)
    think = lattice_floats(rng, n).reshape(shape)
    base = lattice_floats(rng, n).reshape(shape) if with_base else None
    lam = float(rng.integers(0, 65)) / 64.0
    return direct, think, base, lam


def assert_exact(actual, expected):
    assert actual.dtype == np.float32
    np.testing.assert_array_equal(actual, expected)


class TestTiesOracle:
    def test_random_cases(self):
        rng = np.random.default_rng(101)
        for _ in range(N_CASES):
            d, t, b, lam = lattice_case(rng)
            density = float(rng.integers(1, 9)) / 8.0
            assert_exact(mm.ties_merge(d, t, b, lam, density),
                         ref.ties_oracle(d, t, b, lam, density))

    def test_hand_example(self):
        d = np.array([1.0, -0.2, 0.5], np.float32)
        t = np.array([-1.0, 0.3, 0.5], np.float32)
        b = np.zeros(3, np.float32)
        expected = ref.ties_oracle(d, t, b, 0.7, 2 / 3)
        np.testing.assert_array_equal(expected, np.array([-1.0, 0.0, 0.5], np.float32))
        assert_exact(mm.ties_merge(d, t, b, 0.7, 2 / 3), expected)


class TestEmrOracle:
    def test_random_cases(self):
        rng = np.random.default_rng(102)
        for _ in range(N_CASES):
            d, t, b, lam = lattice_case(rng)
            assert_exact(mm.emr_merge(d, t, b, lam), ref.emr_oracle(d, t, b, lam))

    def test_hand_examples(self):
        b = np.zeros(2, np.float32)
        d = np.array([2.0, 0.0], np.float32)
        t = np.array([1.0, 0.0], np.float32)
        expected = ref.emr_oracle(d, t, b, 0.5)
        np.testing.assert_array_equal(expected, np.array([1.5, 0.0], np.float32))
        assert_exact(mm.emr_merge(d, t, b, 0.5), expected)

        tie_d = np.array([1.0], np.float32)
        tie_t = np.array([-1.0], np.float32)
        assert_exact(mm.emr_merge(tie_d, tie_t, np.zeros(1, np.float32), 0.5),
                     ref.emr_oracle(tie_d, tie_t, np.zeros(1, np.float32), 0.5))


class TestTwinOracle:
    def test_random_cases(self):
        rng = np.random.default_rng(103)
        for _ in range(N_CASES):
            d, t, b, lam = lattice_case(rng)
            mask_rate = float(rng.integers(0, 8)) / 8.0
            assert_exact(mm.twin_merge(d, t, b, lam, mask_rate),
                         ref.twin_oracle(d, t, b, lam, mask_rate))

    def test_hand_examples(self):
        b = np.zeros(2, np.float32)
        d = np.array([2.0, 0.0], np.float32)
        t = np.array([0.0, 2.0], np.float32)
        assert_exact(mm.twin_merge(d, t, b, 1.0, 0.0), ref.twin_oracle(d, t, b, 1.0, 0.0))
        assert_exact(mm.twin_merge(d, t, b, 0.5, 0.0), ref.twin_oracle(d, t, b, 0.5, 0.0))
        np.testing.assert_array_equal(ref.twin_oracle(d, t, b, 0.5, 0.0),
                                      np.array([1.0, 1.0], np.float32))


class TestLoreOracle:
    @pytest.mark.parametrize("shape", [(2, 2), (2, 3), (4, 2), (8,), (3,), (2, 2, 2)])
    def test_random_cases_per_shape(self, shape):
        rng = np.random.default_rng(104 + len(shape))
        for _ in range(N_CASES // 4):
            d, t, _, lam = lattice_case(rng, with_base=False, shape=shape)
            tau = float(rng.integers(1, 8)) / 8.0
            iters = int(rng.integers(1, 4))
            assert_exact(mm.lore_merge(d, t, lam, tau, iters),
                         ref.lore_oracle(d, t, lam, tau, iters))

    def test_hand_example_rank_one(self):
        direct = np.zeros((2, 2), np.float32)
        think = np.array([[2.0, 0.0], [0.0, 0.0]], np.float32)
        expected = ref.lore_oracle(direct, think, 1.0, 0.1, 1)
        np.testing.assert_allclose(expected, think, atol=1e-6)
        assert_exact(mm.lore_merge(direct, think, 1.0, 0.1, 1), expected)


class TestCustomOracles:
    @pytest.mark.parametrize("impl,oracle", [
        (mm.topk_replace, ref.topk_replace_oracle),
        (mm.topk_diff_average, ref.topk_diff_average_oracle),
        (mm.global_avg_topk_override, ref.global_avg_topk_override_oracle),
    ], ids=["replace", "diff_average", "global_override"])
    def test_random_cases(self, impl, oracle):
        rng = np.random.default_rng(105)
        for _ in range(N_CASES):
            d, t, _, _ = lattice_case(rng, with_base=False)
            k = float(rng.integers(1, 9)) / 8.0
            assert_exact(impl(d, t, k), oracle(d, t, k))

    def test_hand_examples(self):
        d = np.array([1.0, 2.0, 3.0], np.float32)
        t = np.array([1.1, 5.0, 3.05], np.float32)
        assert_exact(mm.topk_replace(d, t, 1 / 3), ref.topk_replace_oracle(d, t, 1 / 3))
        assert_exact(mm.topk_diff_average(d, t, 1 / 3),
                     ref.topk_diff_average_oracle(d, t, 1 / 3))
        assert_exact(mm.global_avg_topk_override(d, t, 1 / 3),
                     ref.global_avg_topk_override_oracle(d, t, 1 / 3))


class TestWeightedAverageOracle:
    def test_within_one_ulp_everywhere(self):
        from conftest import ulp_distance
        rng = np.random.default_rng(106)
        for _ in range(50):
            n = int(rng.integers(1, 9))
            d = rng.standard_normal(n).astype(np.float32)
            t = rng.standard_normal(n).astype(np.float32)
            lam = float(rng.random())
            got = mm.weighted_average(d, t, lam)
            want = ref.weighted_average_oracle(d, t, lam)
            assert ulp_distance(got, want).max() <= 1
