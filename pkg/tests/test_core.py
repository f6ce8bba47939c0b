import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from acwenet.core import (
    BlankImageError,
    HyperParams,
    acwe_energy,
    as_image,
    as_mask,
    dice,
    discrete_length,
    normalize,
    region_means,
    threshold,
)

ALL_3x3_MASKS = [np.array(bits, dtype=np.uint8).reshape(3, 3) for bits in itertools.product((0, 1), repeat=9)]


def brute_means(image, mask):
    inside = [image.flat[i] for i in range(image.size) if mask.flat[i]]
    outside = [image.flat[i] for i in range(image.size) if not mask.flat[i]]
    overall = sum(image.flat) / image.size
    c1 = sum(inside) / len(inside) if inside else overall
    c2 = sum(outside) / len(outside) if outside else overall
    return c1, c2


def brute_energy(image, mask, mu, nu, l1, l2):
    c1, c2 = brute_means(image, mask)
    e = 0.0
    for i in range(image.size):
        if mask.flat[i]:
            e += nu + l1 * (image.flat[i] - c1) ** 2
        else:
            e += l2 * (image.flat[i] - c2) ** 2
    h, w = mask.shape
    changes = 0
    for r in range(h):
        for c in range(w):
            if c + 1 < w and mask[r, c] != mask[r, c + 1]:
                changes += 1
            if r + 1 < h and mask[r, c] != mask[r + 1, c]:
                changes += 1
    return e + mu * 0.5 * changes


def brute_dice(a, b):
    inter = sum(1 for x, y in zip(a.flat, b.flat) if x and y)
    total = int(a.sum()) + int(b.sum())
    return 1.0 if total == 0 else 2 * inter / total


class TestNormalize:
    def test_constant(self):
        np.testing.assert_array_equal(normalize(np.full((8, 8), 7.0)), np.ones((8, 8)))

    def test_known_values(self):
        np.testing.assert_array_equal(normalize([[0, 2], [4, 8]]), [[0, 0.25], [0.5, 1.0]])

    def test_max_is_exactly_one(self):
        img = np.random.default_rng(3).uniform(0, 50, size=(16, 12))
        assert normalize(img).max() == 1.0

    def test_blank_rejected(self):
        with pytest.raises(BlankImageError, match="blank image"):
            normalize(np.zeros((8, 8)))


class TestThreshold:
    def test_zero_is_background(self):
        assert threshold(np.zeros((4, 4))).sum() == 0

    def test_sign_pattern(self):
        np.testing.assert_array_equal(threshold([[-1, 0.5], [0, 2]]), [[0, 1], [0, 1]])

    def test_tiny_positive(self):
        assert threshold(np.full((3, 3), 1e-9)).all()

    @given(arrays(np.float64, (6, 5), elements=st.floats(-10, 10)), st.floats(1e-3, 1e3))
    def test_positive_scaling_invariant(self, score, scale):
        np.testing.assert_array_equal(threshold(score * scale), threshold(score))


class TestRegionMeans:
    def test_constant_image(self):
        w = np.random.default_rng(0).uniform(0.1, 0.9, size=(5, 5))
        stats = region_means(np.full((5, 5), 0.3), w)
        assert stats.c1 == pytest.approx(0.3)
        assert stats.c2 == pytest.approx(0.3)

    def test_two_region(self):
        stats = region_means([[0, 0], [1, 1]], [[0, 0], [1, 1]])
        assert (stats.c1, stats.c2) == (1.0, 0.0)

    def test_empty_outside_falls_back_to_global_mean(self):
        img = np.arange(9, dtype=float).reshape(3, 3)
        stats = region_means(img, np.ones((3, 3)))
        assert stats.c1 == pytest.approx(4.0)
        assert stats.c2 == pytest.approx(4.0)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            region_means(np.zeros((3, 3)), np.zeros((3, 4)))

    def test_exhaustive_binary_weights_3x3(self):
        rng = np.random.default_rng(11)
        image = rng.uniform(0, 1, size=(3, 3))
        for mask in ALL_3x3_MASKS:
            stats = region_means(image, mask)
            c1, c2 = brute_means(image, mask)
            assert stats.c1 == pytest.approx(c1, abs=1e-12)
            assert stats.c2 == pytest.approx(c2, abs=1e-12)


class TestDice:
    def test_identical(self):
        m = np.zeros((6, 6), np.uint8)
        m[1:4, 2:5] = 1
        assert dice(m, m) == 1.0

    def test_disjoint(self):
        a = np.zeros((6, 6), np.uint8)
        b = np.zeros((6, 6), np.uint8)
        a[0:2, 0:2] = 1
        b[3:5, 3:5] = 1
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((5, 5), np.uint8)
        b = np.zeros((5, 5), np.uint8)
        a[1:3, 1:3] = 1
        b[1:3, 2:4] = 1  # shares one column of 2 pixels
        assert brute_dice(a, b) == 0.5
        assert dice(a, b) == 0.5

    def test_both_empty(self):
        assert dice(np.zeros((3, 3)), np.zeros((3, 3))) == 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dice(np.zeros((3, 3)), np.zeros((4, 3)))

    def test_exhaustive_3x3_pairs(self):
        rng = np.random.default_rng(5)
        partners = [ALL_3x3_MASKS[i] for i in rng.choice(512, size=16, replace=False)]
        for a in ALL_3x3_MASKS:
            for b in partners:
                assert dice(a, b) == pytest.approx(brute_dice(a, b), abs=1e-15)
                assert dice(a, b) == dice(b, a)


class TestAcweEnergy:
    def test_exact_partition_has_zero_energy(self):
        img = np.zeros((8, 8))
        img[2:5, 3:7] = 1.0
        assert acwe_energy(img, img.astype(np.uint8), HyperParams(mu=0, nu=0)) == 0.0

    def test_all_background(self):
        img = np.zeros((8, 8))
        img[2:5, 3:7] = 1.0
        expected = float(((img - img.mean()) ** 2).sum())
        assert acwe_energy(img, np.zeros((8, 8)), HyperParams(mu=0, nu=0)) == pytest.approx(expected)

    def test_uniform_image_area_only(self):
        mask = np.zeros((8, 8), np.uint8)
        mask[:3, :5] = 1
        energy = acwe_energy(np.full((8, 8), 0.4), mask, HyperParams(mu=0, nu=0.004))
        assert energy == pytest.approx(0.004 * 15)

    def test_length_of_square(self):
        mask = np.zeros((6, 6), np.uint8)
        mask[1:4, 1:4] = 1
        assert discrete_length(mask) == 6.0  # 12 boundary edges, half each

    def test_exhaustive_3x3_matches_brute_force(self):
        rng = np.random.default_rng(2)
        image = rng.uniform(0, 1, size=(3, 3))
        hp = HyperParams(mu=0.3, nu=0.05, lambda1=1.5, lambda2=0.7)
        for mask in ALL_3x3_MASKS:
            expected = brute_energy(image, mask, hp.mu, hp.nu, hp.lambda1, hp.lambda2)
            assert acwe_energy(image, mask, hp) == pytest.approx(expected, abs=1e-12)

    @pytest.mark.parametrize("seed", range(5))
    def test_two_valued_minimizer_is_exact_partition(self, seed):
        rng = np.random.default_rng(seed)
        lo, hi = rng.uniform(0, 0.4), rng.uniform(0.6, 1)
        truth = rng.integers(0, 2, size=(3, 3)).astype(np.uint8)
        truth[0, 0], truth[2, 2] = 0, 1
        image = np.where(truth == 1, hi, lo)
        hp = HyperParams(mu=0, nu=0)
        energies = [acwe_energy(image, m, hp) for m in ALL_3x3_MASKS]
        best = min(energies)
        assert acwe_energy(image, truth, hp) == pytest.approx(best, abs=1e-15)
        minimizers = [m for m, e in zip(ALL_3x3_MASKS, energies) if e <= best + 1e-15]
        assert all(np.array_equal(m, truth) or np.array_equal(m, 1 - truth) for m in minimizers)


def test_hyperparam_defaults():
    hp = HyperParams()
    assert (hp.mu, hp.nu, hp.lambda1, hp.lambda2, hp.alpha) == (0.0, 0.004, 1.0, 1.0, 0.4)


def test_validators():
    with pytest.raises(ValueError):
        as_image(np.zeros((4, 8)))
    with pytest.raises(ValueError):
        as_image(-np.ones((8, 8)))
    with pytest.raises(ValueError):
        as_mask([[0, 2], [1, 0]])
    assert as_mask([[0, 1], [1, 0]]).dtype == np.uint8


@settings(max_examples=50)
@given(arrays(np.uint8, (4, 4), elements=st.integers(0, 1)), arrays(np.uint8, (4, 4), elements=st.integers(0, 1)))
def test_dice_symmetric(a, b):
    assert dice(a, b) == dice(b, a)
