import itertools
import math

import numpy as np
import pytest

from acwenet.core import HyperParams, acwe_energy, dice, normalize, threshold
from acwenet.levelset import (
    ENERGY_SLACK,
    LevelSetDivergence,
    LevelSetParams,
    LevelSetState,
    curvature,
    evolve_step,
    init_phi,
    run,
    smoothed_energy,
)
from acwenet.phantom import PhantomSpec, generate_phantom


def disk_phantom(seed=1):
    spec = PhantomSpec(
        n_structures=1, shapes=("ellipse",), blur_sigma=0.0, noise_scale=None,
        bg_intensity=0.0, fg_intensity_range=(1.0, 1.0), seed=seed,
    )
    return generate_phantom(spec)


class TestInit:
    def test_checkerboard_has_both_signs(self):
        phi = init_phi(10, 10, "checkerboard").phi
        assert (phi > 0).any() and (phi < 0).any()

    def test_checkerboard_formula(self):
        phi = init_phi(12, 9, "checkerboard").phi
        y, x = 7, 3
        assert phi[y, x] == pytest.approx(math.sin(math.pi * x / 5) * math.sin(math.pi * y / 5))

    def test_circle_positive_exactly_inside(self):
        h, w = 30, 24
        phi = init_phi(h, w, "centered-circle").phi
        yy, xx = np.mgrid[0:h, 0:w]
        inside = np.hypot(yy - (h - 1) / 2, xx - (w - 1) / 2) < min(h, w) / 3
        np.testing.assert_array_equal(phi > 0, inside)

    @pytest.mark.parametrize("scheme", ["checkerboard", "centered-circle"])
    def test_mask_is_proper(self, scheme):
        m = threshold(init_phi(16, 16, scheme).phi)
        assert 0 < m.sum() < m.size

    def test_unknown_scheme(self):
        with pytest.raises(ValueError):
            init_phi(8, 8, "spiral")


class TestEvolveStep:
    def test_uniform_image_no_motion(self):
        state = init_phi(16, 16)
        new = evolve_step(state, np.full((16, 16), 0.5), LevelSetParams(mu=0, nu=0))
        np.testing.assert_array_equal(new.phi, state.phi)
        assert new.iteration == 1
        assert len(new.energy_history) == 2

    def test_matching_partition_keeps_its_sign(self):
        image = np.zeros((16, 16))
        image[4:11, 5:12] = 1.0
        phi = np.where(image > 0, 2.0, -2.0)
        new = evolve_step(LevelSetState(phi=phi), image, LevelSetParams(mu=0, nu=0))
        np.testing.assert_array_equal(threshold(new.phi), image.astype(np.uint8))
        # the data force pushes both regions away from the contour
        assert (np.abs(new.phi) >= np.abs(phi)).all()

    @pytest.mark.parametrize("seed", range(5))
    def test_small_step_does_not_increase_energy(self, seed):
        rng = np.random.default_rng(seed)
        image = rng.uniform(0, 1, size=(24, 24))
        params = LevelSetParams(dt=1e-3)
        state = evolve_step(init_phi(24, 24), image, params)
        assert state.energy_history[1] <= state.energy_history[0] + ENERGY_SLACK

    def test_nonfinite_aborts(self):
        image = np.random.default_rng(0).uniform(0, 1, size=(16, 16))
        with pytest.raises(LevelSetDivergence, match="dt"):
            evolve_step(init_phi(16, 16), image, LevelSetParams(mu=0, dt=1e308, lambda2=1e10))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            evolve_step(init_phi(8, 8), np.zeros((8, 9)), LevelSetParams())


class TestRun:
    def test_max_iters_must_be_positive(self):
        with pytest.raises(ValueError):
            LevelSetParams(max_iters=0)

    def test_single_iteration(self):
        image = normalize(disk_phantom()[0])
        result = run(image, LevelSetParams(max_iters=1))
        assert result.iterations == 1
        assert len(result.energy_history) == 2

    def test_uniform_image_converges_with_warning(self):
        result = run(np.full((16, 16), 0.3), LevelSetParams(mu=0, nu=0))
        assert result.converged and result.iterations == 1
        assert any("uniform" in w for w in result.warnings)
        np.testing.assert_array_equal(result.mask, threshold(init_phi(16, 16).phi))

    @pytest.mark.parametrize("seed", range(4))
    def test_noiseless_disk(self, seed):
        image, label = disk_phantom(seed)
        result = run(normalize(image))
        assert dice(result.mask, label) >= 0.99
        assert result.iterations <= 500

    @pytest.mark.parametrize("seed", range(3))
    def test_energy_non_increasing(self, seed):
        image, _ = generate_phantom(PhantomSpec(seed=seed))
        result = run(normalize(image), LevelSetParams(max_iters=200))
        steps = np.diff(result.energy_history)
        assert steps.max() <= ENERGY_SLACK

    def test_contrast_invariance(self):
        image, _ = generate_phantom(PhantomSpec(seed=4))
        g = normalize(image)
        base = LevelSetParams(mu=0, nu=0, max_iters=150)
        a, b = 2.0, 0.3
        scaled = LevelSetParams(mu=0, nu=0, max_iters=150, dt=base.dt / a**2)
        np.testing.assert_array_equal(run(g, base).mask, run(a * g + b, scaled).mask)

    def test_record_fields(self):
        rec = run(normalize(disk_phantom()[0]), LevelSetParams(max_iters=5)).record(dsc=0.5)
        assert set(rec) >= {"dsc", "iterations", "seconds", "final_energy"}


def test_exhaustive_3x3_two_valued_optimality():
    params = LevelSetParams(mu=0.0)
    hp = HyperParams(mu=0.0, nu=0.0)
    masks = [np.array(b, dtype=np.uint8).reshape(3, 3) for b in itertools.product((0, 1), repeat=9)]
    for bits in masks[1:-1]:
        image = bits.astype(np.float64)
        best = min(acwe_energy(image, m, hp) for m in masks)
        result = run(image, params)
        assert acwe_energy(image, result.mask, hp) == pytest.approx(best, abs=1e-12)


def test_curvature_of_circle():
    h = w = 41
    yy, xx = np.mgrid[0:h, 0:w]
    r = np.hypot(yy - 20, xx - 20)
    kappa = curvature(10.0 - r)
    ring = np.abs(r - 10) < 0.5
    # div(grad phi / |grad phi|) for phi = 10 - r is -1/r at every angle
    np.testing.assert_allclose(kappa[ring], -0.1, rtol=0.06)


def test_curvature_of_plane_is_zero():
    yy, xx = np.mgrid[0:12, 0:12]
    kappa = curvature(0.3 * xx - 0.7 * yy + 1.0)
    np.testing.assert_allclose(kappa[1:-1, 1:-1], 0.0, atol=1e-12)


def test_smoothed_energy_matches_hard_energy_when_saturated():
    image, label = disk_phantom(2)
    g = normalize(image)
    phi = np.where(label == 1, 1e9, -1e9)
    params = LevelSetParams(mu=0.0, nu=0.0)
    assert smoothed_energy(phi, g, params) == pytest.approx(acwe_energy(g, label, HyperParams(mu=0, nu=0)), abs=1e-3)
