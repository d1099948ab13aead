import numpy as np
import pytest
from helpers import fd_gradient, relative_error

from steinfed.kernels import (
    BANDWIDTH_FLOOR,
    KdeConfig,
    KernelConfig,
    kde_log_density,
    kde_log_density_grad,
    median_bandwidth,
    rbf_kernel,
    rbf_kernel_grad_first,
)


class TestRbfKernel:
    def test_zero_distance_is_one(self):
        rng = np.random.default_rng(42)
        for _ in range(10):
            x = rng.standard_normal(3)
            assert rbf_kernel(x, x, h=float(rng.uniform(0.1, 10))) == 1.0

    def test_hand_values(self):
        np.testing.assert_allclose(rbf_kernel([0.0], [1.0], 1.0), np.exp(-1.0), rtol=1e-15)
        np.testing.assert_allclose(rbf_kernel([1.0, 2.0], [3.0, 4.0], 2.0), np.exp(-4.0), rtol=1e-15)

    def test_symmetry_and_range(self):
        rng = np.random.default_rng(42)
        for _ in range(50):
            x = rng.standard_normal(4)
            y = rng.standard_normal(4)
            h = float(rng.uniform(0.2, 5.0))
            value = rbf_kernel(x, y, h)
            assert value == rbf_kernel(y, x, h)
            assert 0.0 < value <= 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError, match="shapes differ"):
            rbf_kernel([0.0], [0.0, 1.0], 1.0)

    def test_nonpositive_bandwidth(self):
        with pytest.raises(ValueError, match="positive"):
            rbf_kernel([0.0], [1.0], 0.0)


class TestRbfKernelGrad:
    def test_zero_at_coincident_points(self):
        x = np.array([1.5, -0.5])
        np.testing.assert_array_equal(rbf_kernel_grad_first(x, x, 2.0), np.zeros(2))

    def test_hand_value(self):
        np.testing.assert_allclose(
            rbf_kernel_grad_first([1.0], [0.0], 1.0), [-2.0 * np.exp(-1.0)], rtol=1e-15
        )

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            x = rng.standard_normal(3)
            y = rng.standard_normal(3)
            h = float(rng.uniform(0.3, 4.0))
            grad = rbf_kernel_grad_first(x, y, h)
            fd = fd_gradient(lambda p: rbf_kernel(p, y, h), x)
            assert relative_error(grad, fd) < 1e-5

    def test_antisymmetric_in_arguments(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(2)
        y = rng.standard_normal(2)
        np.testing.assert_allclose(
            rbf_kernel_grad_first(x, y, 1.3), -rbf_kernel_grad_first(y, x, 1.3), rtol=1e-14
        )


class TestMedianBandwidth:
    def test_two_particles(self):
        np.testing.assert_allclose(
            median_bandwidth([[0.0], [2.0]]), 4.0 / np.log(2.0), rtol=1e-15
        )

    def test_three_particles(self):
        np.testing.assert_allclose(
            median_bandwidth([[0.0], [1.0], [3.0]]), 4.0 / np.log(3.0), rtol=1e-15
        )

    def test_even_pair_count_averages_middle_two(self):
        # points 0,1,2,4: pairwise distances {1,1,2,2,3,4}, median (2+2)/2 = 2
        particles = [[0.0], [1.0], [2.0], [4.0]]
        np.testing.assert_allclose(median_bandwidth(particles), 4.0 / np.log(4.0), rtol=1e-15)

    def test_identical_particles_hit_floor(self):
        assert median_bandwidth([[0.0], [0.0]]) == BANDWIDTH_FLOOR

    def test_single_particle_rejected(self):
        with pytest.raises(ValueError, match="at least 2"):
            median_bandwidth([[0.0]])

    def test_translation_and_permutation_invariance(self):
        rng = np.random.default_rng(42)
        particles = rng.standard_normal((12, 3))
        base = median_bandwidth(particles)
        shifted = median_bandwidth(particles + 7.5)
        permuted = median_bandwidth(particles[rng.permutation(12)])
        np.testing.assert_allclose([shifted, permuted], [base, base], rtol=1e-12)


class TestKernelConfig:
    def test_fixed_bandwidth_resolution(self):
        assert KernelConfig(h=2.5).resolve(np.zeros((1, 1))) == 2.5

    def test_median_resolution(self):
        cfg = KernelConfig()
        np.testing.assert_allclose(
            cfg.resolve(np.array([[0.0], [2.0]])), 4.0 / np.log(2.0), rtol=1e-15
        )

    def test_invalid_fixed_bandwidth(self):
        with pytest.raises(ValueError, match="positive"):
            KernelConfig(h=-1.0)

    def test_kde_config_validation(self):
        with pytest.raises(ValueError, match="positive"):
            KdeConfig(lam=0.0)


class TestKdeLogDensity:
    def test_single_particle_standard_value(self):
        value = kde_log_density(np.array([[0.0]]), np.array([0.0]), lam=1.0)
        np.testing.assert_allclose(value, -0.5 * np.log(2.0 * np.pi), rtol=1e-15)

    def test_matches_direct_summation(self):
        rng = np.random.default_rng(42)
        for _ in range(25):
            particles = rng.standard_normal((rng.integers(1, 8), 2))
            query = rng.standard_normal(2)
            lam = float(rng.uniform(0.3, 2.0))
            direct = np.log(
                np.mean(
                    [
                        np.exp(-np.sum((query - p) ** 2) / (2 * lam * lam))
                        / (2 * np.pi * lam * lam)
                        for p in particles
                    ]
                )
            )
            np.testing.assert_allclose(
                kde_log_density(particles, query, lam), direct, rtol=1e-12
            )

    def test_symmetric_pair_mixing_correction(self):
        # two particles symmetric about the query contribute equally
        particles = np.array([[-1.0], [1.0]])
        value = kde_log_density(particles, np.array([0.0]), lam=0.7)
        single = kde_log_density(particles[:1], np.array([0.0]), lam=0.7)
        np.testing.assert_allclose(value, single, rtol=1e-14)

    def test_grid_integral_is_one(self):
        rng = np.random.default_rng(42)
        particles = rng.uniform(-2, 2, size=(20, 1))
        x = np.linspace(-12.0, 12.0, 4001)
        log_density = kde_log_density(particles, x[:, None], lam=0.55)
        mass = np.trapezoid(np.exp(log_density), x)
        assert abs(mass - 1.0) < 1e-3

    def test_empty_particles_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            kde_log_density(np.zeros((0, 1)), np.array([0.0]), lam=1.0)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(3)
        particles = rng.standard_normal((5, 2))
        queries = rng.standard_normal((7, 2))
        batch = kde_log_density(particles, queries, lam=0.55)
        singles = [kde_log_density(particles, q, lam=0.55) for q in queries]
        np.testing.assert_allclose(batch, singles, rtol=1e-14)


class TestKdeLogDensityGrad:
    def test_zero_at_single_particle_mode(self):
        grad = kde_log_density_grad(np.array([[1.0, -2.0]]), np.array([1.0, -2.0]), lam=0.55)
        np.testing.assert_array_equal(grad, np.zeros(2))

    def test_matches_finite_difference(self):
        rng = np.random.default_rng(42)
        for _ in range(100):
            particles = rng.standard_normal((rng.integers(1, 10), 2))
            query = rng.standard_normal(2)
            lam = float(rng.uniform(0.4, 1.5))
            grad = kde_log_density_grad(particles, query, lam)
            fd = fd_gradient(lambda q: kde_log_density(particles, q, lam), query)
            assert relative_error(grad, fd) < 1e-5

    def test_duplicate_particle_invariance(self):
        query = np.array([0.3])
        one = kde_log_density_grad(np.array([[1.0]]), query, lam=0.55)
        two = kde_log_density_grad(np.array([[1.0], [1.0]]), query, lam=0.55)
        np.testing.assert_allclose(two, one, rtol=1e-14)

    def test_single_particle_closed_form(self):
        # one Gaussian component: score is (particle - query) / lam^2
        particle = np.array([[2.0, -1.0]])
        query = np.array([0.5, 0.5])
        grad = kde_log_density_grad(particle, query, lam=0.55)
        np.testing.assert_allclose(grad, (particle[0] - query) / 0.55**2, rtol=1e-14)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(9)
        particles = rng.standard_normal((6, 3))
        queries = rng.standard_normal((5, 3))
        batch = kde_log_density_grad(particles, queries, lam=0.8)
        singles = np.stack([kde_log_density_grad(particles, q, lam=0.8) for q in queries])
        np.testing.assert_allclose(batch, singles, rtol=1e-14)
