import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from modapt.numkit import (
    InvalidDimensionError,
    RandomSource,
    ball_interior_batch,
    gaussian_vector,
    matvec,
    sample_ball_interior,
    sample_sphere_surface,
    sphere_surface_batch,
)


class TestRandomSource:
    def test_same_seed_same_sequence(self):
        a = gaussian_vector(RandomSource(7), 4)
        b = gaussian_vector(RandomSource(7), 4)
        np.testing.assert_array_equal(a, b)

    def test_different_seeds_differ(self):
        a = gaussian_vector(RandomSource(7), 4)
        b = gaussian_vector(RandomSource(8), 4)
        assert not np.array_equal(a, b)

    def test_different_streams_differ(self):
        a = gaussian_vector(RandomSource(7, stream=0), 4)
        b = gaussian_vector(RandomSource(7, stream=1), 4)
        assert not np.array_equal(a, b)

    def test_replay_of_op_sequence_is_bitwise_identical(self):
        def run(seed):
            rng = RandomSource(seed)
            return (
                gaussian_vector(rng, 10),
                sample_sphere_surface(rng, 5, 2.0),
                sample_ball_interior(rng, 5, 2.0),
                rng.permutation(20),
            )

        for x, y in zip(run(3), run(3)):
            np.testing.assert_array_equal(x, y)

    def test_gaussian_moments_large_sample(self):
        x = gaussian_vector(RandomSource(1), 100_000)
        assert -0.02 < x.mean() < 0.02
        assert 0.97 < x.var() < 1.03

    def test_zero_dimension_rejected(self):
        with pytest.raises(InvalidDimensionError):
            gaussian_vector(RandomSource(0), 0)


class TestSphereSurface:
    def test_norm_is_exactly_radius(self):
        eps = sample_sphere_surface(RandomSource(0), 512, 25.0)
        assert abs(np.linalg.norm(eps) - 25.0) <= 1e-9 * 25.0

    def test_zero_radius_is_zero_vector(self):
        np.testing.assert_array_equal(sample_sphere_surface(RandomSource(0), 3, 0.0), np.zeros(3))

    def test_batch_norms(self):
        batch = sphere_surface_batch(RandomSource(2), 1000, 64, 10.0)
        np.testing.assert_allclose(np.linalg.norm(batch, axis=1), 10.0, rtol=1e-9)

    def test_angle_distribution_uniform_d2(self):
        scipy_stats = pytest.importorskip("scipy.stats")
        pts = sphere_surface_batch(RandomSource(5), 100_000, 2, 1.0)
        angles = np.arctan2(pts[:, 1], pts[:, 0]) + np.pi  # [0, 2pi)
        counts, _ = np.histogram(angles, bins=36, range=(0.0, 2 * np.pi))
        assert scipy_stats.chisquare(counts).pvalue > 0.01

    @settings(max_examples=25, deadline=None)
    @given(d=st.integers(1, 200), r=st.floats(0.0, 100.0), seed=st.integers(0, 2**32))
    def test_norm_invariant_property(self, d, r, seed):
        eps = sample_sphere_surface(RandomSource(seed), d, r)
        assert abs(np.linalg.norm(eps) - r) <= 1e-9 * max(r, 1.0)


class TestBallInterior:
    def test_within_ball(self):
        batch = ball_interior_batch(RandomSource(3), 1000, 8, 10.0)
        norms = np.linalg.norm(batch, axis=1)
        assert np.all(norms <= 10.0)
        assert np.all(norms > 0.0)

    def test_mean_norm_matches_closed_form(self):
        # E||eps|| = r * d / (d + 1) for the uniform ball.
        batch = ball_interior_batch(RandomSource(4), 100_000, 64, 5.0)
        expected = 5.0 * 64 / 65
        assert abs(np.linalg.norm(batch, axis=1).mean() - expected) <= 0.01 * expected

    def test_zero_radius_is_zero_vector(self):
        np.testing.assert_array_equal(sample_ball_interior(RandomSource(0), 3, 0.0), np.zeros(3))

    def test_negative_radius_rejected(self):
        with pytest.raises(ValueError):
            sample_ball_interior(RandomSource(0), 3, -1.0)


class TestMatvec:
    def test_matches_naive_triple_loop(self):
        for seed in range(5):
            rng = RandomSource(seed)
            a = rng.normal((32, 32))
            x = rng.normal(32)
            naive = np.zeros(32)
            for i in range(32):
                acc = 0.0
                for j in range(32):
                    acc += a[i, j] * x[j]
                naive[i] = acc
            got = matvec(a, x)
            denom = np.maximum(np.abs(naive), 1e-30)
            assert np.max(np.abs(got - naive) / denom) < 1e-12

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            matvec(np.zeros((3, 4)), np.zeros(3))
