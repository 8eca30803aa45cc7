"""Seeded random draws, hypersphere noise sampling, and small dense helpers.

Every stochastic operation in this project goes through a :class:`RandomSource`
so that whole runs replay bit-for-bit from a seed. The bit generator is PCG64,
which has published reference output streams; normal variates come from
numpy's ziggurat sampler, which is fixed for a given numpy version. Both
choices are deliberate: determinism per seed is an acceptance requirement.

All vectors returned here are float64. Callers that persist embeddings as
float32 upcast before doing arithmetic.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "InvalidDimensionError",
    "DegenerateDirectionError",
    "RandomSource",
    "gaussian_vector",
    "gaussian_matrix",
    "sample_sphere_surface",
    "sample_ball_interior",
    "sphere_surface_batch",
    "ball_interior_batch",
    "matvec",
]

# How often a zero Gaussian direction may be redrawn before giving up.
# Hitting this at all would indicate a broken generator, not bad luck.
_MAX_REDRAWS = 8


class InvalidDimensionError(ValueError):
    """A dimension argument was zero or negative."""


class DegenerateDirectionError(RuntimeError):
    """Repeated Gaussian draws returned an exact zero vector."""


class RandomSource:
    """Deterministic stream of random draws.

    Identical ``(seed, stream)`` pairs yield identical draw sequences across
    runs and platforms. Distinct streams derived from one seed are
    statistically independent (PCG64 seeded through ``SeedSequence`` spawn
    keys); the CLI uses separate streams for training, annotation masking,
    and shot selection so each stage replays independently.

    A single instance must be used by one execution strand at a time: the
    sequential draw order is what defines determinism.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed)
        self.stream = int(stream)
        ss = np.random.SeedSequence(self.seed, spawn_key=(self.stream,))
        self._gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RandomSource(seed={self.seed}, stream={self.stream})"

    def normal(self, shape) -> np.ndarray:
        """Standard-normal draws of the given shape (float64)."""
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None) -> np.ndarray:
        """Uniform draws on [0, 1)."""
        return self._gen.random(shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high)."""
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice_without_replacement(self, n: int, k: int) -> np.ndarray:
        """k distinct indices drawn uniformly from range(n)."""
        return self._gen.choice(n, size=k, replace=False)


def _check_dim(d: int) -> int:
    d = int(d)
    if d < 1:
        raise InvalidDimensionError(f"dimension must be >= 1, got {d}")
    return d


def _check_radius(r: float) -> float:
    r = float(r)
    if r < 0 or not np.isfinite(r):
        raise ValueError(f"radius must be finite and >= 0, got {r}")
    return r


def gaussian_vector(rng: RandomSource, d: int) -> np.ndarray:
    """d independent standard-normal draws; advances rng deterministically."""
    return rng.normal(_check_dim(d))


def gaussian_matrix(rng: RandomSource, n: int, d: int) -> np.ndarray:
    """(n, d) matrix of standard-normal draws, filled row-major."""
    if n < 0:
        raise ValueError(f"row count must be >= 0, got {n}")
    return rng.normal((n, _check_dim(d)))


def _unit_directions(rng: RandomSource, n: int, d: int) -> np.ndarray:
    """n uniform directions on the unit (d-1)-sphere.

    Normalized Gaussian vectors; exact zero draws (probability-zero) are
    redrawn a bounded number of times.
    """
    g = gaussian_matrix(rng, n, d)
    norms = np.linalg.norm(g, axis=1)
    retries = 0
    while np.any(norms == 0.0):
        if retries >= _MAX_REDRAWS:
            raise DegenerateDirectionError(
                "Gaussian direction draw returned a zero vector repeatedly"
            )
        bad = np.flatnonzero(norms == 0.0)
        g[bad] = rng.normal((bad.size, d))
        norms[bad] = np.linalg.norm(g[bad], axis=1)
        retries += 1
    return g / norms[:, None]


def sphere_surface_batch(rng: RandomSource, n: int, d: int, r: float) -> np.ndarray:
    """(n, d) samples with ||row||_2 = r, directions uniform on the sphere.

    r = 0 returns zeros without consuming draws.
    """
    d = _check_dim(d)
    r = _check_radius(r)
    if n < 0:
        raise ValueError(f"sample count must be >= 0, got {n}")
    if r == 0.0 or n == 0:
        return np.zeros((n, d))
    return r * _unit_directions(rng, n, d)


def ball_interior_batch(rng: RandomSource, n: int, d: int, r: float) -> np.ndarray:
    """(n, d) samples uniform in the closed ball of radius r.

    Uniform direction scaled by r * U^(1/d) with U uniform on (0, 1]; the
    resulting norm has mean r * d / (d + 1). Directions are drawn first,
    then the n radius uniforms.
    """
    d = _check_dim(d)
    r = _check_radius(r)
    if n < 0:
        raise ValueError(f"sample count must be >= 0, got {n}")
    if r == 0.0 or n == 0:
        return np.zeros((n, d))
    dirs = _unit_directions(rng, n, d)
    u = 1.0 - rng.uniform(n)  # (0, 1]
    return dirs * (r * u ** (1.0 / d))[:, None]


def sample_sphere_surface(rng: RandomSource, d: int, r: float) -> np.ndarray:
    """One sample with ||eps||_2 = r (up to rounding), direction uniform."""
    return sphere_surface_batch(rng, 1, d, r)[0]


def sample_ball_interior(rng: RandomSource, d: int, r: float) -> np.ndarray:
    """One sample uniform in the closed ball of radius r."""
    return ball_interior_batch(rng, 1, d, r)[0]


def matvec(a: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Dense matrix-vector product in float64."""
    a = np.asarray(a, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    if a.ndim != 2 or x.ndim != 1 or a.shape[1] != x.shape[0]:
        raise ValueError(f"shape mismatch: {a.shape} @ {x.shape}")
    return a @ x
