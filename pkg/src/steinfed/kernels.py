"""Kernel and kernel-density primitives shared by the particle updates.

Two ingredients live here.  The first is the RBF kernel used by the
transport direction, kappa(x, y) = exp(-||x - y||^2 / h), together with the
median-heuristic bandwidth rule h = med^2 / ln N.  The second is an
isotropic Gaussian kernel density estimate with a fixed per-dimension
standard deviation, which turns a particle set into a differentiable
log density so that particle-based distributions can appear inside other
update targets.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import pdist
from scipy.special import logsumexp, softmax

BANDWIDTH_FLOOR = 1e-8


@dataclass(frozen=True)
class KernelConfig:
    """Bandwidth policy for the RBF kernel.

    ``h=None`` recomputes the bandwidth from the current particles with the
    median heuristic at every update step; a positive float fixes it.
    """

    h: float | None = None

    def __post_init__(self) -> None:
        if self.h is not None and not self.h > 0:
            raise ValueError(f"fixed bandwidth must be positive, got {self.h}")

    def resolve(self, particles: np.ndarray) -> float:
        if self.h is not None:
            return self.h
        return median_bandwidth(particles)


@dataclass(frozen=True)
class KdeConfig:
    """Per-dimension standard deviation of the Gaussian KDE."""

    lam: float = 0.55

    def __post_init__(self) -> None:
        if not self.lam > 0:
            raise ValueError(f"kde standard deviation must be positive, got {self.lam}")


def _as_particle_matrix(particles: np.ndarray) -> np.ndarray:
    theta = np.asarray(particles, dtype=float)
    if theta.ndim != 2:
        raise ValueError(f"expected a (N, d) particle array, got shape {theta.shape}")
    if theta.shape[0] == 0:
        raise ValueError("particle set is empty")
    return theta


def rbf_kernel(x: np.ndarray, y: np.ndarray, h: float) -> float:
    """Evaluate kappa(x, y) = exp(-||x - y||^2 / h) for two points."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if x.shape != y.shape:
        raise ValueError(f"point shapes differ: {x.shape} vs {y.shape}")
    if not h > 0:
        raise ValueError(f"bandwidth must be positive, got {h}")
    return float(np.exp(-np.sum((x - y) ** 2) / h))


def rbf_kernel_grad_first(x: np.ndarray, y: np.ndarray, h: float) -> np.ndarray:
    """Gradient of kappa(x, y) with respect to its first argument."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return -(2.0 / h) * (x - y) * rbf_kernel(x, y, h)


def median_bandwidth(particles: np.ndarray) -> float:
    """Median-heuristic bandwidth: squared median pairwise distance over ln N.

    Distances are plain Euclidean distances (not squared); an even count of
    pairs takes the mean of the two middle values.  The result is floored at
    a small positive constant so degenerate particle sets stay usable.
    """
    theta = _as_particle_matrix(particles)
    n = theta.shape[0]
    if n < 2:
        raise ValueError("median bandwidth needs at least 2 particles")
    med = float(np.median(pdist(theta)))
    return max(med * med / np.log(n), BANDWIDTH_FLOOR)


def _query_matrix(query: np.ndarray, dim: int) -> tuple[np.ndarray, bool]:
    q = np.asarray(query, dtype=float)
    single = q.ndim == 1
    q = np.atleast_2d(q)
    if q.ndim != 2 or q.shape[1] != dim:
        raise ValueError(f"query shape {np.asarray(query).shape} does not match dimension {dim}")
    return q, single


def kde_log_density(particles: np.ndarray, query: np.ndarray, lam: float) -> float | np.ndarray:
    """Log density of an isotropic Gaussian KDE centred on the particles.

    Each particle contributes a Gaussian with per-dimension standard
    deviation ``lam``; mixture weights are uniform.  ``query`` may be a
    single point ``(d,)`` or a batch ``(Q, d)``.
    """
    theta = _as_particle_matrix(particles)
    n, d = theta.shape
    q, single = _query_matrix(query, d)
    sq = ((q[:, None, :] - theta[None, :, :]) ** 2).sum(axis=2)
    log_norm = 0.5 * d * np.log(2.0 * np.pi * lam * lam) + np.log(n)
    out = logsumexp(-sq / (2.0 * lam * lam), axis=1) - log_norm
    return float(out[0]) if single else out


def kde_log_density_grad(particles: np.ndarray, query: np.ndarray, lam: float) -> np.ndarray:
    """Gradient of the KDE log density with respect to the query point(s)."""
    theta = _as_particle_matrix(particles)
    d = theta.shape[1]
    q, single = _query_matrix(query, d)
    diff = theta[None, :, :] - q[:, None, :]
    sq = (diff ** 2).sum(axis=2)
    weights = softmax(-sq / (2.0 * lam * lam), axis=1)
    grad = (weights[:, :, None] * diff).sum(axis=1) / (lam * lam)
    return grad[0] if single else grad
