"""Bi-variate Gaussian algebra used by the decoder, the FP baseline and the metrics."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable

import numpy as np

SIGMA_FLOOR = 1e-3
RHO_MAX = 0.999


@dataclass(frozen=True)
class Vec2:
    x: float
    y: float

    def __post_init__(self):
        if not (math.isfinite(self.x) and math.isfinite(self.y)):
            raise ValueError(f"Vec2 components must be finite, got ({self.x}, {self.y})")

    def __add__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x + other.x, self.y + other.y)

    def __sub__(self, other: "Vec2") -> "Vec2":
        return Vec2(self.x - other.x, self.y - other.y)

    def __mul__(self, k: float) -> "Vec2":
        return Vec2(self.x * k, self.y * k)

    __rmul__ = __mul__

    def norm(self) -> float:
        return math.hypot(self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y], dtype=np.float64)

    @classmethod
    def of(cls, xy: Iterable[float]) -> "Vec2":
        x, y = xy
        return cls(float(x), float(y))


@dataclass(frozen=True)
class Gaussian2D:
    """Mean plus (sigma_x, sigma_y, rho) parameterisation of a 2x2 covariance."""

    mu: Vec2
    sigma_x: float
    sigma_y: float
    rho: float

    def __post_init__(self):
        if not (self.sigma_x >= SIGMA_FLOOR and self.sigma_y >= SIGMA_FLOOR):
            raise ValueError(
                f"sigmas must be >= {SIGMA_FLOOR}, got ({self.sigma_x}, {self.sigma_y})"
            )
        if not abs(self.rho) <= RHO_MAX:
            raise ValueError(f"|rho| must be <= {RHO_MAX}, got {self.rho}")

    @property
    def cov(self) -> np.ndarray:
        c = self.rho * self.sigma_x * self.sigma_y
        return np.array([[self.sigma_x**2, c], [c, self.sigma_y**2]])

    @classmethod
    def from_cov(cls, mu: Vec2, cov: np.ndarray) -> "Gaussian2D":
        """Build from a 2x2 covariance, applying the sigma floor and rho cap."""
        sx = max(math.sqrt(max(cov[0, 0], 0.0)), SIGMA_FLOOR)
        sy = max(math.sqrt(max(cov[1, 1], 0.0)), SIGMA_FLOOR)
        rho = 0.5 * (cov[0, 1] + cov[1, 0]) / (sx * sy)
        rho = min(max(rho, -RHO_MAX), RHO_MAX)
        return cls(mu, sx, sy, rho)


@dataclass(frozen=True)
class DiagGaussianN:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = np.asarray(self.mu, dtype=np.float64)
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != sigma.shape:
            raise ValueError(f"mu shape {mu.shape} != sigma shape {sigma.shape}")
        if np.any(sigma <= 0):
            raise ValueError("all sigma must be positive")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)


def _quad_form(g: Gaussian2D, p: Vec2) -> float:
    dx = (p.x - g.mu.x) / g.sigma_x
    dy = (p.y - g.mu.y) / g.sigma_y
    return (dx * dx - 2.0 * g.rho * dx * dy + dy * dy) / (1.0 - g.rho * g.rho)


def nll(g: Gaussian2D, p: Vec2) -> float:
    """Negative log density of ``p`` under ``g``."""
    log_norm = math.log(2.0 * math.pi * g.sigma_x * g.sigma_y * math.sqrt(1.0 - g.rho**2))
    return log_norm + 0.5 * _quad_form(g, p)


def mahalanobis(g: Gaussian2D, p: Vec2) -> float:
    return math.sqrt(max(_quad_form(g, p), 0.0))


def mahalanobis_arrays(mu, sx, sy, rho, pts) -> np.ndarray:
    """Vectorised Mahalanobis distance; ``mu``/``pts`` have shape (..., 2)."""
    mu = np.asarray(mu, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64)
    dx = (pts[..., 0] - mu[..., 0]) / sx
    dy = (pts[..., 1] - mu[..., 1]) / sy
    q = (dx * dx - 2.0 * rho * dx * dy + dy * dy) / (1.0 - rho * rho)
    return np.sqrt(np.maximum(q, 0.0))


def sample(g: Gaussian2D, rng: np.random.Generator, size: int | None = None):
    """Draw from ``g`` through the Cholesky factor of its covariance.

    Returns a ``Vec2`` when ``size`` is None, else an array of shape (size, 2).
    """
    chol = np.linalg.cholesky(g.cov)
    n = 1 if size is None else size
    eps = rng.standard_normal((n, 2))
    pts = g.mu.as_array() + eps @ chol.T
    if size is None:
        return Vec2.of(pts[0])
    return pts


def kl_diag_vs_standard(q: DiagGaussianN) -> float:
    var = q.sigma**2
    return float(0.5 * np.sum(var + q.mu**2 - 1.0 - np.log(var)))


def ellipse_points(g: Gaussian2D, k_sigma: float, n: int) -> list[Vec2]:
    """Points on the contour where the Mahalanobis distance equals ``k_sigma``."""
    if k_sigma <= 0:
        raise ValueError("k_sigma must be positive")
    if n < 3:
        raise ValueError("need at least 3 points")
    chol = np.linalg.cholesky(g.cov)
    theta = np.linspace(0.0, 2.0 * np.pi, n, endpoint=False)
    circle = k_sigma * np.stack([np.cos(theta), np.sin(theta)], axis=1)
    pts = g.mu.as_array() + circle @ chol.T
    return [Vec2.of(p) for p in pts]
