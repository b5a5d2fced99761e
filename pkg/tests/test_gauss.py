import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate, stats

from pedcov.gauss import (
    RHO_MAX,
    SIGMA_FLOOR,
    DiagGaussianN,
    Gaussian2D,
    Vec2,
    ellipse_points,
    kl_diag_vs_standard,
    mahalanobis,
    mahalanobis_arrays,
    nll,
    sample,
)

finite = st.floats(-50, 50, allow_nan=False)
sigmas = st.floats(0.05, 5.0)
rhos = st.floats(-0.95, 0.95)


@st.composite
def gaussians(draw):
    return Gaussian2D(Vec2(draw(finite), draw(finite)), draw(sigmas), draw(sigmas), draw(rhos))


def unit() -> Gaussian2D:
    return Gaussian2D(Vec2(0.0, 0.0), 1.0, 1.0, 0.0)


def test_nll_at_mean_of_unit_gaussian():
    assert nll(unit(), Vec2(0, 0)) == pytest.approx(math.log(2 * math.pi), abs=1e-12)


def test_nll_unit_quadratic_form():
    assert nll(unit(), Vec2(1, 0)) == pytest.approx(math.log(2 * math.pi) + 0.5, abs=1e-12)


def test_nll_matches_independent_density_and_normalises():
    g = Gaussian2D(Vec2(1, 2), 0.5, 2.0, 0.3)
    oracle = -stats.multivariate_normal(mean=[1, 2], cov=g.cov).logpdf([1.4, 1.0])
    assert nll(g, Vec2(1.4, 1.0)) == pytest.approx(oracle, abs=1e-12)
    xs = np.linspace(1 - 6 * 0.5, 1 + 6 * 0.5, 601)
    ys = np.linspace(2 - 6 * 2.0, 2 + 6 * 2.0, 601)
    dens = np.array([[math.exp(-nll(g, Vec2(x, y))) for x in xs] for y in ys])
    total = integrate.trapezoid(integrate.trapezoid(dens, xs, axis=1), ys)
    assert total == pytest.approx(1.0, abs=1e-3)


def test_mahalanobis_identity_is_euclidean():
    assert mahalanobis(unit(), Vec2(3, 4)) == pytest.approx(5.0, abs=1e-12)
    assert mahalanobis(unit(), Vec2(0, 0)) == 0.0


def test_mahalanobis_matches_matrix_inverse():
    g = Gaussian2D(Vec2(0.3, -1.0), 2.0, 1.0, 0.5)
    d = np.array([1.0, 1.0])
    oracle = math.sqrt(d @ np.linalg.inv(g.cov) @ d)
    assert mahalanobis(g, g.mu + Vec2(1, 1)) == pytest.approx(oracle, abs=1e-12)


def test_sample_moments_and_chi_square_fraction():
    g = Gaussian2D(Vec2(2.0, -1.0), 0.7, 1.9, -0.6)
    pts = sample(g, np.random.default_rng(0), size=100_000)
    mean = pts.mean(axis=0)
    assert abs(mean[0] - 2.0) < 0.02 * 0.7
    assert abs(mean[1] + 1.0) < 0.02 * 1.9
    md = mahalanobis_arrays(g.mu.as_array(), g.sigma_x, g.sigma_y, g.rho, pts)
    assert np.mean(md < 1.0) == pytest.approx(1 - math.exp(-0.5), abs=0.01)
    assert np.median(md) == pytest.approx(math.sqrt(2 * math.log(2)), abs=0.02)
    assert np.mean(md**2) == pytest.approx(2.0, abs=0.03)


def test_sample_independent_axes():
    pts = sample(unit(), np.random.default_rng(5), size=100_000)
    assert abs(np.corrcoef(pts.T)[0, 1]) < 0.02


def test_sample_is_seeded():
    g = Gaussian2D(Vec2(0, 0), 1.0, 2.0, 0.2)
    a = sample(g, np.random.default_rng(9))
    b = sample(g, np.random.default_rng(9))
    assert isinstance(a, Vec2) and a == b


def test_kl_closed_form_examples():
    assert kl_diag_vs_standard(DiagGaussianN(np.zeros(4), np.ones(4))) == 0.0
    assert kl_diag_vs_standard(DiagGaussianN(np.array([1.0]), np.array([1.0]))) == pytest.approx(0.5)


def test_kl_matches_quadrature():
    rng = np.random.default_rng(2)
    mu = rng.normal(0, 1.5, size=3)
    sd = rng.uniform(0.3, 2.5, size=3)
    total = 0.0
    for m, s in zip(mu, sd):
        q, p = stats.norm(m, s), stats.norm(0, 1)
        f = lambda x: q.pdf(x) * (q.logpdf(x) - p.logpdf(x))
        total += integrate.quad(f, m - 12 * s, m + 12 * s, limit=200)[0]
    assert kl_diag_vs_standard(DiagGaussianN(mu, sd)) == pytest.approx(total, abs=1e-4)


def test_ellipse_points_on_contour():
    g = unit()
    for p in ellipse_points(g, 1.0, 64):
        assert mahalanobis(g, p) == pytest.approx(1.0, abs=1e-9)


def test_ellipse_three_sigma_encloses_one_sigma():
    g = Gaussian2D(Vec2(1, 1), 0.5, 1.5, 0.7)
    inner = ellipse_points(g, 1.0, 90)
    outer = ellipse_points(g, 3.0, 90)
    for a, b in zip(inner, outer):
        assert (b - g.mu).norm() > (a - g.mu).norm()
        assert mahalanobis(g, a) < 3.0


def test_ellipse_major_axis_follows_leading_eigenvector():
    g = Gaussian2D(Vec2(0, 0), 2.0, 0.7, 0.6)
    pts = np.array([p.as_array() for p in ellipse_points(g, 2.0, 3600)])
    far = pts[np.argmax(np.linalg.norm(pts, axis=1))]
    w, v = np.linalg.eigh(g.cov)
    lead = v[:, np.argmax(w)]
    cos = abs(far @ lead) / np.linalg.norm(far)
    assert cos > 1 - 1e-5
    assert np.linalg.norm(far) == pytest.approx(2.0 * math.sqrt(w.max()), rel=1e-5)


@pytest.mark.parametrize("bad", [
    dict(sigma_x=SIGMA_FLOOR / 2, sigma_y=1.0, rho=0.0),
    dict(sigma_x=1.0, sigma_y=0.0, rho=0.0),
    dict(sigma_x=1.0, sigma_y=1.0, rho=RHO_MAX + 1e-6),
    dict(sigma_x=1.0, sigma_y=1.0, rho=float("nan")),
])
def test_invalid_gaussian_rejected(bad):
    with pytest.raises(ValueError):
        Gaussian2D(Vec2(0, 0), **bad)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        Vec2(float("inf"), 0.0)
    with pytest.raises(ValueError):
        DiagGaussianN(np.zeros(2), np.array([1.0, 0.0]))
    with pytest.raises(ValueError):
        ellipse_points(unit(), 0.0, 10)
    with pytest.raises(ValueError):
        ellipse_points(unit(), 1.0, 2)


def test_from_cov_floors_and_caps():
    g = Gaussian2D.from_cov(Vec2(0, 0), np.array([[0.0, 0.0], [0.0, 4.0]]))
    assert g.sigma_x == SIGMA_FLOOR and g.sigma_y == 2.0 and g.rho == 0.0
    g = Gaussian2D.from_cov(Vec2(0, 0), np.array([[1.0, 1.0], [1.0, 1.0]]))
    assert g.rho == RHO_MAX


@settings(max_examples=100, deadline=None)
@given(gaussians(), finite, finite)
def test_nll_decomposes_into_mahalanobis(g, x, y):
    p = Vec2(x, y)
    assert nll(g, p) == pytest.approx(nll(g, g.mu) + mahalanobis(g, p) ** 2 / 2, rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(gaussians(), finite, finite, st.floats(0, 2 * math.pi))
def test_mahalanobis_rotation_invariant(g, x, y, theta):
    R = np.array([[math.cos(theta), -math.sin(theta)], [math.sin(theta), math.cos(theta)]])
    cov = R @ g.cov @ R.T
    sx, sy = math.sqrt(cov[0, 0]), math.sqrt(cov[1, 1])
    rho = cov[0, 1] / (sx * sy)
    if abs(rho) > RHO_MAX:
        return
    rotated = Gaussian2D(Vec2.of(R @ g.mu.as_array()), sx, sy, rho)
    p = Vec2(x, y)
    md = mahalanobis(g, p)
    assert mahalanobis(rotated, Vec2.of(R @ p.as_array())) == pytest.approx(md, rel=1e-9, abs=1e-9)


@settings(max_examples=15, deadline=None)
@given(gaussians())
def test_density_normalises_on_six_sigma_grid(g):
    xs = np.linspace(g.mu.x - 6 * g.sigma_x, g.mu.x + 6 * g.sigma_x, 401)
    ys = np.linspace(g.mu.y - 6 * g.sigma_y, g.mu.y + 6 * g.sigma_y, 401)
    X, Y = np.meshgrid(xs, ys)
    dx, dy = (X - g.mu.x) / g.sigma_x, (Y - g.mu.y) / g.sigma_y
    q = (dx**2 - 2 * g.rho * dx * dy + dy**2) / (1 - g.rho**2)
    log_norm = nll(g, g.mu)
    dens = np.exp(-(log_norm + 0.5 * q))
    total = integrate.trapezoid(integrate.trapezoid(dens, xs, axis=1), ys)
    assert total == pytest.approx(1.0, abs=1e-3)
    # spot-check the vectorised grid against the scalar implementation
    assert -math.log(dens[123, 77]) == pytest.approx(nll(g, Vec2(X[123, 77], Y[123, 77])), rel=1e-9, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(-5, 5), st.floats(0.05, 5)), min_size=1, max_size=8))
def test_kl_nonnegative_and_zero_only_at_standard(pairs):
    mu = np.array([p[0] for p in pairs])
    sd = np.array([p[1] for p in pairs])
    kl = kl_diag_vs_standard(DiagGaussianN(mu, sd))
    assert kl >= 0.0
    # KL is locally quadratic, so a vanishing value forces mu ~ 0 and sigma ~ 1
    if kl < 1e-10:
        assert np.allclose(mu, 0, atol=1e-4) and np.allclose(sd, 1, atol=1e-4)
    if np.all(mu == 0) and np.all(sd == 1):
        assert kl == 0.0
