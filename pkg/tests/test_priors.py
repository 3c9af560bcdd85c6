import numpy as np
import pytest
import scipy.integrate
import scipy.stats

from ekinv.grid import Field, build_domain, dirichlet_spectrum, white_noise
from ekinv.priors import (
    GMap,
    MaternSpec,
    apply_nonstationary_sqrt,
    apply_sqrt_cov,
    cauchy_increments_from_normal,
    cauchy_knot_count,
    cauchy_path_from_increments,
    coefficient_scale,
    g_map,
    hyper_to_unconstrained,
    matern_covariance,
    sample_cauchy_process,
    sample_matern,
    sample_nonstationary,
    unconstrained_to_hyper,
)


@pytest.fixture(scope="module")
def unit_1d():
    domain = build_domain(1, [1.0], 16)
    return domain, dirichlet_spectrum(domain)


def test_spec_validation(unit_1d):
    _, basis = unit_1d
    for bad in [MaternSpec(alpha=0.5, tau=10.0), MaternSpec(alpha=3.0, tau=0.0),
                MaternSpec(alpha=3.0, tau=-1.0)]:
        with pytest.raises(ValueError):
            coefficient_scale(bad, basis)


def test_mode_variance_truth_values(unit_1d):
    # alpha=3, tau=10: variance of the first coefficient is (100 + pi^2)^-3
    _, basis = unit_1d
    s = coefficient_scale(MaternSpec(alpha=3.0, tau=10.0), basis)
    assert s[0] ** 2 == pytest.approx((100 + np.pi**2) ** -3, rel=1e-13)


def test_mode_variances_monte_carlo(unit_1d):
    _, basis = unit_1d
    spec = MaternSpec(alpha=3.0, tau=10.0)
    rng = np.random.default_rng(42)
    n_draws = 20_000
    coeffs = np.stack([basis.analysis(sample_matern(spec, basis, rng))
                       for _ in range(n_draws)])
    expected = coefficient_scale(spec, basis) ** 2
    rel = np.abs(coeffs.var(axis=0) - expected) / expected
    assert np.max(rel) < 5 * np.sqrt(2 / n_draws)


def test_mode_variances_match_discrete_operator_oracle():
    # eigendecomposition of the discretized operator reproduces the design
    # variances up to discretization error
    from ekinv.grid import neg_laplacian

    domain = build_domain(1, [1.0], 128)
    basis = dirichlet_spectrum(domain)
    lam_disc = np.sort(np.linalg.eigvalsh(neg_laplacian(domain).toarray()))
    spec = MaternSpec(alpha=3.0, tau=10.0)
    ours = coefficient_scale(spec, basis)[:6] ** 2
    oracle = (spec.tau**2 + lam_disc[:6]) ** -spec.alpha
    np.testing.assert_allclose(ours, oracle, rtol=1e-2)


def test_larger_tau_shrinks_every_mode(unit_1d):
    _, basis = unit_1d
    for tau_lo, tau_hi in [(10.0, 25.0), (25.0, 50.0), (50.0, 100.0)]:
        lo = coefficient_scale(MaternSpec(alpha=1.6, tau=tau_lo), basis)
        hi = coefficient_scale(MaternSpec(alpha=1.6, tau=tau_hi), basis)
        assert np.all(hi < lo)


def test_zero_noise_returns_mean(unit_1d):
    _, basis = unit_1d
    spec = MaternSpec(alpha=3.0, tau=10.0, mean=2.5)
    u = apply_sqrt_cov(spec, basis, np.zeros(basis.n_modes))
    np.testing.assert_allclose(u.values, 2.5, atol=1e-14)


def test_sqrt_cov_single_mode_scaling():
    # first basis vector, alpha=1, tau -> 0: coefficient scaled by L/pi
    L = 2.5
    domain = build_domain(1, [L], 32)
    basis = dirichlet_spectrum(domain)
    e1 = np.zeros(basis.n_modes)
    e1[0] = 1.0
    u = apply_sqrt_cov(MaternSpec(alpha=1.0, tau=1e-12), basis, e1, scaling="physical")
    assert basis.analysis(u)[0] == pytest.approx(L / np.pi, rel=1e-10)


def test_sqrt_cov_linearity(unit_1d):
    _, basis = unit_1d
    spec = MaternSpec(alpha=2.0, tau=15.0)
    rng = np.random.default_rng(0)
    x1, x2 = rng.standard_normal((2, basis.n_modes))
    a, b = 0.7, -1.3
    lhs = apply_sqrt_cov(spec, basis, a * x1 + b * x2).values
    rhs = a * apply_sqrt_cov(spec, basis, x1).values + b * apply_sqrt_cov(spec, basis, x2).values
    np.testing.assert_allclose(lhs, rhs, atol=1e-12)


def test_normalized_scaling_is_domain_size_invariant():
    # unit-square statistics transported to the physical box: the pointwise
    # variance at matching relative positions is unchanged
    spec = MaternSpec(alpha=2.0, tau=15.0)
    var = []
    for L in (1.0, 6.0):
        basis = dirichlet_spectrum(build_domain(1, [L], 40))
        s = coefficient_scale(spec, basis, scaling="normalized")
        mid = basis.domain.n_interior // 2
        phi = np.stack([basis.eigenfunction(i).values for i in range(basis.n_modes)])
        var.append(np.sum(s**2 * phi[:, mid] ** 2))
    assert var[0] == pytest.approx(var[1], rel=1e-12)


def test_matern_covariance_exponential_case():
    # d=1, alpha=1 (nu=1/2): c(r) = exp(-tau r) / (2 tau)
    tau = 7.0
    r = np.array([0.0, 0.1, 0.5])
    np.testing.assert_allclose(matern_covariance(r, 1.0, tau, 1),
                               np.exp(-tau * r) / (2 * tau), rtol=1e-12)


@pytest.mark.parametrize("alpha,tau,r", [(1.5, 10.0, 0.07), (2.0, 5.0, 0.2)])
def test_matern_covariance_against_quadrature(alpha, tau, r):
    # direct Fourier inversion of the spectral density (tau^2 + k^2)^-alpha
    oracle, _ = scipy.integrate.quad(
        lambda k: (tau**2 + k**2) ** -alpha / np.pi, 0, np.inf,
        weight="cos", wvar=r, epsabs=1e-14, epsrel=1e-12)
    assert matern_covariance(r, alpha, tau, 1) == pytest.approx(oracle, rel=1e-8)


def test_dirichlet_sampler_covariance_approaches_free_space():
    # short length scale, probes near the domain center: boundary images decay
    domain = build_domain(1, [10.0], 200)
    basis = dirichlet_spectrum(domain)
    spec = MaternSpec(alpha=1.5, tau=10.0)
    rng = np.random.default_rng(7)
    draws = np.stack([sample_matern(spec, basis, rng, scaling="physical").values
                      for _ in range(40_000)])
    x = domain.interior_coords(0)
    i = int(np.argmin(np.abs(x - 5.0)))
    for lag in (0, 2, 6):
        emp = np.mean(draws[:, i] * draws[:, i + lag])
        assert emp == pytest.approx(
            float(matern_covariance(x[i + lag] - x[i], 1.5, 10.0, 1)), rel=0.1)


# ---------------------------------------------------------------------------
# nonstationary sampling


def test_nonstationary_constant_ell_exact_algebra():
    from ekinv.grid import discrete_eigenvalue

    domain = build_domain(1, [1.0], 64)
    basis = dirichlet_spectrum(domain)
    ell0, alpha = 0.2, 2.0
    rng = np.random.default_rng(3)
    xi = white_noise(domain, rng)
    u = apply_nonstationary_sqrt(alpha, Field(domain, np.full(domain.n_interior, ell0)),
                                 xi, basis)
    lam_disc = np.array([discrete_eigenvalue(domain, k) for k in basis.k_indices])
    expected = ell0**0.5 * (1 + ell0**2 * lam_disc) ** (-alpha / 2) * xi
    np.testing.assert_allclose(basis.analysis(u), expected, atol=1e-10)


def test_nonstationary_constant_ell_matches_stationary_convention():
    # beta=1 convention: variances tau^(2 alpha - d) (tau^2 + lambda)^-alpha,
    # agreement with the spectral sampler up to discretization error
    domain = build_domain(1, [1.0], 400)
    basis = dirichlet_spectrum(domain)
    ell0, alpha = 0.2, 2.0
    tau = 1 / ell0
    rng = np.random.default_rng(11)
    n_draws = 10_000
    ell = Field(domain, np.full(domain.n_interior, ell0))
    coeffs = np.stack([
        basis.analysis(apply_nonstationary_sqrt(alpha, ell, white_noise(domain, rng), basis))
        for _ in range(n_draws)])
    stationary = tau ** (alpha - 0.5) * coefficient_scale(
        MaternSpec(alpha=alpha, tau=tau), basis, scaling="physical")
    rel = np.abs(coeffs.var(axis=0)[:10] - stationary[:10] ** 2) / stationary[:10] ** 2
    assert np.max(rel) < 0.05


def test_nonstationary_zero_noise():
    domain = build_domain(1, [1.0], 32)
    basis = dirichlet_spectrum(domain)
    ell = Field(domain, np.full(domain.n_interior, 0.5))
    u = apply_nonstationary_sqrt(2.0, ell, np.zeros(basis.n_modes), basis)
    np.testing.assert_allclose(u.values, 0.0, atol=1e-14)


def test_nonstationary_rejects_fractional_alpha():
    domain = build_domain(1, [1.0], 16)
    basis = dirichlet_spectrum(domain)
    ell = Field(domain, np.full(domain.n_interior, 0.5))
    with pytest.raises(ValueError):
        apply_nonstationary_sqrt(1.5, ell, np.zeros(basis.n_modes), basis)


def test_nonstationary_local_correlation_length():
    # larger ell in the right half -> larger empirical correlation length there
    domain = build_domain(1, [1.0], 300)
    basis = dirichlet_spectrum(domain)
    x = domain.interior_coords(0)
    ell = Field(domain, np.where(x < 0.5, 0.02, 0.1))
    rng = np.random.default_rng(19)
    draws = np.stack([
        apply_nonstationary_sqrt(2.0, ell, white_noise(domain, rng), basis).values
        for _ in range(1000)])

    def correlation(i, j):
        c = np.mean(draws[:, i] * draws[:, j])
        return c / np.sqrt(np.mean(draws[:, i] ** 2) * np.mean(draws[:, j] ** 2))

    lag = int(round(0.05 / domain.h[0]))
    i_left = int(np.argmin(np.abs(x - 0.25)))
    i_right = int(np.argmin(np.abs(x - 0.75)))
    assert correlation(i_right, i_right + lag) > correlation(i_left, i_left + lag) + 0.2


def test_sample_nonstationary_runs_2d():
    domain = build_domain(2, [1.0, 1.0], [24, 24])
    basis = dirichlet_spectrum(domain)
    v = Field(domain, np.zeros(domain.n_interior))
    u = sample_nonstationary(2.0, v, GMap("exp"), basis, np.random.default_rng(0))
    assert np.all(np.isfinite(u.values)) and u.norm() > 0


# ---------------------------------------------------------------------------
# Cauchy process


@pytest.fixture(scope="module")
def cauchy_increments():
    domain = build_domain(1, [10.0], 1000)
    delta = 0.5
    rng = np.random.default_rng(23)
    n_knots = cauchy_knot_count(domain, delta)
    knot_node = np.searchsorted(domain.interior_coords(0), np.arange(1, n_knots + 1) * delta)
    incs = []
    for _ in range(5000):
        v = sample_cauchy_process(domain, delta, rng).values
        path = np.concatenate([[0.0], v[knot_node]])
        incs.append(np.diff(path))
    return delta, np.concatenate(incs)


def test_cauchy_path_shape_and_start():
    domain = build_domain(1, [10.0], 1000)
    v = sample_cauchy_process(domain, 0.5, np.random.default_rng(1))
    x = domain.interior_coords(0)
    # v(0) = 0: constant zero before the first knot
    assert np.all(v.values[x < 0.5] == 0.0)
    # piecewise constant between knots
    inside = (x > 1.01) & (x < 1.49)
    assert np.ptp(v.values[inside]) == 0.0


def test_cauchy_rejects_oversized_delta():
    domain = build_domain(1, [10.0], 100)
    with pytest.raises(ValueError):
        sample_cauchy_process(domain, 11.0, np.random.default_rng(0))


def test_cauchy_increment_sign_balance(cauchy_increments):
    _, incs = cauchy_increments
    n = len(incs)
    p_hat = np.mean(incs > 0)
    assert abs(p_hat - 0.5) < 4 * np.sqrt(0.25 / n)


def test_cauchy_increment_half_mass_within_delta(cauchy_increments):
    delta, incs = cauchy_increments
    p_hat = np.mean(np.abs(incs) <= delta)
    assert abs(p_hat - 0.5) < 4 * np.sqrt(0.25 / len(incs))


def test_cauchy_increment_ks(cauchy_increments):
    delta, incs = cauchy_increments
    result = scipy.stats.kstest(incs, scipy.stats.cauchy(scale=delta).cdf)
    assert result.pvalue > 0.01


def test_cauchy_heavy_tail(cauchy_increments):
    delta, incs = cauchy_increments
    p = 2 * np.arctan(0.1) / np.pi  # P(|X| > 10 delta)
    p_hat = np.mean(np.abs(incs) > 10 * delta)
    assert abs(p_hat - p) < 4 * np.sqrt(p * (1 - p) / len(incs))


def test_cauchy_quantile_transform_matches_distribution():
    rng = np.random.default_rng(4)
    incs = cauchy_increments_from_normal(rng.standard_normal(10**5), 0.5)
    result = scipy.stats.kstest(incs, scipy.stats.cauchy(scale=0.5).cdf)
    assert result.pvalue > 0.01
    assert np.all(np.isfinite(cauchy_increments_from_normal(np.array([-40.0, 40.0]), 0.5)))


# ---------------------------------------------------------------------------
# g maps


def test_g_exp_identity_at_zero():
    domain = build_domain(1, [1.0], 16)
    v = Field(domain, np.zeros(domain.n_interior))
    np.testing.assert_allclose(g_map("exp", None, v).values, 1.0)


def test_g_exp_monotone():
    domain = build_domain(1, [1.0], 16)
    rng = np.random.default_rng(0)
    v1 = Field(domain, rng.standard_normal(domain.n_interior))
    v2 = Field(domain, v1.values + np.abs(rng.standard_normal(domain.n_interior)))
    assert np.all(g_map("exp", None, v1).values <= g_map("exp", None, v2).values)


def test_g_rational_arithmetic():
    # a=4, b=d=0, c=1: g(2) = 2
    domain = build_domain(1, [1.0], 16)
    v = Field(domain, np.full(domain.n_interior, 2.0))
    np.testing.assert_allclose(g_map("rational", (4.0, 0.0, 1.0, 0.0), v).values, 2.0)


def test_g_rational_singularity_capped():
    domain = build_domain(1, [10.0], 16)
    v = Field(domain, np.zeros(domain.n_interior))
    ell = g_map("rational", (4.0, 0.0, 1.0, 0.0), v)
    assert np.all(ell.values == 100.0)  # capped at 10 * max extent


def test_g_rational_floor():
    domain = build_domain(1, [10.0], 16)
    v = Field(domain, np.full(domain.n_interior, 1e12))
    ell = g_map("rational", (4.0, 0.0, 1.0, 0.0), v)
    np.testing.assert_allclose(ell.values, 1e-6 * 10.0)  # floored


def test_g_rational_rejects_bad_params():
    domain = build_domain(1, [1.0], 16)
    v = Field(domain, np.zeros(domain.n_interior))
    with pytest.raises(ValueError):
        g_map("rational", (-1.0, 0.0, 1.0, 0.0), v)
    with pytest.raises(ValueError):
        g_map("rational", (4.0, 0.0, 0.0, 0.0), v)


# ---------------------------------------------------------------------------
# uniform-prior bijections


def test_bijection_midpoint():
    theta = unconstrained_to_hyper(0.0, (5.0, 30.0))
    assert theta == pytest.approx(17.5, rel=1e-14)


def test_bijection_diverges_at_edges():
    raw8 = hyper_to_unconstrained(5.0 + 1e-8, (5.0, 30.0))
    raw12 = hyper_to_unconstrained(5.0 + 1e-12, (5.0, 30.0))
    assert raw8 < -5.0
    assert raw12 < raw8


def test_bijection_rejects_out_of_bounds():
    for theta in (5.0, 30.0, 4.0, 31.0):
        with pytest.raises(ValueError):
            hyper_to_unconstrained(theta, (5.0, 30.0))


def test_bijection_round_trip():
    rng = np.random.default_rng(2)
    bounds = (1.3, 4.0)
    theta = bounds[0] + (bounds[1] - bounds[0]) * rng.uniform(size=1000)
    back = unconstrained_to_hyper(hyper_to_unconstrained(theta, bounds), bounds)
    assert np.max(np.abs(back - theta)) < 1e-10


def test_bijection_pushes_normal_to_uniform():
    rng = np.random.default_rng(9)
    theta = unconstrained_to_hyper(rng.standard_normal(10**5), (5.0, 30.0))
    result = scipy.stats.kstest(theta, scipy.stats.uniform(loc=5.0, scale=25.0).cdf)
    assert result.pvalue > 0.01


def test_path_from_increments_matches_sampler():
    domain = build_domain(1, [10.0], 200)
    delta = 0.7
    n = cauchy_knot_count(domain, delta)
    incs = np.arange(1.0, n + 1)
    v = cauchy_path_from_increments(domain, delta, incs)
    x = domain.interior_coords(0)
    expected = np.cumsum(incs)[np.minimum(np.floor(x / delta).astype(int), n) - 1]
    expected = np.where(x < delta, 0.0, expected)
    np.testing.assert_allclose(v.values, expected)
