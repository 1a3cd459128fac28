import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from denscoint.errors import ConfigError, DensityOverflowError
from denscoint.grid_space import ClrFunction, Grid, clr, integrate, norm
from denscoint.operators import LinearMap
from denscoint.simulate import (
    ARConfig,
    InnovationConfig,
    RngSeed,
    brownian_bridge,
    draw_innovation,
    draw_innovation_coefficients,
    innovation_covariance,
    paper_ar1_config,
    paper_basis,
    poly_basis,
    poly_project,
    random_walk_config,
    rescale_demean_bridge,
    sample_density,
    sample_panel,
    simulate_arp,
    simulate_arp_paths,
    simulate_i1_ma,
    stationary_config,
    truncated_normal,
)

GRID = Grid.default()
SMALL = Grid(-3, 3, 101)


class TestBridge:
    def test_endpoints(self):
        B = brownian_bridge(1024, RngSeed(3))
        assert B.shape == (1025,)
        assert B[0] == 0 and B[-1] == 0

    def test_moments(self):
        B = brownian_bridge(1024, RngSeed(5), size=20000)
        assert B[:, 512].var() == pytest.approx(0.25, abs=0.01)
        # Cov(B(1/4), B(3/4)) = 1/4 - 3/16
        assert np.cov(B[:, 256], B[:, 768])[0, 1] == pytest.approx(1 / 16, abs=0.01)

    def test_deterministic(self):
        assert_array_equal(brownian_bridge(100, RngSeed(9, 2)), brownian_bridge(100, RngSeed(9, 2)))
        assert not np.array_equal(brownian_bridge(100, RngSeed(9, 2)), brownian_bridge(100, RngSeed(9, 3)))

    def test_too_few_steps(self):
        with pytest.raises(ConfigError):
            brownian_bridge(1)


class TestRescale:
    def test_zero(self):
        assert np.all(rescale_demean_bridge(np.zeros(1025), GRID).values == 0)

    def test_zero_integral(self, rng):
        for _ in range(5):
            B = brownian_bridge(1024, RngSeed(int(rng.integers(1000))))
            assert abs(integrate(rescale_demean_bridge(B, GRID))) < 1e-10

    def test_affine_map(self):
        # linear path B(r) = r: on [-3, 3] it becomes (u + 3)/6 minus its mean 1/2
        B = np.linspace(0, 1, 1025)
        out = rescale_demean_bridge(B, GRID).values
        assert_allclose(out, (GRID.nodes + 3) / 6 - 0.5, atol=1e-12)
        assert out[0] == pytest.approx(-0.5)


class TestPolyProject:
    def test_linear_fixed(self):
        g = ClrFunction.centered(GRID, 2 * GRID.nodes)
        assert_allclose(poly_project(g, 1).values, g.values, atol=1e-10)

    def test_idempotent_and_contractive(self, rng):
        g = ClrFunction.centered(GRID, rng.standard_normal(GRID.n))
        p = poly_project(g, 10)
        assert_allclose(poly_project(p, 10).values, p.values, atol=1e-10)
        assert norm(p) <= norm(g)

    def test_basis_spans_polynomials(self):
        P = poly_basis(GRID, 4)
        cubic = ClrFunction.centered(GRID, GRID.nodes**3 - GRID.nodes)
        assert_allclose(poly_project(cubic, 4).values, cubic.values, atol=1e-10)
        assert np.max(np.abs(P.gram() - np.eye(4))) < 1e-10


class TestInnovation:
    def test_in_polynomial_span(self):
        cfg = InnovationConfig(m=6)
        c = clr(draw_innovation(cfg, RngSeed(1)))
        assert np.max(np.abs(poly_project(c, 6).values - c.values)) < 1e-10

    def test_mean_zero(self):
        cfg = InnovationConfig(grid=SMALL)
        basis = poly_basis(SMALL, cfg.m).matrix
        coef = draw_innovation_coefficients(cfg, RngSeed(2).generator(), 5000)
        assert np.max(np.abs(coef.mean(axis=0) @ basis)) < 0.02

    def test_scale_zero_uniform(self):
        f = draw_innovation(InnovationConfig(scale=0.0), RngSeed(1))
        assert_allclose(f.values, 1 / 6, rtol=1e-12)

    def test_streams_independent(self):
        cfg = InnovationConfig(grid=SMALL, m=3)
        draws = np.array(
            [clr(draw_innovation(cfg, RngSeed(7, s))).values for s in range(2000)]
        )
        P = poly_basis(SMALL, 3)
        coef = P.coefficients(draws)
        lag = np.mean(coef[1:, 0] * coef[:-1, 0]) / np.mean(coef[:, 0] ** 2)
        assert abs(lag) < 0.1

    def test_covariance_formula(self):
        # MC covariance of coefficients against the exact bridge covariance
        cfg = InnovationConfig(grid=SMALL, m=3)
        coef = draw_innovation_coefficients(cfg, RngSeed(11).generator(), 40000)
        exact = innovation_covariance(cfg)
        assert_allclose(np.cov(coef.T), exact, atol=0.05 * np.abs(exact).max())

    @pytest.mark.parametrize("kw", [{"scale": -1.0}, {"m": 0}, {"m": 21}, {"steps": 1}])
    def test_invalid_config(self, kw):
        with pytest.raises(ConfigError):
            InnovationConfig(**kw)


def _scores_variance_slope(paths, direction):
    v = paths.scores(direction[None, :])[..., 0].var(axis=0)
    t = np.arange(1, v.size + 1)
    return np.polyfit(t, v, 1)[0], v


class TestARP:
    def test_zero_coefficients_iid(self):
        inn = InnovationConfig(grid=SMALL)
        g = truncated_normal(SMALL)
        cfg = ARConfig((LinearMap.zero(SMALL),), (g,), inn, 5)
        f = simulate_arp(cfg, RngSeed(4))
        coef = draw_innovation_coefficients(inn, RngSeed(4).generator(0), 5)
        expected = coef @ poly_basis(SMALL, inn.m).matrix
        assert_allclose(np.array([clr(x).values for x in f]), expected, atol=1e-10)

    def test_identity_fixed_point(self):
        g = truncated_normal(SMALL)
        inn = InnovationConfig(scale=0.0, grid=SMALL)
        f = simulate_arp(ARConfig((LinearMap.identity(SMALL),), (g,), inn, 10), RngSeed(1))
        for x in f:
            assert_allclose(x.values, g.values, rtol=1e-10)

    def test_deterministic(self):
        cfg = stationary_config(T=30, grid=SMALL, J=20)
        a = simulate_arp_paths(cfg, RngSeed(5), reps=3).coords
        b = simulate_arp_paths(cfg, RngSeed(5), reps=2).coords
        assert_array_equal(a[:2], b)

    def test_densities_valid(self):
        for f in simulate_arp(paper_ar1_config(T=50, grid=SMALL, J=20), RngSeed(2)):
            assert np.all(f.values > 0)
            assert integrate(f) == pytest.approx(1.0, abs=1e-10)

    def test_reduced_coordinates_match_full_recursion(self):
        cfg = paper_ar1_config(T=20, grid=SMALL, J=20)
        paths = simulate_arp_paths(cfg, RngSeed(8))
        Psi = cfg.coefficients[0].matrix
        c = draw_innovation_coefficients(cfg.innovation, RngSeed(8).generator(0), 20)
        eps = c @ poly_basis(SMALL, cfg.innovation.m).matrix
        x = np.zeros(SMALL.n)
        g = clr(truncated_normal(SMALL)).values
        for t in range(20):
            x = Psi @ x + eps[t]
            assert_allclose(paths.clr_values(0)[t], x + g, atol=1e-10)

    def test_overflow_reports_time(self):
        inn = InnovationConfig(scale=300.0, grid=SMALL)
        g = truncated_normal(SMALL)
        cfg = ARConfig((LinearMap.identity(SMALL),), (g,), inn, 200)
        with pytest.raises(DensityOverflowError, match="time index"):
            simulate_arp(cfg, RngSeed(1))

    def test_mixing(self):
        cfg = stationary_config(T=2000, grid=SMALL, J=20)
        z = simulate_arp_paths(cfg, RngSeed(3)).scores(paper_basis(SMALL, 20).matrix[:3])[0]
        z = z - z.mean(axis=0)
        g0 = np.mean(z * z, axis=0)
        g10 = np.mean(z[10:] * z[:-10], axis=0)
        assert np.all(np.abs(g10) < 0.2 * g0)

    def test_random_walk_preset(self):
        cfg = random_walk_config(T=200, grid=SMALL)
        paths = simulate_arp_paths(cfg, RngSeed(1), reps=100)
        u = poly_basis(SMALL, cfg.innovation.m).matrix[0]
        slope, _ = _scores_variance_slope(paths, u)
        assert slope == pytest.approx(innovation_covariance(cfg.innovation)[0, 0], rel=0.3)

    def test_config_validation(self):
        g = truncated_normal(SMALL)
        with pytest.raises(ConfigError):
            ARConfig((LinearMap.zero(SMALL),), (g,), InnovationConfig(grid=SMALL), 0)
        with pytest.raises(ConfigError):
            ARConfig((LinearMap.zero(SMALL),) * 2, (g,), InnovationConfig(grid=SMALL), 5)


class TestAR1Example:
    def test_basis_first_element_is_cauchy(self):
        basis = paper_basis(GRID)
        assert len(basis) == 40
        assert np.max(np.abs(basis.gram() - np.eye(40))) < 1e-8

    def test_attractor_and_plateau(self):
        cfg = paper_ar1_config(T=400, grid=SMALL, J=20)
        paths = simulate_arp_paths(cfg, RngSeed(12), reps=100)
        e = paper_basis(SMALL, 20).matrix
        P = poly_basis(SMALL, cfg.innovation.m).matrix
        g = (P * SMALL.weights) @ e[0]
        s2 = g @ innovation_covariance(cfg.innovation) @ g
        slope, _ = _scores_variance_slope(paths, e[0])
        assert 0.5 * s2 < slope < 2 * s2
        for j in (1, 2, 3):
            slope_j, v = _scores_variance_slope(paths, e[j])
            assert v[200:].mean() == pytest.approx(v[100:200].mean(), rel=0.3)


class TestI1MA:
    def test_pure_random_walk(self):
        inn = InnovationConfig(grid=SMALL)
        X = simulate_i1_ma([LinearMap.identity(SMALL)], 50, RngSeed(3), inn, as_clr=True)
        c = draw_innovation_coefficients(inn, RngSeed(3).generator(), 51)
        eps = c @ poly_basis(SMALL, inn.m).matrix
        assert_allclose(X[0], eps[1], atol=1e-12)
        assert_allclose(np.diff(X, axis=0), eps[2:], atol=1e-12)

    def test_difference_is_ma(self):
        inn = InnovationConfig(grid=SMALL)
        I = LinearMap.identity(SMALL)
        coefs = [I, -0.5 * I, 0.25 * I]
        X = simulate_i1_ma(coefs, 40, RngSeed(6), inn, as_clr=True)
        c = draw_innovation_coefficients(inn, RngSeed(6).generator(), 43)
        eps = c @ poly_basis(SMALL, inn.m).matrix  # eps[j] is time j - 2
        dX = np.diff(X, axis=0)  # Δf_t for t = 2..40
        for t in range(2, 41):
            expected = eps[t + 2] - 0.5 * eps[t + 1] + 0.25 * eps[t]
            assert_allclose(dX[t - 2], expected, atol=1e-12)

    def test_zero_long_run_is_stationary(self):
        inn = InnovationConfig(grid=SMALL)
        I = LinearMap.identity(SMALL)
        u = poly_basis(SMALL, inn.m).matrix[0]
        z = np.array(
            [
                simulate_i1_ma([I, -1.0 * I], 300, RngSeed(1, r), inn, as_clr=True) @ (SMALL.weights * u)
                for r in range(100)
            ]
        )
        v = z.var(axis=0)
        assert v[200:].mean() == pytest.approx(v[50:150].mean(), rel=0.3)

    def test_rank_one_long_run(self):
        inn = InnovationConfig(grid=SMALL)
        u = poly_basis(SMALL, inn.m)[0]
        P = LinearMap.rank_one(u, u)
        z = np.array(
            [
                simulate_i1_ma([P], 200, RngSeed(2, r), inn, as_clr=True) @ (SMALL.weights * u.values)
                for r in range(200)
            ]
        )
        slope = np.polyfit(np.arange(1, 201), z.var(axis=0), 1)[0]
        assert slope == pytest.approx(innovation_covariance(inn)[0, 0], rel=0.3)

    def test_callable_spec(self):
        inn = InnovationConfig(grid=SMALL)
        I = LinearMap.identity(SMALL)
        X = simulate_i1_ma(lambda k: 0.5**k * I, 20, RngSeed(1), inn, as_clr=True)
        assert X.shape == (20, SMALL.n)

    def test_not_summable(self):
        I = LinearMap.identity(SMALL)
        with pytest.raises(ConfigError):
            simulate_i1_ma(lambda k: I, 10, RngSeed(1), InnovationConfig(grid=SMALL))
        with pytest.raises(ConfigError):
            simulate_i1_ma([], 10, RngSeed(1), InnovationConfig(grid=SMALL))


class TestSampling:
    def test_truncated_normal_ks(self):
        x = sample_density(truncated_normal(GRID), 20_000, np.random.default_rng(3))
        assert x.min() >= -3 and x.max() <= 3
        assert stats.kstest(x, stats.truncnorm(-3, 3).cdf).pvalue > 0.01

    def test_panel_layout_and_seeding(self):
        dens = simulate_arp(paper_ar1_config(T=4, grid=SMALL), RngSeed(1))
        t, x = sample_panel(dens, 50, RngSeed(1, 1))
        assert_array_equal(np.unique(t, return_counts=True)[1], [50] * 4)
        t2, x2 = sample_panel(dens[:2], 50, RngSeed(1, 1))
        assert_array_equal(x2, x[:100])


def test_uniform_start_subspace():
    # a zero initial clr must not add a spurious direction
    from denscoint.grid_space import uniform

    B = paper_basis(SMALL)
    Psi = LinearMap.diagonal_in(B, 2.0 ** (1 - np.arange(1, 41)))
    cfg = ARConfig((Psi,), (uniform(SMALL),), InnovationConfig(grid=SMALL), 5)
    assert simulate_arp_paths(cfg, RngSeed(1)).coords.shape == (1, 5, 42)
