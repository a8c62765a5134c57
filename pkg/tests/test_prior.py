import numpy as np
import pytest

from lfdiff import fem
from lfdiff.errors import DimensionError, IllConditionedPriorError, InvalidParameterError, ParameterOverflowError
from lfdiff.prior import (
    ConductivityParam,
    apply_link,
    build_series_prior,
    build_stationary_prior,
    inverse_link,
    jittered_cholesky,
    laplacian_series_basis,
    matern_covariance,
    nodal_basis,
    project_onto_basis,
    sample_prior,
    se_covariance,
)


@pytest.fixture(scope="module")
def series_small(small_mesh):
    return laplacian_series_basis(small_mesh, 68)


class TestSeriesPrior:
    def test_full_scale_covariance_entries(self, series_small):
        pb, lb = series_small
        prior = build_series_prior(lb, 68, 1.0, 500.0)
        assert prior.dim == 69
        assert prior.cov_diag[0] == 500.0
        np.testing.assert_allclose(prior.cov_diag[1:], 500.0 / lb.eigenvalues[1:69], rtol=1e-15)

    def test_param_basis_input_matches(self, series_small):
        pb, lb = series_small
        np.testing.assert_array_equal(
            build_series_prior(pb, 68, 1.0, 500.0).cov_diag, build_series_prior(lb, 68, 1.0, 500.0).cov_diag
        )

    def test_alpha_zero_is_scaled_identity(self, series_small):
        prior = build_series_prior(series_small[1], 10, 0.0, 3.0)
        np.testing.assert_array_equal(prior.covariance(), 3.0 * np.eye(11))

    def test_insufficient_eigenpairs(self, series_small):
        with pytest.raises(InvalidParameterError, match="K=80"):
            build_series_prior(series_small[0], 80, 1.0, 1.0)

    @pytest.mark.parametrize("alpha, sigma2", [(-1.0, 1.0), (1.0, 0.0)])
    def test_invalid_hyperparameters(self, series_small, alpha, sigma2):
        with pytest.raises(InvalidParameterError):
            build_series_prior(series_small[0], 5, alpha, sigma2)

    def test_draw_variance(self, series_small):
        prior = build_series_prior(series_small[0], 10, 1.0, 500.0)
        rng = np.random.default_rng(1)
        draws = np.array([sample_prior(prior, rng) for _ in range(10_000)])
        np.testing.assert_allclose(draws.var(axis=0), prior.cov_diag, rtol=0.05)

    def test_covariance_recovery(self, series_small):
        prior = build_series_prior(series_small[0], 5, 1.0, 1.0)
        rng = np.random.default_rng(2)
        draws = np.array([sample_prior(prior, rng) for _ in range(10_000)])
        emp = np.cov(draws.T)
        scale = np.sqrt(np.outer(prior.cov_diag, prior.cov_diag))
        np.testing.assert_allclose(np.diag(emp), prior.cov_diag, rtol=0.1)
        # off-diagonal entries are zero; bound them on the correlation scale
        assert np.max(np.abs(emp - prior.covariance()) / scale) < 0.1

    def test_log_density_gradient(self, series_small):
        prior = build_series_prior(series_small[0], 8, 1.0, 2.0)
        theta = np.random.default_rng(3).standard_normal(9)
        fd = np.array([(prior.log_density(theta + 1e-5 * e) - prior.log_density(theta - 1e-5 * e)) / 2e-5 for e in np.eye(9)])
        np.testing.assert_allclose(-prior.precision_times(theta), fd, rtol=1e-6, atol=1e-8)

    def test_roughness_increases_as_alpha_decreases(self, small_mesh, series_small):
        pb = series_small[0]
        M = fem.assemble_mass(small_mesh)
        S = fem.assemble_stiffness(small_mesh, 1.0)
        rough = []
        for alpha in (2.0, 1.0, 0.5):
            prior = build_series_prior(pb, 68, alpha, 1.0)
            rng = np.random.default_rng(4)
            vals = [float(F @ (S @ F)) / float(np.ones(len(F)) @ (M @ np.ones(len(F))))
                    for F in (pb.field(sample_prior(prior, rng)) for _ in range(200))]
            rough.append(np.mean(vals))
        assert rough[0] < rough[1] < rough[2]


class TestKernels:
    def test_matern_at_zero(self):
        assert matern_covariance(0.0, 2.5, 0.25) == 1.0

    def test_matern_half_is_exponential(self):
        r = np.linspace(0, 2, 101)
        np.testing.assert_allclose(matern_covariance(r, 0.5, 0.3), np.exp(-r / 0.3), atol=1e-10)

    @pytest.mark.parametrize("alpha", [0.5, 1.5, 2.5])
    def test_matern_monotone(self, alpha):
        c = matern_covariance(np.linspace(0, 3, 200), alpha, 0.25)
        assert np.all(np.diff(c) < 0)

    def test_matern_invalid(self):
        with pytest.raises(InvalidParameterError):
            matern_covariance(1.0, 0.0, 1.0)

    def test_se_values(self):
        assert se_covariance(0.0, 0.4) == 1.0
        assert se_covariance(0.4, 0.4) == pytest.approx(np.exp(-0.5), rel=1e-15)
        assert se_covariance(0.4, 0.4) == pytest.approx(0.60653, abs=5e-6)

    def test_matern_approaches_se(self):
        r = np.linspace(0, 0.75, 200)
        assert np.max(np.abs(matern_covariance(r, 50.0, 0.25) - se_covariance(r, 0.25))) <= 0.02


class TestStationaryPrior:
    def test_perfectly_correlated_pair(self):
        prior = build_stationary_prior(np.array([[0.0, 0.0], [0.01, 0.0]]), "se", ell=1e3)
        np.testing.assert_allclose(prior.covariance(), np.ones((2, 2)), atol=1e-8)
        assert prior.jitter > 0

    def test_unit_diagonal(self, tiny_mesh):
        prior = build_stationary_prior(tiny_mesh, "matern", alpha=2.5, ell=0.25)
        np.testing.assert_allclose(np.diag(prior.covariance()), 1.0 + prior.jitter, rtol=1e-12)

    def test_reference_matern_scale_factorizes(self, small_mesh):
        prior = build_stationary_prior(small_mesh, "matern", alpha=2.5, ell=0.25)
        assert prior.dim == small_mesh.n_nodes
        assert np.all(np.isfinite(prior.chol))

    def test_marginal_variance(self, tiny_mesh):
        prior = build_stationary_prior(tiny_mesh, "matern", alpha=2.5, ell=0.25)
        rng = np.random.default_rng(5)
        draws = np.array([sample_prior(prior, rng) for _ in range(5000)])
        interior = np.setdiff1d(np.arange(tiny_mesh.n_nodes), tiny_mesh.boundary_nodes)
        np.testing.assert_allclose(draws[:, interior].var(axis=0), 1.0, rtol=0.1)

    def test_unknown_kernel(self, tiny_mesh):
        with pytest.raises(InvalidParameterError):
            build_stationary_prior(tiny_mesh, "cauchy", ell=1.0)

    def test_jitter_gives_up(self):
        bad = np.array([[1.0, 0.0], [0.0, -0.5]])
        with pytest.raises(IllConditionedPriorError) as err:
            jittered_cholesky(bad, max_doublings=3)
        # starts at 1e-10 * trace / dim and doubles three times
        assert err.value.jitter == pytest.approx(1e-10 * 0.25 * 8, rel=1e-12)


class TestSampling:
    def test_zero_input(self, series_small):
        prior = build_series_prior(series_small[0], 5, 1.0, 1.0)
        np.testing.assert_array_equal(prior.factor_times(np.zeros(6)), 0.0)

    def test_deterministic(self, tiny_mesh):
        prior = build_stationary_prior(tiny_mesh, "matern", alpha=2.5, ell=0.25)
        a = sample_prior(prior, np.random.default_rng(9))
        b = sample_prior(prior, np.random.default_rng(9))
        np.testing.assert_array_equal(a, b)


class TestLink:
    def test_zero_theta(self, tiny_mesh):
        f, dphi = apply_link(ConductivityParam(np.zeros(tiny_mesh.n_nodes), nodal_basis(tiny_mesh)), tiny_mesh)
        np.testing.assert_array_equal(f, 1.1)
        np.testing.assert_array_equal(dphi, 1.0)

    def test_inverse_round_trip(self, series_small, small_mesh):
        pb = series_small[0]
        theta = np.random.default_rng(6).standard_normal(pb.dim)
        f, _ = apply_link(ConductivityParam(theta, pb), small_mesh)
        np.testing.assert_allclose(inverse_link(f), pb.field(theta), atol=1e-12)

    def test_overflow(self, tiny_mesh):
        with pytest.raises(ParameterOverflowError):
            apply_link(ConductivityParam(np.full(tiny_mesh.n_nodes, 701.0), nodal_basis(tiny_mesh)))

    def test_nonfinite_theta(self, tiny_mesh):
        with pytest.raises(InvalidParameterError):
            ConductivityParam(np.array([np.nan]), nodal_basis(tiny_mesh))

    def test_dimension_mismatch(self, series_small):
        with pytest.raises(DimensionError):
            series_small[0].field(np.zeros(3))


class TestProjection:
    def test_basis_member_is_fixed_point(self, series_small, small_mesh):
        pb = series_small[0]
        theta = np.random.default_rng(7).standard_normal(pb.dim)
        coef, proj = project_onto_basis(small_mesh, pb, pb.field(theta))
        np.testing.assert_allclose(coef, theta, atol=1e-10)

    def test_residual_is_mass_orthogonal(self, series_small, small_mesh):
        pb = series_small[0]
        F = np.sin(4 * small_mesh.nodes[:, 0]) * small_mesh.nodes[:, 1]
        _, proj = project_onto_basis(small_mesh, pb, F)
        M = fem.assemble_mass(small_mesh)
        np.testing.assert_allclose(pb.values.T @ (M @ (F - proj)), 0.0, atol=1e-12)

    def test_nodal_basis_is_identity(self, tiny_mesh):
        F = tiny_mesh.nodes[:, 0]
        coef, proj = project_onto_basis(tiny_mesh, nodal_basis(tiny_mesh), F)
        np.testing.assert_array_equal(coef, F)
