import numpy as np
import pytest
from scipy import stats

from dyadprobit.clusters import build_couple_clusters
from dyadprobit.errors import ValidationError
from dyadprobit.levels import CoupleWaveLevel, IndividualLevel
from dyadprobit.sampler import (
    ModelDesign,
    adapt_step_size,
    gibbs_sample_beta,
    gibbs_sample_effects,
    gibbs_sample_sigma,
    gibbs_sample_u,
    gibbs_sample_v,
    gibbs_sample_w,
    gibbs_sample_y_star,
    gibbs_sweep,
    initialize,
    metropolis_update_rho,
    run_chain,
)
from dyadprobit.simulate import SimulationScenario, simulate_dataset
from dyadprobit.state import LatentState, ModelSpec, ParameterState
from dyadprobit.stochastic import corr_matrix, n_pairs


def zero_params(R, P, sigma=None, rho=None):
    return ParameterState(
        np.zeros((R, P)),
        sigma if sigma is not None else {"u": np.eye(R)},
        np.zeros(n_pairs(R)) if rho is None else rho,
    )


def unit_design(n_units, T, R, level_cls=IndividualLevel, key="u"):
    """每个单元 T 行、协变量全为 0 的设计"""
    n_rows = n_units * T
    level = level_cls(np.repeat(np.arange(n_units), T), list(range(n_units)))
    return ModelDesign(np.zeros((n_rows, 1)), np.zeros((n_rows, R), dtype=int), {key: level})


def closed_form(T, sigma_e, sigma_level, total):
    precision = T * np.linalg.inv(sigma_e) + np.linalg.inv(sigma_level)
    cov = np.linalg.inv(precision)
    return cov @ np.linalg.inv(sigma_e) @ total, cov


class TestLatentResponse:
    def test_one_sided_truncation(self, rng):
        n = 100_000
        design = ModelDesign(np.zeros((n, 1)), rng.integers(0, 2, size=(n, 3)), {})
        params = zero_params(3, 1, sigma={})
        latent = LatentState(np.where(design.Y == 1, 0.5, -0.5), {})
        y_star = gibbs_sample_y_star(latent, params, design, rng)
        assert np.array_equal(y_star > 0, design.Y == 1)
        assert np.abs(y_star).mean() == pytest.approx(np.sqrt(2 / np.pi), abs=0.01)

    def test_conditional_moments_for_one_row(self, rng):
        n = 100_000
        Y = np.tile([1, 0], (n, 1))
        design = ModelDesign(np.ones((n, 1)), Y, {})
        params = ParameterState(np.array([[0.3], [0.2]]), {}, np.array([0.6]))
        latent = LatentState(np.tile([0.5, -0.5], (n, 1)), {})
        for _ in range(15):
            latent.y_star = gibbs_sample_y_star(latent, params, design, rng)
        raw = rng.multivariate_normal([0.3, 0.2], corr_matrix([0.6]), size=8 * n)
        oracle = raw[(raw[:, 0] > 0) & (raw[:, 1] < 0)]
        assert np.allclose(latent.y_star.mean(axis=0), oracle.mean(axis=0), atol=0.01)
        assert np.allclose(np.cov(latent.y_star.T), np.cov(oracle.T), atol=0.01)


class TestRandomEffects:
    n_units = 100_000

    def test_single_observation(self, rng):
        design = unit_design(self.n_units, 1, 2)
        d = np.array([1.0, -2.0])
        latent = LatentState(np.tile(d, (self.n_units, 1)), {"u": np.zeros((self.n_units, 2))})
        draws = gibbs_sample_u(latent, zero_params(2, 1), design, rng)
        assert np.allclose(draws.mean(axis=0), d / 2, atol=0.01)
        assert np.allclose(np.cov(draws.T), np.eye(2) / 2, atol=0.01)

    def test_four_observations(self, rng):
        design = unit_design(self.n_units, 4, 2)
        d = np.array([0.5, 1.0])
        latent = LatentState(np.tile(d, (4 * self.n_units, 1)), {"u": np.zeros((self.n_units, 2))})
        draws = gibbs_sample_u(latent, zero_params(2, 1), design, rng)
        assert np.allclose(draws.mean(axis=0), 4 * d / 5, atol=0.01)
        assert np.allclose(np.cov(draws.T), np.eye(2) / 5, atol=0.01)

    def test_general_covariances(self, rng):
        T = 3
        sigma_u = np.array([[1.5, 0.4], [0.4, 0.8]])
        params = zero_params(2, 1, sigma={"u": sigma_u}, rho=np.array([0.3]))
        design = unit_design(self.n_units, T, 2)
        rows = np.array([[0.2, -0.4], [1.0, 0.1], [-0.3, 0.6]])
        latent = LatentState(np.tile(rows, (self.n_units, 1)), {"u": np.zeros((self.n_units, 2))})
        draws = gibbs_sample_u(latent, params, design, rng)
        mean, cov = closed_form(T, params.sigma_e, sigma_u, rows.sum(axis=0))
        assert np.allclose(draws.mean(axis=0), mean, atol=0.02)
        assert np.allclose(np.cov(draws.T), cov, atol=0.02)

    def test_singleton_cluster_matches_individual_formula(self, rng):
        sigma_v = np.array([[2.0, -0.5], [-0.5, 1.0]])
        design = unit_design(self.n_units, 1, 2, key="v")
        params = zero_params(2, 1, sigma={"v": sigma_v}, rho=np.array([-0.2]))
        d = np.array([0.7, 0.3])
        latent = LatentState(np.tile(d, (self.n_units, 1)), {"v": np.zeros((self.n_units, 2))})
        draws = gibbs_sample_v(latent, params, design, rng)
        mean, cov = closed_form(1, params.sigma_e, sigma_v, d)
        assert np.allclose(draws.mean(axis=0), mean, atol=0.02)
        assert np.allclose(np.cov(draws.T), cov, atol=0.02)

    def test_couple_wave_pools_two_partners(self, rng):
        sigma_w = np.array([[1.2, 0.3], [0.3, 0.9]])
        design = unit_design(self.n_units, 2, 2, level_cls=CoupleWaveLevel, key="w")
        params = zero_params(2, 1, sigma={"w": sigma_w}, rho=np.array([0.4]))
        rows = np.array([[0.5, 0.0], [-0.1, 0.8]])
        latent = LatentState(np.tile(rows, (self.n_units, 1)), {"w": np.zeros((self.n_units, 2))})
        draws = gibbs_sample_w(latent, params, design, rng)
        sigma_e_inv = np.linalg.inv(params.sigma_e)
        cov = np.linalg.inv(2 * sigma_e_inv + np.linalg.inv(sigma_w))
        assert np.allclose(np.cov(draws.T), cov, atol=0.02)
        assert np.allclose(draws.mean(axis=0), cov @ sigma_e_inv @ rows.sum(axis=0), atol=0.02)

    def test_other_levels_are_subtracted(self, rng):
        n = 50_000
        u_level = IndividualLevel(np.arange(n), list(range(n)))
        v_level = IndividualLevel(np.arange(n), list(range(n)))
        design = ModelDesign(np.zeros((n, 1)), np.zeros((n, 1), dtype=int), {"u": u_level, "v": v_level})
        params = ParameterState(np.zeros((1, 1)), {"u": np.eye(1), "v": np.eye(1)}, np.zeros(0))
        latent = LatentState(np.full((n, 1), 2.0), {"u": np.zeros((n, 1)), "v": np.full((n, 1), 1.0)})
        draws = gibbs_sample_effects("u", latent, params, design, rng)
        assert draws.mean() == pytest.approx(0.5, abs=0.01)


class TestCoefficients:
    def test_empty_data_gives_prior(self, rng):
        design = ModelDesign(np.empty((0, 2)), np.empty((0, 2), dtype=int), {})
        latent = LatentState(np.empty((0, 2)), {})
        params = zero_params(2, 2, sigma={})
        draws = np.array([gibbs_sample_beta(latent, params, design, rng).ravel() for _ in range(20_000)])
        assert np.allclose(draws.mean(axis=0), 0.0, atol=0.3)
        assert np.allclose(draws.var(axis=0), 100.0, rtol=0.05)

    def test_scalar_regression(self, rng):
        x = rng.standard_normal((40, 1))
        y = 0.7 * x + rng.standard_normal((40, 1))
        design = ModelDesign(x, (y > 0).astype(int), {})
        latent = LatentState(y, {})
        params = zero_params(1, 1, sigma={})
        precision = 1 / 100 + float(x.T @ x)
        mean = float(x.T @ y) / precision
        draws = np.array([gibbs_sample_beta(latent, params, design, rng)[0, 0] for _ in range(20_000)])
        assert draws.mean() == pytest.approx(mean, abs=0.01)
        assert draws.var() == pytest.approx(1 / precision, rel=0.05)

    def test_correlated_residuals_closed_form(self, rng):
        n, R, P = 30, 2, 2
        X = np.column_stack([np.ones(n), rng.standard_normal(n)])
        y = rng.standard_normal((n, R))
        params = zero_params(R, P, sigma={}, rho=np.array([0.5]))
        design = ModelDesign(X, (y > 0).astype(int), {})
        latent = LatentState(y, {})
        s_inv = np.linalg.inv(params.sigma_e)
        precision = np.eye(R * P) / 100 + np.kron(s_inv, X.T @ X)
        cov = np.linalg.inv(precision)
        mean = cov @ (s_inv @ y.T @ X).ravel()
        draws = np.array([gibbs_sample_beta(latent, params, design, rng).ravel() for _ in range(20_000)])
        assert np.allclose(draws.mean(axis=0), mean, atol=0.02)
        assert np.allclose(np.cov(draws.T), cov, atol=0.02)


class TestCovariance:
    def test_zero_units_gives_prior(self, rng):
        latent = LatentState(np.empty((0, 2)), {"u": np.empty((0, 2))})
        ours = [gibbs_sample_sigma("u", latent, rng)[0, 0] for _ in range(3000)]
        reference = stats.invwishart(df=4, scale=np.eye(2)).rvs(size=3000, random_state=7)[:, 0, 0]
        assert stats.ks_2samp(ours, reference).pvalue > 0.001

    def test_zero_effects_mean(self, rng):
        n = 20
        latent = LatentState(np.empty((0, 2)), {"u": np.zeros((n, 2))})
        draws = np.array([gibbs_sample_sigma("u", latent, rng) for _ in range(20_000)])
        assert np.allclose(draws.mean(axis=0), np.eye(2) / (4 + n - 2 - 1), atol=0.003)

    def test_converges_to_generating_covariance(self, rng):
        sigma = np.array([[1.5, 0.6], [0.6, 1.0]])
        effects = rng.multivariate_normal(np.zeros(2), sigma, size=20_000)
        latent = LatentState(np.empty((0, 2)), {"u": effects})
        draws = np.array([gibbs_sample_sigma("u", latent, rng) for _ in range(500)])
        assert np.allclose(draws.mean(axis=0), sigma, atol=0.05)


class TestMetropolis:
    def test_zero_step_always_accepts(self, rng):
        e = rng.standard_normal((50, 3))
        rho, accepted = metropolis_update_rho(np.array([0.1, 0.2, 0.3]), np.zeros(3), e.T @ e, 50, rng)
        assert accepted.all()
        assert np.allclose(rho, [0.1, 0.2, 0.3])

    def test_proposals_outside_set_rejected(self, rng):
        e = rng.standard_normal((50, 3))
        start = np.array([0.1, 0.2, 0.3])
        for _ in range(50):
            rho, accepted = metropolis_update_rho(start, np.full(3, 1e4), e.T @ e, 50, rng)
            assert not accepted.any()
            assert np.array_equal(rho, start)

    def test_stationary_distribution_matches_grid(self, rng):
        n = 20
        e = rng.multivariate_normal(np.zeros(2), corr_matrix([0.4]), size=n)
        cross = e.T @ e
        rho, draws = np.zeros(1), np.empty(200_000)
        for t in range(draws.size):
            rho, _ = metropolis_update_rho(rho, np.array([0.35]), cross, n, rng)
            draws[t] = rho[0]

        grid = np.linspace(-1 + 1e-6, 1 - 1e-6, 40_001)
        log_post = np.array([
            stats.multivariate_normal(np.zeros(2), corr_matrix([r])).logpdf(e).sum() for r in grid[::10]
        ])
        density = np.exp(np.interp(grid, grid[::10], log_post) - log_post.max())
        edges = np.linspace(-1, 1, 21)
        grid_mass = np.histogram(grid, bins=edges, weights=density)[0]
        grid_mass /= grid_mass.sum()
        chain_mass = np.histogram(draws[1000:], bins=edges)[0] / draws[1000:].size
        assert 0.5 * np.abs(grid_mass - chain_mass).sum() < 0.02

    def test_adaptation_direction(self):
        gamma = np.array([0.5, 0.5, 0.5])
        history = np.zeros((50, 3), dtype=bool)
        history[:3, 0] = True    # 拒绝率 0.94
        history[:25, 1] = True   # 拒绝率 0.5
        history[:12, 2] = True   # 拒绝率 0.76
        new = adapt_step_size(history, gamma)
        assert new[0] < 0.5
        assert new[1] > 0.5
        assert new[2] == 0.5
        assert new[0] == pytest.approx(0.5 / 1.1)

    def test_adaptive_run_reaches_target(self, rng):
        n = 200
        e = rng.multivariate_normal(np.zeros(2), corr_matrix([0.3]), size=n)
        cross = e.T @ e
        rho, gamma = np.zeros(1), np.array([0.01])
        window = np.zeros((50, 1), dtype=bool)
        for t in range(5000):
            rho, window[t % 50] = metropolis_update_rho(rho, gamma, cross, n, rng)
            if (t + 1) % 50 == 0:
                gamma = adapt_step_size(window, gamma)
        accepted = 0
        for _ in range(5000):
            rho, flags = metropolis_update_rho(rho, gamma, cross, n, rng)
            accepted += int(flags[0])
        assert 0.65 <= 1 - accepted / 5000 <= 0.85


@pytest.fixture(scope="module")
def small_panel():
    truth = ParameterState(
        np.array([[0.3, 0.5], [-0.2, 0.4]]),
        {"u": 0.8 * np.eye(2), "v": 0.5 * np.eye(2), "w": 0.5 * np.eye(2)},
        np.array([0.3]),
    )
    scenario = SimulationScenario(truth, n_units=40, n_waves=3, initial_partner_prob=0.6,
                                  form_prob=0.2, dissolve_prob=0.2, seed=11)
    dataset, _, _ = simulate_dataset(scenario)
    return dataset, build_couple_clusters(dataset)


def small_spec(levels, **kwargs):
    options = dict(R=2, P=2, levels=levels, n_iterations=60, burn_in=20, thin=2, adapt_window=10, seed=5)
    options.update(kwargs)
    return ModelSpec(**options)


class TestRunChain:
    def test_same_seed_is_bit_identical(self, small_panel):
        dataset, index = small_panel
        spec = small_spec("three")
        design = ModelDesign.from_dataset(dataset, index, spec.levels)
        first = run_chain(spec, design, chain=1)
        second = run_chain(spec, design, chain=1)
        assert np.array_equal(first.matrix(), second.matrix())
        assert len(first) == spec.n_stored == 20

    def test_chains_differ_by_seed_offset(self, small_panel):
        dataset, index = small_panel
        spec = small_spec("two")
        design = ModelDesign.from_dataset(dataset, index, spec.levels)
        assert not np.array_equal(run_chain(spec, design, 0).matrix(), run_chain(spec, design, 1).matrix())

    def test_two_level_equals_three_level_design_without_couple_effects(self, small_panel):
        dataset, index = small_panel
        spec = small_spec("two")
        three = ModelDesign.from_dataset(dataset, index, "three")
        deactivated = ModelDesign(three.X, three.Y, {"u": three.levels["u"]})
        two = ModelDesign.from_dataset(dataset, index, "two")
        first = run_chain(spec, deactivated, chain=0)
        second = run_chain(spec, two, chain=0)
        assert np.array_equal(first.matrix(), second.matrix())
        assert first.names == second.names

    def test_stored_states_satisfy_invariants(self, small_panel):
        dataset, index = small_panel
        spec = small_spec("three")
        store = run_chain(spec, ModelDesign.from_dataset(dataset, index, spec.levels))
        for state in store.states():
            state.validate()
        assert store.proposed == spec.n_iterations - spec.burn_in
        assert store.burn_in_proposed == spec.burn_in
        assert len(store.gamma_trace) == 1 + spec.burn_in // spec.adapt_window

    def test_sign_invariant_after_sweeps(self, small_panel, rng):
        dataset, index = small_panel
        spec = small_spec("three")
        design = ModelDesign.from_dataset(dataset, index, spec.levels)
        params, latent = initialize(spec, design, rng)
        gamma = np.full(1, 0.1)
        for _ in range(5):
            gibbs_sweep(spec, design, params, latent, gamma, rng)
            assert np.array_equal(latent.y_star > 0, dataset.Y == 1)

    def test_level_mismatch_rejected(self, small_panel):
        dataset, index = small_panel
        design = ModelDesign.from_dataset(dataset, index, ("u",))
        with pytest.raises(ValidationError):
            run_chain(small_spec("three"), design)
        with pytest.raises(ValidationError):
            run_chain(small_spec("two", R=3, iw_prior_dof=4), design)

    def test_initial_values(self, small_panel, rng):
        dataset, index = small_panel
        spec = small_spec("two")
        design = ModelDesign.from_dataset(dataset, index, spec.levels)
        init = ParameterState(np.ones((2, 2)), {"u": 2 * np.eye(2)}, np.array([0.2]))
        params, latent = initialize(spec, design, rng, init=init)
        assert np.array_equal(params.B, np.ones((2, 2)))
        assert np.all(latent.effects["u"] == 0)
        with pytest.raises(ValidationError):
            initialize(small_spec("three"), ModelDesign.from_dataset(dataset, index, "three"), rng, init=init)


class TestModelSpec:
    def test_defaults(self):
        spec = ModelSpec(R=3, P=2)
        assert spec.prior_beta_variance == 100.0
        assert spec.iw_prior_dof == 4.0
        assert spec.target_rejection == (0.7, 0.8)
        assert spec.n_stored == 4000

    def test_invalid(self):
        with pytest.raises(ValidationError):
            ModelSpec(R=2, P=1, n_iterations=100, burn_in=100)
        with pytest.raises(ValidationError):
            ModelSpec(R=2, P=1, thin=0)
        with pytest.raises(ValidationError):
            ModelSpec(R=6, P=1, iw_prior_dof=4)

    def test_hash_ignores_seed_and_chains(self):
        a = ModelSpec(R=2, P=2, seed=1, n_chains=2)
        b = ModelSpec(R=2, P=2, seed=9, n_chains=4)
        assert a.spec_hash() == b.spec_hash()
        assert a.spec_hash() != ModelSpec(R=2, P=2, levels="three").spec_hash()
        assert ModelSpec.from_dict(a.to_dict()) == a

    def test_parameter_vector_layout(self):
        names = ParameterState.parameter_names(2, 2, ("u", "w"))
        assert names[:4] == ["B_1_1", "B_1_2", "B_2_1", "B_2_2"]
        assert names[4:7] == ["sigma_u_1_1", "sigma_u_2_1", "sigma_u_2_2"]
        assert names[-1] == "rho_e_2_1"
        state = ParameterState(np.arange(4.0).reshape(2, 2),
                               {"u": [[2.0, 0.5], [0.5, 1.0]], "w": [[1.0, 0.1], [0.1, 3.0]]},
                               [0.3])
        restored = ParameterState.from_vector(state.to_vector(), 2, 2, ("u", "w"))
        assert np.array_equal(restored.to_vector(), state.to_vector())
        assert np.array_equal(restored.sigma["w"], state.sigma["w"])
