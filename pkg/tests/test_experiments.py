"""Unit tests for the experiment-harness building blocks.

The full campaigns run end to end in the acceptance suite; here we pin the
small numerical pieces they are assembled from: rate fits on synthetic data,
the 2x2 Lyapunov closed form against scipy's general solver, the epsilon
rescaling of the base system, seed salting, ensemble-size guards, and the
construction of contraction test pairs.
"""

import math

import numpy as np
import pytest
from scipy.linalg import solve_continuous_lyapunov

from volterra_spde.dynamics import SolverConfig, SystemSpec
from volterra_spde.experiments import (
    ExperimentConfig,
    RateFit,
    _contraction_pairs,
    _default_u0,
    _salted,
    _solver_with_cadence,
    fit_decay_rate,
    linear_stationary_variance,
    mc_mean_hw,
    memoryless_twin,
    noise_contract_probe,
    spec_for_epsilon,
)
from volterra_spde.memory import Kernel
from volterra_spde.spectral import Domain, Noise, Potential

DOM = Domain(length=np.pi, n_modes=8, n_quad=32)
CUBIC = Potential(coeffs=(0.0, 1.0, 0.0, -1.0))
NOISE = Noise.power_law(DOM.n_modes, q0=0.25, decay=2.0, n_bar=2)


def _spec(epsilon=1.0):
    return SystemSpec(
        domain=DOM, kappa=0.5, kernel=Kernel.exponential(delta=1.0, epsilon=epsilon),
        potential=CUBIC, noise=NOISE, memory_backend="exp_reduction",
    )


class TestRateFit:
    def test_loglog_recovers_exact_power_law(self):
        x = np.geomspace(1e-2, 1.0, 6)
        fit = RateFit.loglog(x, 3.5 * x**1.5)
        assert fit.slope == pytest.approx(1.5, abs=1e-12)
        assert fit.intercept == pytest.approx(math.log(3.5), abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)
        assert fit.slope_half_width == pytest.approx(0.0, abs=1e-10)

    def test_semilog_recovers_exact_exponential(self):
        t = np.linspace(0.0, 5.0, 11)
        fit = RateFit.semilog(t, 2.0 * np.exp(-0.7 * t))
        assert fit.slope == pytest.approx(-0.7, abs=1e-12)
        assert fit.intercept == pytest.approx(math.log(2.0), abs=1e-12)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-12)

    def test_noisy_data_widens_slope_interval(self):
        rng = np.random.default_rng(3)
        t = np.linspace(0.0, 5.0, 20)
        y = np.exp(-t) * np.exp(0.05 * rng.standard_normal(20))
        fit = RateFit.semilog(t, y)
        assert fit.slope_half_width > 0.0
        assert abs(fit.slope + 1.0) < 3.0 * fit.slope_half_width
        assert fit.r_squared < 1.0

    def test_requires_three_points(self):
        with pytest.raises(ValueError, match="at least 3"):
            RateFit.loglog([1.0, 2.0], [1.0, 2.0])

    def test_to_dict_carries_points_and_fit(self):
        x = np.array([1.0, 2.0, 4.0])
        fit = RateFit.loglog(x, x**2, half_widths=np.full(3, 0.1))
        d = fit.to_dict()
        assert d["slope"] == pytest.approx(2.0, abs=1e-12)
        assert d["points"]["x"] == x.tolist()
        assert d["points"]["half_width"] == [0.1, 0.1, 0.1]
        assert set(d) == {"slope", "intercept", "r_squared", "slope_half_width", "points"}


class TestFitDecayRate:
    def test_recovers_exact_rate_inside_window(self):
        t = np.linspace(0.0, 10.0, 51)
        v = np.exp(-3.0 * t)
        rate, fit = fit_decay_rate(t, v, 1.0, 8.0)
        assert rate == pytest.approx(3.0, abs=1e-9)
        assert fit.r_squared == pytest.approx(1.0, abs=1e-10)

    def test_points_outside_window_are_ignored(self):
        t = np.linspace(0.0, 10.0, 51)
        v = np.exp(-3.0 * t)
        v[t > 9.0] = 17.0  # garbage beyond the fit window
        v[0] = 1e6
        rate, _ = fit_decay_rate(t, v, 1.0, 8.0)
        assert rate == pytest.approx(3.0, abs=1e-9)

    def test_nonpositive_samples_are_dropped(self):
        t = np.linspace(0.0, 10.0, 51)
        v = np.exp(-3.0 * t)
        v[25] = 0.0  # a zero inside the window must not poison the log
        rate, _ = fit_decay_rate(t, v, 1.0, 8.0)
        assert rate == pytest.approx(3.0, abs=1e-9)


class TestLinearStationaryVariance:
    # Stationary covariance of d[u; m] = A [u; m] dt + [q; 0] dw for the
    # single-mode linear pair, checked against scipy's Lyapunov solver.
    CASES = [
        (1.0, 0.25, 0.5, 1.0, 1.0),
        (4.0, 0.0625, 0.5, 1.0, 0.25),
        (9.0, 0.1, 0.3, 2.0, 0.5),
        (16.0, 0.5, 0.9, 0.7, 0.0625),
        (1.0, 1.0, 0.2, 1.0, 1.0),
    ]

    @pytest.mark.parametrize("alpha,q,kappa,delta,eps", CASES)
    def test_matches_lyapunov_solver(self, alpha, q, kappa, delta, eps):
        a_mat = np.array([
            [-kappa * alpha, -(1.0 - kappa) * alpha],
            [delta / eps, -delta / eps],
        ])
        b_mat = np.diag([q**2, 0.0])
        sigma = solve_continuous_lyapunov(a_mat, -b_mat)
        got = linear_stationary_variance(alpha, q, kappa, delta, eps)
        assert got == pytest.approx(sigma[0, 0], rel=1e-12)

    def test_short_memory_limit_is_memoryless_variance(self):
        # As the memory collapses the variance tends to q^2 / (2 alpha).
        v = linear_stationary_variance(4.0, 0.25, 0.5, 1.0, 1e-8)
        assert v == pytest.approx(0.25**2 / (2 * 4.0), rel=1e-6)

    def test_full_instantaneous_weight_ignores_memory(self):
        # kappa = 1 removes the memory feedback entirely.
        for eps in (1.0, 0.1, 0.01):
            v = linear_stationary_variance(4.0, 0.25, 1.0, 1.0, eps)
            assert v == pytest.approx(0.25**2 / (2 * 4.0), rel=1e-13)


class TestSpecHelpers:
    def test_spec_for_epsilon_identity_at_one(self):
        spec = _spec()
        assert spec_for_epsilon(spec, 1.0) is spec

    def test_spec_for_epsilon_rescales_kernel(self):
        spec = _spec()
        scaled = spec_for_epsilon(spec, 0.25)
        assert scaled.kernel.epsilon == 0.25
        # mu_eps(s) = eps^-2 mu(s / eps) for the unit exponential kernel
        assert scaled.kernel.mu(0.0) == pytest.approx(16.0, rel=1e-12)
        assert scaled.kernel.mu(0.5) == pytest.approx(16.0 * math.exp(-2.0), rel=1e-12)
        # base system untouched
        assert spec.kernel.epsilon == 1.0

    def test_spec_for_epsilon_rejects_rescaled_base(self):
        with pytest.raises(ValueError, match="epsilon=1"):
            spec_for_epsilon(_spec(epsilon=0.5), 0.25)

    def test_memoryless_twin_drops_only_the_backend(self):
        spec = _spec()
        twin = memoryless_twin(spec)
        assert twin.memory_backend is None
        assert twin.domain is spec.domain
        assert twin.noise is spec.noise
        assert twin.potential is spec.potential
        assert spec.memory_backend is not None


class TestSmallHelpers:
    def test_mc_mean_hw_known_values(self):
        mean, hw = mc_mean_hw(np.array([1.0, 2.0, 3.0, 4.0]))
        assert mean == pytest.approx(2.5)
        assert hw == pytest.approx(1.96 * math.sqrt(5.0 / 3.0) / 2.0, rel=1e-12)

    def test_mc_mean_hw_axis(self):
        samples = np.arange(15.0).reshape(3, 5)
        mean, hw = mc_mean_hw(samples, axis=0)
        np.testing.assert_allclose(mean, samples.mean(axis=0))
        np.testing.assert_allclose(hw, 1.96 * samples.std(axis=0, ddof=1) / math.sqrt(3))

    def test_salted_streams_are_deterministic_and_distinct(self):
        assert _salted(7, 3) == _salted(7, 3)
        salts = {_salted(12345, i) for i in range(1000)}
        assert len(salts) == 1000
        assert all(0 <= s < 2**63 for s in salts)
        assert _salted(1, 5) != _salted(2, 5)

    def test_default_u0_profiles(self):
        k = np.arange(1, DOM.n_modes + 1, dtype=float)
        np.testing.assert_allclose(_default_u0(DOM), 1.0 / k**2)
        np.testing.assert_allclose(_default_u0(DOM, "k1", scale=2.0), 2.0 / k)
        with pytest.raises(ValueError):
            _default_u0(DOM, "flat")

    def test_solver_cadence_rounds_to_steps(self):
        solver = SolverConfig(dt=2e-3, seed=0)
        assert _solver_with_cadence(solver, 0.2).record_every == 100
        assert _solver_with_cadence(solver, 1e-5).record_every == 1
        assert _solver_with_cadence(solver, 0.2).dt == solver.dt


class TestContractionPairs:
    def test_pair_structure_splits_forced_and_unforced_modes(self):
        spec = _spec()
        u0_a, u0_b = _contraction_pairs(spec, seed=123)
        n_bar = spec.noise.n_bar
        assert u0_a.shape == u0_b.shape == (10, DOM.n_modes)
        np.testing.assert_array_equal(u0_a, np.tile(_default_u0(DOM), (10, 1)))
        sep = u0_b - u0_a
        for j in range(10):
            support = np.flatnonzero(sep[j])
            if j < 5:
                assert set(support) == set(range(n_bar))
            else:
                assert set(support) == {n_bar}
            amp = np.abs(sep[j][support])
            assert np.all((0.5 <= amp) & (amp <= 2.0))

    def test_pairs_deterministic_in_seed(self):
        spec = _spec()
        a1, b1 = _contraction_pairs(spec, seed=9)
        a2, b2 = _contraction_pairs(spec, seed=9)
        np.testing.assert_array_equal(b1, b2)
        _, b3 = _contraction_pairs(spec, seed=10)
        assert not np.array_equal(b1, b3)


class TestNoiseContractProbe:
    def test_memory_and_memoryless_twins_share_draws(self):
        spec = _spec()
        solver = SolverConfig(dt=2e-3, seed=5)
        assert noise_contract_probe(spec, memoryless_twin(spec), solver, seed=77)

    def test_different_mode_counts_break_the_contract(self):
        spec = _spec()
        small_dom = Domain(length=np.pi, n_modes=4, n_quad=16)
        other = SystemSpec(
            domain=small_dom, kappa=0.5, kernel=None,
            potential=CUBIC, noise=Noise.power_law(4, q0=0.25, decay=2.0, n_bar=2),
            memory_backend=None,
        )
        solver = SolverConfig(dt=2e-3, seed=5)
        assert not noise_contract_probe(spec, other, solver, seed=77)


class TestExperimentConfigGuards:
    def test_small_ensembles_rejected(self):
        with pytest.raises(ValueError, match="at least 16"):
            ExperimentConfig("sweep", _spec(), SolverConfig(dt=2e-3), n_traj=8)

    def test_epsilon_outside_unit_interval_rejected(self):
        with pytest.raises(ValueError, match="outside"):
            ExperimentConfig("sweep", _spec(), SolverConfig(dt=2e-3), epsilons=(1.0, 0.0))
        with pytest.raises(ValueError, match="outside"):
            ExperimentConfig("sweep", _spec(), SolverConfig(dt=2e-3), epsilons=(1.5,))

    def test_defaults(self):
        cfg = ExperimentConfig("sweep", _spec(), SolverConfig(dt=2e-3))
        assert cfg.epsilons == (1.0, 0.25, 0.0625)
        assert cfg.n_traj == 256
