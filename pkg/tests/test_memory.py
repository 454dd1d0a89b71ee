"""Memory kernel, history grid, transport/reduction backends."""

import math

import numpy as np
import pytest

from volterra_spde.memory import (
    CFLError,
    HistoryGrid,
    Kernel,
    check_admissible,
    exp_reduction_step,
    history_representation,
    init_history_from_past,
    memory_drift,
    read_kernel_table,
    rescale_kernel,
    ShadowUpdate,
    shadow_step,
    tail_functional,
    transport_step,
    weighted_norm,
)
from volterra_spde.spectral import Domain


@pytest.fixture(scope="module")
def domain():
    return Domain(length=np.pi, n_modes=4, n_quad=8)


class TestKernel:
    def test_exponential_density(self):
        k = Kernel.exponential(1.0)
        s = np.linspace(0.0, 5.0, 11)
        assert np.allclose(k.mu(s), np.exp(-s))
        assert k.mass() == pytest.approx(1.0)

    def test_delta_two_closed_forms(self):
        # mu(s) = 4 e^{-2s}: mass 2, first moment 1
        k = Kernel.exponential(2.0)
        assert k.mu(0.0) == pytest.approx(4.0)
        assert k.mass() == pytest.approx(2.0)
        cert = check_admissible(k)
        assert cert.ok
        assert cert.first_moment == pytest.approx(1.0)

    def test_admissible_moments_default(self):
        cert = check_admissible(Kernel.exponential(1.0))
        assert cert.ok
        assert cert.mass == pytest.approx(1.0)
        assert cert.first_moment == pytest.approx(1.0)
        assert cert.second_moment == pytest.approx(2.0)
        # int s^3 mu_eps(s)^2 ds = 3/8 independent of delta and eps
        assert cert.third_moment_mu_sq == pytest.approx(0.375)

    @pytest.mark.parametrize("eps", [1.0, 0.5, 0.25, 0.125])
    def test_rescaling_law(self, eps):
        base = Kernel.exponential(1.0)
        k = rescale_kernel(base, eps)
        s = np.linspace(0.01, 3.0, 40)
        assert np.allclose(k.mu(s), base.mu(s / eps) / eps**2)
        assert k.mass() == pytest.approx(1.0 / eps)
        cert = check_admissible(k)
        assert cert.first_moment == pytest.approx(1.0)
        assert cert.second_moment == pytest.approx(2.0 * eps)
        assert cert.third_moment_mu_sq == pytest.approx(0.375)

    def test_rescale_requires_unit_base(self):
        k = rescale_kernel(Kernel.exponential(1.0), 0.5)
        with pytest.raises(ValueError):
            rescale_kernel(k, 0.5)
        with pytest.raises(ValueError):
            rescale_kernel(Kernel.exponential(1.0), 1.5)

    def test_cell_mass_exact(self):
        k = rescale_kernel(Kernel.exponential(1.0), 0.5)
        # integral of 4 e^{-2s} over [a, b] = 2(e^{-2a} - e^{-2b})
        got = k.cell_mass(0.25, 1.5)
        want = 2.0 * (math.exp(-0.5) - math.exp(-3.0))
        assert got == pytest.approx(want, rel=1e-12)

    def test_tail_mass(self):
        k = Kernel.exponential(2.0)
        assert k.tail_mass(1.0) == pytest.approx(2.0 * math.exp(-2.0), rel=1e-12)
        assert k.tail_mass(0.0) == pytest.approx(k.mass(), rel=1e-12)

    def test_tabulated_renormalizes_first_moment(self):
        s = np.linspace(1e-4, 30.0, 2001)
        k = Kernel.tabulated(s, 7.0 * np.exp(-s), delta=1.0)
        cert = check_admissible(k)
        assert cert.ok
        assert cert.first_moment == pytest.approx(1.0, abs=1e-6)

    def test_monotonicity_violation_rejected(self):
        s = np.linspace(0.1, 5.0, 100)
        vals = np.exp(-s).copy()
        vals[40] *= 1.5  # local bump: mu' + delta mu > 0 just before it
        k = Kernel(delta=1.0, epsilon=1.0, table=(s, vals), normalization=1.0)
        cert = check_admissible(k)
        assert not cert.ok
        assert "(M1)" in cert.message

    def test_wrong_first_moment_rejected(self):
        s = np.linspace(1e-4, 40.0, 4001)
        # raw table with first moment 2: violates the normalization
        k = Kernel(delta=1.0, epsilon=1.0, table=(s, 2.0 * np.exp(-s)),
                   normalization=1.0)
        cert = check_admissible(k)
        assert not cert.ok
        assert "(M2)" in cert.message


class TestHistoryGrid:
    def test_weights_reproduce_total_mass(self):
        for eps in (1.0, 0.25):
            k = rescale_kernel(Kernel.exponential(1.0), eps) if eps != 1.0 \
                else Kernel.exponential(1.0)
            g = HistoryGrid.geometric(k, n_nodes=96)
            assert np.sum(g.weights) == pytest.approx(k.mass(), rel=1e-6)

    def test_nodes_increasing_and_spacings(self):
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=32)
        assert np.all(np.diff(g.s_nodes) > 0)
        assert g.spacings.shape == (32,)
        assert g.spacings[0] == pytest.approx(g.s_nodes[0])
        assert np.allclose(g.spacings[1:], np.diff(g.s_nodes))
        assert g.admissible_dt == pytest.approx(np.min(g.spacings))

    def test_quadrature_integrates_kernel_moments(self):
        k = Kernel.exponential(1.0)
        g = HistoryGrid.geometric(k, n_nodes=192)
        # int mu(s) s ds = 1 via cell-mass quadrature at nodes
        assert np.sum(g.weights * g.s_nodes) == pytest.approx(1.0, rel=1e-3)
        assert np.sum(g.weights * g.s_nodes**2) == pytest.approx(2.0, rel=1e-2)

    def test_refined_halves_spacings(self):
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=64)
        f = g.refined(2)
        assert f.n_nodes == 2 * g.n_nodes - 1
        assert np.sum(f.weights) == pytest.approx(np.sum(g.weights), rel=1e-4)


class TestWeightedNorm:
    def test_single_cell_value(self, domain):
        k = Kernel.exponential(1.0)
        g = HistoryGrid.geometric(k, n_nodes=16)
        eta = np.zeros((4, 16))
        eta[1, 5] = 3.0  # mode k=2 (alpha=4), node 5
        w = g.weights[5]
        assert weighted_norm(eta, 0, g, domain) == pytest.approx(
            math.sqrt(w * 4.0 * 9.0))
        assert weighted_norm(eta, 1, g, domain) == pytest.approx(
            math.sqrt(w * 16.0 * 9.0))

    def test_constant_past_norm_closed_form(self, domain):
        # eta(s) = s * v on mode 1: ||eta||^2_{M0} = alpha_1 v^2 int s^2 mu ds
        k = Kernel.exponential(1.0)
        g = HistoryGrid.geometric(k, n_nodes=256)
        eta = np.zeros((4, g.n_nodes))
        eta[0] = 2.0 * g.s_nodes
        assert weighted_norm(eta, 0, g, domain) ** 2 == pytest.approx(
            4.0 * 2.0, rel=1e-2)

    def test_beta_must_be_zero_or_one(self, domain):
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=8)
        with pytest.raises(ValueError):
            weighted_norm(np.zeros((4, 8)), 2, g, domain)


class TestTransport:
    def test_cfl_guard(self):
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=32)
        eta = np.zeros((4, 32))
        with pytest.raises(CFLError):
            transport_step(eta, np.zeros(4), 10.0 * g.admissible_dt, g)

    def test_constant_history_is_steady_under_constant_drive(self):
        # eta(s) = c*s solves the transport equation with u = c
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=64)
        dt = 0.5 * g.admissible_dt
        eta = np.tile(g.s_nodes, (2, 1)) * np.array([[1.5], [-0.7]])
        u = np.array([1.5, -0.7])
        out = transport_step(eta.copy(), u, dt, g)
        # linear-in-s profiles are exact for upwind differencing
        assert np.allclose(out, eta, atol=1e-12)

    def test_history_representation_constant_past(self, domain):
        k = Kernel.exponential(1.0)
        g = HistoryGrid.geometric(k, n_nodes=48)
        dt = 1e-3
        n = 200
        c = np.array([2.0, -1.0, 0.5, 0.0])
        u_path = np.tile(c, (n + 1, 1))
        eta0 = init_history_from_past(lambda r: c, g, 4)
        eta = history_representation(u_path, dt, n * dt, g, eta0=eta0)
        # constant for all time: eta(t, s) = c*s exactly
        want = c[:, None] * g.s_nodes[None, :]
        assert np.allclose(eta, want, atol=1e-10)

    def test_history_representation_sinusoid(self, domain):
        # u(t) = cos(omega t): eta(t,s) = [sin(omega t) - sin(omega(t-s))]/omega
        k = Kernel.exponential(1.0)
        g = HistoryGrid.geometric(k, n_nodes=48, s_max_factor=2.0)
        omega = 1.3
        dt = 5e-4
        n = 4000  # path covers [0, 2] > s_max
        t = n * dt
        u_path = np.cos(omega * dt * np.arange(n + 1))[:, None] * np.ones(2)
        eta = history_representation(u_path, dt, t, g)
        want = (np.sin(omega * t) - np.sin(omega * (t - g.s_nodes))) / omega
        assert np.allclose(eta[0], want, atol=5e-6)

    def test_init_history_from_past_linear(self):
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=32)
        # past u(t-r) = r  =>  eta(s) = int_0^s r dr = s^2/2
        eta = init_history_from_past(lambda r: np.array([r]), g, 1)
        assert np.allclose(eta[0], g.s_nodes**2 / 2.0, rtol=1e-3, atol=1e-8)


class TestExpReduction:
    def test_exact_decay_formula(self):
        k = rescale_kernel(Kernel.exponential(2.0), 0.5)
        m = np.array([1.0, -2.0])
        u = np.array([3.0, 3.0])
        dt = 0.1
        out = exp_reduction_step(m.copy(), u, dt, k)
        decay = math.exp(-2.0 * dt / 0.5)
        assert np.allclose(out, decay * m + (1 - decay) * u, atol=1e-14)

    def test_fixed_point_is_u(self):
        k = Kernel.exponential(1.0)
        u = np.array([0.3])
        m = u.copy()
        for _ in range(5):
            m = exp_reduction_step(m, u, 0.05, k)
        assert np.allclose(m, u, atol=1e-14)

    def test_kernel_average_matches_grid_quadrature(self, domain):
        # m = int mu eta ds for the constant-past history
        k = Kernel.exponential(1.0)
        g = HistoryGrid.geometric(k, n_nodes=256)
        c = np.array([1.0, 0.5, -2.0, 0.25])
        eta = c[:, None] * g.s_nodes[None, :]
        m_quad = eta @ g.weights
        # analytic: int mu(s) * c s ds = c * first moment = c
        assert np.allclose(m_quad, c, rtol=1e-3)


class TestMemoryDrift:
    def test_exp_state_drift(self, domain):
        m = np.array([1.0, 2.0, 0.0, -1.0])
        drift = memory_drift(m, None, domain)
        assert np.allclose(drift, domain.eigenvalues * m)

    def test_grid_state_drift(self, domain):
        k = Kernel.exponential(1.0)
        g = HistoryGrid.geometric(k, n_nodes=256)
        c = np.array([1.0, -0.5, 2.0, 0.0])
        eta = c[:, None] * g.s_nodes[None, :]
        drift = memory_drift(eta, g, domain)
        # int mu alpha eta ds = alpha * c for the constant past
        assert np.allclose(drift, domain.eigenvalues * c, rtol=2e-3)


class TestShadow:
    def test_update_matches_transport_for_linear_profile(self):
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=48)
        dt = 0.5 * g.admissible_dt
        upd = ShadowUpdate.build(g, dt)
        eta = 1.7 * np.tile(g.s_nodes, (3, 1))
        u = np.full(3, 1.7)
        out = shadow_step(eta.copy(), u, upd)
        # the semi-Lagrangian interpolation is exact on linear profiles
        assert np.allclose(out, eta, atol=1e-12)

    def test_shift_consistency_small_dt(self):
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=96)
        dt = 0.3 * g.admissible_dt
        upd = ShadowUpdate.build(g, dt)
        eta = np.sin(g.s_nodes)[None, :].copy()
        out = shadow_step(eta.copy(), np.zeros(1), upd)
        want = np.interp(g.s_nodes - dt, np.concatenate(([0.0], g.s_nodes)),
                         np.concatenate(([0.0], np.sin(g.s_nodes))))
        assert np.allclose(out[0], want, atol=1e-12)


class TestTailFunctional:
    def test_tail_outside_unit_window_is_zero_for_compact_eta(self, domain):
        k = Kernel.exponential(1.0)
        g = HistoryGrid.geometric(k, n_nodes=64)
        inside = (g.s_nodes > 0.5) & (g.s_nodes < 2.0)
        eta = np.zeros((4, 64))
        eta[0, inside] = 1.0
        assert tail_functional(eta, 2.0, g, domain) == pytest.approx(0.0)
        assert tail_functional(eta, 1.2, g, domain) > 0.0

    def test_r_one_covers_everything(self, domain):
        # the empty window (1, 1) leaves the full kernel-weighted H^1 mass,
        # which for eta = 1 is sum(alpha) * mass = 30 * 1
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=32)
        eta = np.ones((4, 32))
        full = weighted_norm(eta, 0, g, domain) ** 2
        got = tail_functional(eta, 1.0, g, domain)
        assert got == pytest.approx(full, rel=1e-9)
        assert got == pytest.approx(30.0 * np.sum(g.weights), rel=1e-9)

    def test_requires_r_at_least_one(self, domain):
        g = HistoryGrid.geometric(Kernel.exponential(1.0), n_nodes=8)
        with pytest.raises(ValueError):
            tail_functional(np.zeros((4, 8)), 0.5, g, domain)


def test_read_kernel_table_roundtrip(tmp_path):
    s = np.linspace(1e-3, 25.0, 500)
    path = tmp_path / "kernel.txt"
    lines = ["# delta = 1.0"] + [f"{a:.10g} {b:.10g}" for a, b in zip(s, np.exp(-s))]
    path.write_text("\n".join(lines) + "\n")
    k = read_kernel_table(path)
    cert = check_admissible(k)
    assert cert.ok
    assert cert.first_moment == pytest.approx(1.0, abs=1e-6)
    assert k.delta == pytest.approx(1.0)
