"""Batched-engine contracts: stream reproducibility, sharding, coupling.

The load-bearing guarantees are (a) trajectory i always consumes the stream
Philox(key=[master_seed, i]) regardless of chunking or worker count, (b) the
engine's trajectory 0 follows the single-trajectory integrator, and (c) the
synchronous pair drivers feed both members the identical increments, which
the noise digests certify byte-for-byte.
"""

import numpy as np
import pytest

from volterra_spde.dynamics import (
    SolverConfig,
    SystemSpec,
    make_state,
    simulate,
)
from volterra_spde.ensembles import (
    INTEGRAL_ROWS,
    batch_observable,
    make_batch,
    run_ensemble,
    run_nudged_pair,
    run_sync_pair,
)
from volterra_spde.memory import HistoryGrid, Kernel
from volterra_spde.spectral import Domain, Noise, Potential

DOM = Domain(length=np.pi, n_modes=8, n_quad=32)
NOISE = Noise.power_law(DOM.n_modes, q0=0.25, decay=2.0, n_bar=2)


def _spec(backend="exp_reduction", epsilon=0.5):
    kernel = None if backend is None else Kernel.exponential(delta=1.0, epsilon=epsilon)
    return SystemSpec(
        domain=DOM, kappa=0.5, kernel=kernel,
        potential=Potential(coeffs=(0.0, 1.0, 0.0, -1.0)),
        noise=NOISE, memory_backend=backend,
    )


CFG = SolverConfig(dt=2e-3, seed=42, record_every=25)


class TestStreams:
    def test_trajectory_zero_matches_single_integrator(self):
        spec = _spec()
        u0 = np.linspace(0.5, -0.5, DOM.n_modes)
        res = run_ensemble(spec, CFG, 0.5, 4, u0=u0, observables=("u_l2_sq",))
        rng = np.random.Generator(np.random.Philox(key=[CFG.seed, 0]))
        rec = simulate(spec, make_state(spec, u0=u0), 0.5, CFG,
                       observables=["u_l2_sq"], rng=rng)
        # same stream and same scheme; summation order differs slightly
        np.testing.assert_allclose(
            res.series["u_l2_sq"][:, 0], rec.values["u_l2_sq"], rtol=1e-10
        )
        np.testing.assert_allclose(res.final.u[0], rec.final_state.u, rtol=1e-10)

    def test_worker_count_does_not_change_results(self):
        spec = _spec()
        outs = [
            run_ensemble(spec, CFG, 0.2, 6, observables=("u_l2_sq", "u_e1"),
                         workers=w, digest=True)
            for w in (1, 3)
        ]
        for name in ("u_l2_sq", "u_e1"):
            np.testing.assert_array_equal(outs[0].series[name], outs[1].series[name])
        np.testing.assert_array_equal(outs[0].final.u, outs[1].final.u)
        assert outs[0].noise_digest == outs[1].noise_digest

    def test_digest_tracks_master_seed(self):
        spec = _spec()
        d = {
            s: run_ensemble(spec, CFG, 0.1, 3, master_seed=s, digest=True).noise_digest
            for s in (7, 8)
        }
        again = run_ensemble(spec, CFG, 0.1, 3, master_seed=7, digest=True).noise_digest
        assert d[7] == again
        assert d[7] != d[8]

    def test_chunk_size_does_not_change_stream(self):
        spec = _spec()
        coarse = run_ensemble(spec, SolverConfig(dt=2e-3, seed=1, record_every=50),
                              0.2, 3)
        fine = run_ensemble(spec, SolverConfig(dt=2e-3, seed=1, record_every=10),
                            0.2, 3)
        np.testing.assert_array_equal(coarse.final.u, fine.final.u)


class TestIntegrals:
    def test_running_integral_reconstruction(self):
        # With record_every = 1 the left-Riemann audit integrals are exactly
        # dt * cumsum of the recorded pre-step observables.
        spec = _spec()
        cfg = SolverConfig(dt=2e-3, seed=3, record_every=1)
        u0 = np.linspace(1.0, 0.2, DOM.n_modes)
        res = run_ensemble(spec, cfg, 0.05, 3, u0=u0,
                           observables=("u_h1",), with_integrals=True)
        h1_sq = res.series["u_h1"] ** 2
        want = cfg.dt * np.cumsum(h1_sq[:-1], axis=0)
        got = res.integrals[1:, INTEGRAL_ROWS.index("int_h1"), :]
        np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_integral_rows_order(self):
        assert INTEGRAL_ROWS == ("int_h1", "int_h2", "int_m0", "int_m1")

    def test_shadow_integrals_populated(self):
        spec = _spec()
        grid = HistoryGrid.geometric(spec.kernel, n_nodes=8)
        eta0 = np.ones((DOM.n_modes, grid.s_nodes.size))
        res = run_ensemble(spec, CFG, 0.1, 2, shadow0=eta0, shadow_grid=grid,
                           with_integrals=True)
        assert np.all(res.integrals[-1, 2:, :] > 0.0)


class TestMakeBatch:
    def test_broadcasting_shapes(self):
        spec = _spec()
        shared = np.arange(DOM.n_modes, dtype=float)
        per_traj = np.tile(shared, (3, 1)) * np.arange(1.0, 4.0)[:, None]
        a = make_batch(spec, 3, u0=shared)
        b = make_batch(spec, 3, u0=per_traj)
        np.testing.assert_array_equal(a.u, np.tile(shared, (3, 1)))
        np.testing.assert_array_equal(b.u, per_traj)
        with pytest.raises(ValueError, match="u0 has shape"):
            make_batch(spec, 3, u0=np.ones(5))

    def test_memory_initialized_from_shadow_quadrature(self):
        spec = _spec()
        grid = HistoryGrid.geometric(spec.kernel, n_nodes=16)
        rng = np.random.default_rng(0)
        eta0 = rng.standard_normal((DOM.n_modes, grid.s_nodes.size))
        batch = make_batch(spec, 2, shadow0=eta0, shadow_grid=grid)
        np.testing.assert_allclose(batch.memory[0], eta0 @ grid.weights, rtol=1e-13)
        np.testing.assert_allclose(batch.memory[1], eta0 @ grid.weights, rtol=1e-13)

    def test_grid_backend_rejected(self):
        spec = SystemSpec(
            domain=DOM, kappa=0.5, kernel=Kernel.exponential(),
            potential=Potential.zero(), noise=NOISE, memory_backend="grid",
        )
        with pytest.raises(ValueError, match="exp_reduction and memoryless"):
            make_batch(spec, 2)

    def test_batch_observable_needs_shadow_for_energy(self):
        spec = _spec()
        batch = make_batch(spec, 2)
        with pytest.raises(ValueError, match="shadow"):
            batch_observable("psi0", batch, spec)
        with pytest.raises(KeyError):
            batch_observable("nope", batch, spec)


class TestSyncPair:
    def test_identical_members_never_separate(self):
        spec = _spec()
        u0 = np.linspace(0.3, -0.3, DOM.n_modes)
        res = run_sync_pair(spec, spec, CFG, 0.3, 4,
                            init_a=dict(u0=u0), init_b=dict(u0=u0),
                            observables=("u_diff_sq",))
        np.testing.assert_array_equal(res.series["u_diff_sq"], 0.0)
        np.testing.assert_array_equal(res.final_a.u, res.final_b.u)

    def test_a_side_equals_solo_ensemble(self):
        # The pair driver must leave member a's trajectory untouched by the
        # presence of member b: bitwise-equal to a solo run on the same seed.
        spec = _spec()
        u0b = np.zeros(DOM.n_modes)
        u0b[0] = 2.0
        pair = run_sync_pair(spec, spec, CFG, 0.2, 3,
                             init_b=dict(u0=u0b), observables=("a:u_l2_sq",))
        solo = run_ensemble(spec, CFG, 0.2, 3, observables=("u_l2_sq",))
        np.testing.assert_array_equal(pair.series["a:u_l2_sq"], solo.series["u_l2_sq"])
        np.testing.assert_array_equal(pair.final_a.u, solo.final.u)

    def test_different_noise_operators_rejected(self):
        spec = _spec()
        other = SystemSpec(
            domain=DOM, kappa=0.5, kernel=spec.kernel, potential=spec.potential,
            noise=Noise.power_law(DOM.n_modes, q0=0.1, decay=2.0, n_bar=2),
            memory_backend="exp_reduction",
        )
        with pytest.raises(ValueError, match="identical noise"):
            run_sync_pair(spec, other, CFG, 0.1, 2)

    def test_memoryless_twin_coupling(self):
        spec = _spec()
        lim = _spec(backend=None)
        res = run_sync_pair(spec, lim, CFG, 0.2, 3,
                            observables=("u_diff_sq", "b:u_l2_sq"))
        assert np.all(np.isfinite(res.series["u_diff_sq"]))
        # same start, same noise, different generators: they do separate
        assert res.series["u_diff_sq"][-1].max() > 0.0


class TestNudgedPair:
    def test_identical_members_have_zero_shift(self):
        spec = _spec()
        u0 = np.linspace(0.4, -0.2, DOM.n_modes)
        res = run_nudged_pair(spec, CFG, 0.2, 3,
                              init_a=dict(u0=u0), init_b=dict(u0=u0))
        np.testing.assert_array_equal(res.series["beta_norm_sq"], 0.0)
        np.testing.assert_array_equal(res.beta_integral, 0.0)

    def test_initial_shift_value_for_unit_separation(self):
        spec = _spec()
        u0a = np.zeros(DOM.n_modes)
        u0a[0] = 1.0
        res = run_nudged_pair(spec, CFG, 0.0, 2, init_a=dict(u0=u0a))
        # beta_1 = kappa*alpha_2*1/q_1 = 8, so ||beta||^2 = 64
        np.testing.assert_allclose(res.series["beta_norm_sq"][0], 64.0, rtol=1e-13)

    def test_separation_contracts(self):
        spec = _spec()
        u0a = np.zeros(DOM.n_modes)
        u0a[0] = 1.0
        res = run_nudged_pair(spec, CFG, 2.0, 4, init_a=dict(u0=u0a),
                              observables=("psi0_diff", "beta_norm_sq"))
        d = res.series["psi0_diff"]
        assert np.all(d[-1] < 0.05 * d[0])
        assert np.all(np.diff(res.beta_integral, axis=0) >= 0.0)

    def test_mismatched_shadow_grids_rejected(self):
        spec = _spec()
        g1 = HistoryGrid.geometric(spec.kernel, n_nodes=8)
        g2 = HistoryGrid.geometric(spec.kernel, n_nodes=8)
        with pytest.raises(ValueError, match="share one shadow grid"):
            run_nudged_pair(spec, CFG, 0.1, 2,
                            init_a=dict(shadow_grid=g1), init_b=dict(shadow_grid=g2))

    def test_memoryless_rejected(self):
        with pytest.raises(ValueError):
            run_nudged_pair(_spec(backend=None), CFG, 0.1, 2)
