"""Batched Monte-Carlo engine.

Runs M trajectories at once as (M, n_modes) arrays so the per-step transforms
become two dgemm calls, delegating the step loop to the chunk kernels in
:mod:`volterra_spde._kernels`.  Only the exp_reduction and memoryless backends
are supported here; the grid backend stays on the single-trajectory path in
:mod:`volterra_spde.dynamics` (it is a validation tool, not a production one).

Reproducibility contract: trajectory i draws from its own counter-based
stream Philox(key=[master_seed, i]); chunking does not change the stream, so
results are independent of chunk size and of the worker count (workers only
shard the trajectory axis).  The per-trajectory noise bytes are optionally
hashed; equal digests certify that two runs consumed the identical Brownian
increments (the synchronous-coupling contract).
"""

from __future__ import annotations

import hashlib
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import _kernels as _k
from .dynamics import EXP_REDUCTION, SolverConfig, SystemSpec
from .memory import HistoryGrid, ShadowUpdate

_EMPTY_I = np.zeros(0, dtype=np.int64)
_EMPTY_F = np.zeros(0)

#: Rows of the running-integral array, in order: time integrals of
#: ||A^{1/2} u||^2, ||A u||^2, ||eta||^2_{M0}, ||eta||^2_{M1} (left Riemann).
INTEGRAL_ROWS = ("int_h1", "int_h2", "int_m0", "int_m1")


@dataclass
class BatchState:
    """Mutable ensemble state: one row per trajectory."""

    u: np.ndarray
    memory: np.ndarray | None = None
    shadow: np.ndarray | None = None
    shadow_grid: HistoryGrid | None = None


@dataclass
class EnsembleResult:
    times: np.ndarray
    series: dict[str, np.ndarray]
    integrals: np.ndarray | None
    final: BatchState
    noise_digest: str | None


@dataclass
class PairResult:
    times: np.ndarray
    series: dict[str, np.ndarray]
    beta_integral: np.ndarray | None
    final_a: BatchState
    final_b: BatchState
    noise_digest: str | None


def _broadcast(arr, shape, name):
    out = np.zeros(shape)
    if arr is not None:
        arr = np.asarray(arr, dtype=float)
        if arr.shape == shape[1:]:
            out[:] = arr
        elif arr.shape == shape:
            out[:] = arr
        else:
            raise ValueError(f"{name} has shape {arr.shape}, expected {shape[1:]} or {shape}")
    return out


def make_batch(
    spec: SystemSpec,
    n_traj: int,
    u0=None,
    m0=None,
    shadow0=None,
    shadow_grid: HistoryGrid | None = None,
) -> BatchState:
    """Allocate an ensemble state, broadcasting shared initial data.

    ``u0``/``m0`` accept (n,) or (M, n); ``shadow0`` accepts (n, n_s) or
    (M, n, n_s).  Under exp_reduction, if ``m0`` is omitted but a shadow is
    given, the kernel average is initialized consistently by quadrature.
    """
    n = spec.domain.n_modes
    u = _broadcast(u0, (n_traj, n), "u0")
    memory = None
    if spec.memory_backend == EXP_REDUCTION:
        memory = _broadcast(m0, (n_traj, n), "m0")
    elif spec.memory_backend is not None:
        raise ValueError("the batched engine supports exp_reduction and memoryless only")
    shadow = None
    if shadow_grid is not None:
        shadow = _broadcast(shadow0, (n_traj, n, shadow_grid.s_nodes.size), "shadow0")
        if memory is not None and m0 is None and shadow0 is not None:
            memory[:] = shadow @ shadow_grid.weights
    return BatchState(u=u, memory=memory, shadow=shadow, shadow_grid=shadow_grid)


class _Advancer:
    """Precomputed kernel arguments for one system under one solver config."""

    def __init__(self, spec: SystemSpec, config: SolverConfig, shadow_grid: HistoryGrid | None):
        d = spec.domain
        dt = config.dt
        self.spec = spec
        self.dt = dt
        self.synth = np.ascontiguousarray(d.synthesis_matrix)
        self.anal = np.ascontiguousarray(d.analysis_matrix)
        self.pcoef = np.asarray(spec.potential.coeffs, dtype=float)
        self.alpha = np.ascontiguousarray(d.eigenvalues)
        if spec.is_memoryless:
            self.inv_impl = 1.0 / (1.0 + dt * self.alpha)
            self.mem_coef = _EMPTY_F
            self.decay = 0.0
        else:
            self.inv_impl = 1.0 / (1.0 + dt * spec.kappa * self.alpha)
            self.mem_coef = (1.0 - spec.kappa) * self.alpha
            self.decay = math.exp(-spec.kernel.delta * dt / spec.kernel.epsilon)
        if shadow_grid is not None:
            upd = ShadowUpdate.build(shadow_grid, dt)
            self.sh_ilo = upd.idx_lo
            self.sh_ihi = upd.idx_hi
            self.sh_wlo = upd.w_lo
            self.sh_whi = upd.w_hi
            self.sh_cu = upd.u_coef
            self.w_nodes = np.ascontiguousarray(shadow_grid.weights)
        else:
            self.sh_ilo = self.sh_ihi = _EMPTY_I
            self.sh_wlo = self.sh_whi = self.sh_cu = self.w_nodes = _EMPTY_F

    def noise_scale(self) -> np.ndarray:
        return self.spec.noise.q * math.sqrt(self.dt)

    def chunk(self, batch: BatchState, block: np.ndarray, acc: np.ndarray) -> None:
        shadow = batch.shadow if batch.shadow is not None else _k.NO_SHADOW
        if self.spec.is_memoryless:
            _k.chunk_memoryless(
                batch.u, shadow, block, self.synth, self.anal, self.pcoef,
                self.inv_impl, self.dt, self.sh_ilo, self.sh_ihi, self.sh_wlo,
                self.sh_whi, self.sh_cu, self.alpha, self.w_nodes, acc,
            )
        else:
            _k.chunk_memory(
                batch.u, batch.memory, shadow, block, self.synth, self.anal,
                self.pcoef, self.inv_impl, self.mem_coef, self.decay, self.dt,
                self.sh_ilo, self.sh_ihi, self.sh_wlo, self.sh_whi, self.sh_cu,
                self.alpha, self.w_nodes, acc,
            )


def _chunk_sizes(n_steps: int, record_every: int) -> list[int]:
    sizes = [record_every] * (n_steps // record_every)
    if n_steps % record_every:
        sizes.append(n_steps % record_every)
    return sizes


def _shards(n_traj: int, workers: int) -> list[slice]:
    workers = max(1, min(workers, n_traj))
    bounds = np.linspace(0, n_traj, workers + 1).astype(int)
    return [slice(int(a), int(b)) for a, b in zip(bounds[:-1], bounds[1:]) if b > a]


def _slice_batch(batch: BatchState, sl: slice) -> BatchState:
    return BatchState(
        u=batch.u[sl],
        memory=None if batch.memory is None else batch.memory[sl],
        shadow=None if batch.shadow is None else batch.shadow[sl],
        shadow_grid=batch.shadow_grid,
    )


def _combine_digests(hashers) -> str:
    agg = hashlib.sha256()
    for h in hashers:
        agg.update(h.digest())
    return agg.hexdigest()


# ---------------------------------------------------------------------------
# vectorized observables


def _eta_norm_sq(shadow: np.ndarray, grid: HistoryGrid, alpha_pow: np.ndarray) -> np.ndarray:
    per_mode = np.einsum("mks,s->mk", shadow * shadow, grid.weights)
    return per_mode @ alpha_pow


def batch_observable(name: str, batch: BatchState, spec: SystemSpec) -> np.ndarray:
    """Evaluate one registry observable for every trajectory at once."""
    u = batch.u
    d = spec.domain
    alpha = d.eigenvalues
    if name == "u_l2":
        return np.sqrt(np.sum(u * u, axis=1))
    if name == "u_l2_sq":
        return np.sum(u * u, axis=1)
    if name == "u_h1":
        return np.sqrt((u * u) @ alpha)
    if name == "u_e1":
        return u[:, 0].copy()
    if name == "u_e1_sq":
        return u[:, 0] ** 2
    if name in ("int_u3", "int_u4"):
        v = u @ d.synthesis_matrix
        p = 3 if name == "int_u3" else 4
        return np.sum(v**p, axis=1) * d.quad_weight
    if name in ("psi0", "psi1"):
        if batch.shadow is None and spec.memory_backend == EXP_REDUCTION:
            raise ValueError(f"{name} needs a co-evolved history shadow")
        w = 1.0 if name == "psi0" else alpha
        val = 0.5 * np.sum(w * u * u, axis=1)
        if batch.shadow is not None:
            pow_ = alpha if name == "psi0" else alpha**2
            val += 0.5 * (1.0 - spec.kappa) * _eta_norm_sq(batch.shadow, batch.shadow_grid, pow_)
        return val
    raise KeyError(f"unknown observable {name!r}")


# pair-level observables: f(batch_a, batch_b, spec_a, spec_b) -> (M,)


def pair_u_diff_sq(ba, bb, spec_a, spec_b):
    du = ba.u - bb.u
    return np.sum(du * du, axis=1)


def pair_ext_diff_sq(ba, bb, spec_a, spec_b):
    """Squared extended-space distance ||u_a-u_b||^2 + ||eta_a-eta_b||^2_{M0}."""
    val = pair_u_diff_sq(ba, bb, spec_a, spec_b)
    if ba.shadow is not None and bb.shadow is not None:
        de = ba.shadow - bb.shadow
        val = val + _eta_norm_sq(de, ba.shadow_grid, spec_a.domain.eigenvalues)
    return val


def pair_psi0_diff(ba, bb, spec_a, spec_b):
    """Lyapunov energy of the difference state."""
    du = ba.u - bb.u
    val = 0.5 * np.sum(du * du, axis=1)
    if ba.shadow is not None and bb.shadow is not None:
        de = ba.shadow - bb.shadow
        val = val + 0.5 * (1.0 - spec_a.kappa) * _eta_norm_sq(
            de, ba.shadow_grid, spec_a.domain.eigenvalues
        )
    return val


def pair_psi0_a(ba, bb, spec_a, spec_b):
    return batch_observable("psi0", ba, spec_a)


def pair_psi0_b(ba, bb, spec_a, spec_b):
    return batch_observable("psi0", bb, spec_b)


def pair_beta_norm_sq(ba, bb, spec_a, spec_b):
    """Instantaneous squared Girsanov shift ||beta(t)||^2 of the nudged pair."""
    n_bar = spec_a.noise.n_bar
    gain = spec_a.nudge_rate
    beta = gain * (ba.u[:, :n_bar] - bb.u[:, :n_bar]) / spec_a.noise.q[:n_bar]
    return np.sum(beta * beta, axis=1)


PAIR_OBSERVABLES = {
    "u_diff_sq": pair_u_diff_sq,
    "ext_diff_sq": pair_ext_diff_sq,
    "psi0_diff": pair_psi0_diff,
    "psi0_a": pair_psi0_a,
    "psi0_b": pair_psi0_b,
    "beta_norm_sq": pair_beta_norm_sq,
}


def _pair_eval(name, ba, bb, spec_a, spec_b):
    """Pair observable by name; 'a:<obs>'/'b:<obs>' pick one side's registry observable."""
    if name.startswith("a:"):
        return batch_observable(name[2:], ba, spec_a)
    if name.startswith("b:"):
        return batch_observable(name[2:], bb, spec_b)
    return PAIR_OBSERVABLES[name](ba, bb, spec_a, spec_b)


# ---------------------------------------------------------------------------
# drivers


def run_ensemble(
    spec: SystemSpec,
    config: SolverConfig,
    horizon: float,
    n_traj: int,
    u0=None,
    m0=None,
    shadow0=None,
    shadow_grid: HistoryGrid | None = None,
    observables: tuple[str, ...] = (),
    with_integrals: bool = False,
    master_seed: int | None = None,
    workers: int = 1,
    digest: bool = False,
) -> EnsembleResult:
    """Advance an ensemble over [0, horizon], recording every record_every steps.

    Records land at t = 0, re*dt, 2*re*dt, ...; a trailing partial chunk (when
    horizon/dt is not a multiple of record_every) is integrated but not
    recorded.  ``with_integrals`` also snapshots the four running audit
    integrals (see INTEGRAL_ROWS) at the same instants.
    """
    seed = config.seed if master_seed is None else master_seed
    adv = _Advancer(spec, config, shadow_grid)
    batch = make_batch(spec, n_traj, u0=u0, m0=m0, shadow0=shadow0, shadow_grid=shadow_grid)

    n_steps = int(round(horizon / config.dt)) if horizon > 0 else 0
    sizes = _chunk_sizes(n_steps, config.record_every)
    n_rec = 1 + n_steps // config.record_every
    times = np.arange(n_rec) * (config.record_every * config.dt)
    series = {name: np.empty((n_rec, n_traj)) for name in observables}
    integrals = np.zeros((n_rec, 4, n_traj)) if with_integrals else None
    hashers = [hashlib.sha256() for _ in range(n_traj)] if digest else None
    scale = adv.noise_scale()
    n = spec.domain.n_modes

    for name in observables:
        series[name][0] = batch_observable(name, batch, spec)

    def work(sl: slice) -> None:
        sub = _slice_batch(batch, sl)
        m_sh = sub.u.shape[0]
        rngs = [
            np.random.Generator(np.random.Philox(key=[seed, i]))
            for i in range(sl.start, sl.stop)
        ]
        acc = np.zeros((4, m_sh)) if with_integrals else _k.NO_ACC
        ri = 0
        for size in sizes:
            block = np.empty((m_sh, size, n))
            for j, rng in enumerate(rngs):
                block[j] = rng.standard_normal((size, n))
            block *= scale
            if hashers is not None:
                for j in range(m_sh):
                    hashers[sl.start + j].update(block[j].tobytes())
            adv.chunk(sub, block, acc)
            if size == config.record_every:
                ri += 1
                for name in observables:
                    series[name][ri, sl] = batch_observable(name, sub, spec)
                if with_integrals:
                    integrals[ri, :, sl] = acc

    shards = _shards(n_traj, workers)
    if len(shards) == 1:
        work(shards[0])
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            list(pool.map(work, shards))

    return EnsembleResult(
        times=times,
        series=series,
        integrals=integrals,
        final=batch,
        noise_digest=_combine_digests(hashers) if digest else None,
    )


def run_sync_pair(
    spec_a: SystemSpec,
    spec_b: SystemSpec,
    config: SolverConfig,
    horizon: float,
    n_traj: int,
    init_a: dict | None = None,
    init_b: dict | None = None,
    observables: tuple[str, ...] = ("ext_diff_sq",),
    master_seed: int | None = None,
    workers: int = 1,
    digest: bool = False,
) -> PairResult:
    """Advance two systems trajectory-paired on the identical Brownian path.

    ``init_a``/``init_b`` are keyword dictionaries for :func:`make_batch`
    (u0, m0, shadow0, shadow_grid).  Both systems must share the noise
    operator; each chunk's increments are generated once and fed to both.
    """
    if spec_a.noise.q.shape != spec_b.noise.q.shape or not np.array_equal(
        spec_a.noise.q, spec_b.noise.q
    ):
        raise ValueError("synchronous coupling needs identical noise operators")
    seed = config.seed if master_seed is None else master_seed
    adv_a = _Advancer(spec_a, config, (init_a or {}).get("shadow_grid"))
    adv_b = _Advancer(spec_b, config, (init_b or {}).get("shadow_grid"))
    batch_a = make_batch(spec_a, n_traj, **(init_a or {}))
    batch_b = make_batch(spec_b, n_traj, **(init_b or {}))

    n_steps = int(round(horizon / config.dt)) if horizon > 0 else 0
    sizes = _chunk_sizes(n_steps, config.record_every)
    n_rec = 1 + n_steps // config.record_every
    times = np.arange(n_rec) * (config.record_every * config.dt)
    series = {name: np.empty((n_rec, n_traj)) for name in observables}
    hashers = [hashlib.sha256() for _ in range(n_traj)] if digest else None
    scale = adv_a.noise_scale()
    n = spec_a.domain.n_modes

    for name in observables:
        series[name][0] = _pair_eval(name, batch_a, batch_b, spec_a, spec_b)

    def work(sl: slice) -> None:
        sub_a = _slice_batch(batch_a, sl)
        sub_b = _slice_batch(batch_b, sl)
        m_sh = sub_a.u.shape[0]
        rngs = [
            np.random.Generator(np.random.Philox(key=[seed, i]))
            for i in range(sl.start, sl.stop)
        ]
        ri = 0
        for size in sizes:
            block = np.empty((m_sh, size, n))
            for j, rng in enumerate(rngs):
                block[j] = rng.standard_normal((size, n))
            block *= scale
            if hashers is not None:
                for j in range(m_sh):
                    hashers[sl.start + j].update(block[j].tobytes())
            adv_a.chunk(sub_a, block, _k.NO_ACC)
            adv_b.chunk(sub_b, block, _k.NO_ACC)
            if size == config.record_every:
                ri += 1
                for name in observables:
                    series[name][ri, sl] = _pair_eval(name, sub_a, sub_b, spec_a, spec_b)

    shards = _shards(n_traj, workers)
    if len(shards) == 1:
        work(shards[0])
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            list(pool.map(work, shards))

    return PairResult(
        times=times,
        series=series,
        beta_integral=None,
        final_a=batch_a,
        final_b=batch_b,
        noise_digest=_combine_digests(hashers) if digest else None,
    )


def run_nudged_pair(
    spec: SystemSpec,
    config: SolverConfig,
    horizon: float,
    n_traj: int,
    init_a: dict | None = None,
    init_b: dict | None = None,
    observables: tuple[str, ...] = ("psi0_diff", "beta_norm_sq"),
    master_seed: int | None = None,
    workers: int = 1,
    digest: bool = False,
) -> PairResult:
    """Advance the generalized (nudged) coupling pair on shared noise.

    The second member's drift gains kappa*alpha_nbar*P_nbar(u - u_tilde);
    the running integral of the squared Girsanov shift ||beta||^2 is
    accumulated per trajectory and snapshotted at record times.
    """
    spec.require_coupling_ready()
    if spec.memory_backend != EXP_REDUCTION:
        raise ValueError("the batched nudged pair runs on the exp_reduction backend")
    seed = config.seed if master_seed is None else master_seed
    shadow_grid = (init_a or {}).get("shadow_grid")
    if ((init_b or {}).get("shadow_grid")) is not shadow_grid:
        raise ValueError("both pair members must share one shadow grid")
    adv = _Advancer(spec, config, shadow_grid)
    batch_a = make_batch(spec, n_traj, **(init_a or {}))
    batch_b = make_batch(spec, n_traj, **(init_b or {}))

    n_bar = spec.noise.n_bar
    n = spec.domain.n_modes
    nudge = np.zeros(n)
    nudge[:n_bar] = spec.nudge_rate
    beta_coef = np.zeros(n)
    beta_coef[:n_bar] = spec.nudge_rate / spec.noise.q[:n_bar]

    n_steps = int(round(horizon / config.dt)) if horizon > 0 else 0
    sizes = _chunk_sizes(n_steps, config.record_every)
    n_rec = 1 + n_steps // config.record_every
    times = np.arange(n_rec) * (config.record_every * config.dt)
    series = {name: np.empty((n_rec, n_traj)) for name in observables}
    beta_integral = np.zeros((n_rec, n_traj))
    hashers = [hashlib.sha256() for _ in range(n_traj)] if digest else None
    scale = adv.noise_scale()

    for name in observables:
        series[name][0] = _pair_eval(name, batch_a, batch_b, spec, spec)

    def work(sl: slice) -> None:
        sub_a = _slice_batch(batch_a, sl)
        sub_b = _slice_batch(batch_b, sl)
        m_sh = sub_a.u.shape[0]
        rngs = [
            np.random.Generator(np.random.Philox(key=[seed, i]))
            for i in range(sl.start, sl.stop)
        ]
        beta_acc = np.zeros(m_sh)
        sha = sub_a.shadow if sub_a.shadow is not None else _k.NO_SHADOW
        shb = sub_b.shadow if sub_b.shadow is not None else _k.NO_SHADOW
        ri = 0
        for size in sizes:
            block = np.empty((m_sh, size, n))
            for j, rng in enumerate(rngs):
                block[j] = rng.standard_normal((size, n))
            block *= scale
            if hashers is not None:
                for j in range(m_sh):
                    hashers[sl.start + j].update(block[j].tobytes())
            _k.chunk_nudged_pair(
                sub_a.u, sub_a.memory, sha, sub_b.u, sub_b.memory, shb, block,
                adv.synth, adv.anal, adv.pcoef, adv.inv_impl, adv.mem_coef,
                adv.decay, adv.dt, adv.sh_ilo, adv.sh_ihi, adv.sh_wlo,
                adv.sh_whi, adv.sh_cu, nudge, beta_coef, beta_acc,
            )
            if size == config.record_every:
                ri += 1
                for name in observables:
                    series[name][ri, sl] = _pair_eval(name, sub_a, sub_b, spec, spec)
                beta_integral[ri, sl] = beta_acc

    shards = _shards(n_traj, workers)
    if len(shards) == 1:
        work(shards[0])
    else:
        with ThreadPoolExecutor(max_workers=len(shards)) as pool:
            list(pool.map(work, shards))

    return PairResult(
        times=times,
        series=series,
        beta_integral=beta_integral,
        final_a=batch_a,
        final_b=batch_b,
        noise_digest=_combine_digests(hashers) if digest else None,
    )
