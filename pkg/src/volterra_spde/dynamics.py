"""Time integrators for the memory system, its memoryless limit, and coupled pairs.

Three systems share one semi-implicit Euler-Maruyama scheme:

  * memory system (u, history): the stiff linear part ``-kappa * alpha_k`` is
    treated implicitly, the memory drift and the reaction term explicitly, and
    the history variable is advanced with the pre-step u (first-order
    operator splitting);
  * memoryless limit: same scheme with the full Laplacian (coefficient 1);
  * nudged pair: the second member gets the explicit feedback
    ``kappa * alpha_nbar * P_nbar (u - u_tilde)`` pushing it toward the first.

All steppers draw exactly ``n_modes`` Gaussians per step from the supplied
generator, in mode order, so that two systems driven from identical generator
states consume the identical Brownian increments (synchronous coupling).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import lru_cache

import numpy as np

from .memory import (
    HistoryGrid,
    Kernel,
    ShadowUpdate,
    exp_reduction_step,
    memory_drift,
    shadow_step,
    transport_step,
    weighted_norm,
)
from .spectral import (
    Domain,
    Noise,
    Potential,
    apply_potential,
    integrate_physical,
    sample_noise_increment,
    sobolev_norm,
    to_physical,
)

GRID = "grid"
EXP_REDUCTION = "exp_reduction"
_BACKENDS = (GRID, EXP_REDUCTION, None)

MAX_DT = 1e-2


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping parameters.

    Attributes:
        dt: Step size; capped at 1e-2 for nonlinear accuracy (the linear part
            is unconditionally stable).
        scheme: Only "semi_implicit_em" is implemented.
        seed: Master seed for trajectory generators.
        record_every: Steps between recorded observables in :func:`simulate`.
    """

    dt: float = 2e-3
    scheme: str = "semi_implicit_em"
    seed: int = 0
    record_every: int = 50

    def __post_init__(self) -> None:
        if not 0.0 < self.dt <= MAX_DT:
            raise ValueError(f"dt must lie in (0, {MAX_DT}], got {self.dt}")
        if self.scheme != "semi_implicit_em":
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.record_every < 1:
            raise ValueError("record_every must be a positive integer")


@dataclass(frozen=True, eq=False)
class SystemSpec:
    """Full description of one stochastic system.

    ``memory_backend`` selects how the history variable is represented:
    "grid" keeps the discretized field eta(s) and transports it upwind,
    "exp_reduction" keeps only the kernel average m = int mu_eps eta ds
    (exact for the exponential family), and None is the memoryless limit
    driven by the full Laplacian.
    """

    domain: Domain
    kappa: float
    kernel: Kernel | None
    potential: Potential
    noise: Noise
    memory_backend: str | None = EXP_REDUCTION

    def __post_init__(self) -> None:
        if self.memory_backend not in _BACKENDS:
            raise ValueError(f"unknown memory backend {self.memory_backend!r}")
        if self.memory_backend is not None:
            if not 0.0 < self.kappa < 1.0:
                raise ValueError("kappa must lie strictly in (0, 1) for memory systems")
            if self.kernel is None:
                raise ValueError("memory systems need a kernel")
            if self.memory_backend == EXP_REDUCTION and not self.kernel.is_exponential:
                raise ValueError("exp_reduction backend requires an exponential kernel")
        if self.noise.q.size != self.domain.n_modes:
            raise ValueError("noise dimension does not match n_modes")

    @property
    def is_memoryless(self) -> bool:
        return self.memory_backend is None

    @property
    def nudge_rate(self) -> float:
        """Feedback gain kappa * alpha_nbar of the nudged coupling."""
        return self.kappa * self.domain.eigenvalues[self.noise.n_bar - 1]

    @property
    def contraction_rate(self) -> float:
        """Analytic pathwise contraction rate min{2(kappa alpha_nbar - a_phi), delta}."""
        self.require_coupling_ready()
        return min(2.0 * (self.nudge_rate - self.potential.a_phi), self.kernel.delta)

    def require_coupling_ready(self) -> None:
        """Check the spectral-gap condition kappa * alpha_nbar > a_phi."""
        if self.is_memoryless:
            raise ValueError("coupling experiments need a memory system")
        if self.nudge_rate <= self.potential.a_phi:
            raise ValueError(
                f"(Q3) violated: kappa*alpha_nbar = {self.nudge_rate:g} "
                f"must exceed a_phi = {self.potential.a_phi:g}"
            )


@dataclass
class ExtendedState:
    """State of one system: the field u plus whatever history it carries.

    ``memory`` is the kernel average m (shape (n_modes,)) under exp_reduction,
    the history field eta (shape (n_modes, n_s)) under the grid backend, and
    None for the memoryless system.  ``shadow`` is an optional diagnostic
    history field co-evolved outside the drift so that energy functionals are
    available under exp_reduction (and the ersatz history for the memoryless
    system); it lives on ``shadow_grid``.
    """

    u: np.ndarray
    memory: np.ndarray | None = None
    grid: HistoryGrid | None = None
    shadow: np.ndarray | None = None
    shadow_grid: HistoryGrid | None = None

    def copy(self) -> "ExtendedState":
        return ExtendedState(
            u=self.u.copy(),
            memory=None if self.memory is None else self.memory.copy(),
            grid=self.grid,
            shadow=None if self.shadow is None else self.shadow.copy(),
            shadow_grid=self.shadow_grid,
        )


def make_state(
    spec: SystemSpec,
    u0: np.ndarray | None = None,
    eta0: np.ndarray | None = None,
    shadow_grid: HistoryGrid | None = None,
) -> ExtendedState:
    """Build a consistent initial state for ``spec``.

    Args:
        u0: Initial spectral coefficients; zeros if omitted.
        eta0: Initial history.  For the grid backend this is the (n_modes, n_s)
            field on the drift grid; for exp_reduction it may be either the
            kernel average m (n_modes,) or a field on ``shadow_grid`` from
            which m is obtained by kernel-weighted quadrature.
        shadow_grid: If given (non-grid backends), a diagnostic history shadow
            is co-evolved on it, initialized from eta0 when shapes allow.
    """
    n = spec.domain.n_modes
    u = np.zeros(n) if u0 is None else np.asarray(u0, dtype=float).copy()
    if u.shape != (n,):
        raise ValueError(f"u0 must have shape ({n},)")
    memory = None
    grid = None
    shadow = None
    if spec.memory_backend == GRID:
        grid = HistoryGrid.geometric(spec.kernel)
        memory = np.zeros((n, grid.s_nodes.size))
        if eta0 is not None:
            memory[:] = eta0
    elif spec.memory_backend == EXP_REDUCTION:
        memory = np.zeros(n)
        if eta0 is not None and np.asarray(eta0).shape == (n,):
            memory[:] = eta0
        elif eta0 is not None:
            if shadow_grid is None:
                raise ValueError("field-valued eta0 under exp_reduction needs shadow_grid")
            memory[:] = np.asarray(eta0) @ shadow_grid.weights
    if shadow_grid is not None and spec.memory_backend != GRID:
        shadow = np.zeros((n, shadow_grid.s_nodes.size))
        if eta0 is not None and np.asarray(eta0).shape == shadow.shape:
            shadow[:] = eta0
    return ExtendedState(u=u, memory=memory, grid=grid, shadow=shadow, shadow_grid=shadow_grid)


def state_difference(a: ExtendedState, b: ExtendedState) -> ExtendedState:
    """Componentwise difference (same layout required); noise-free state."""
    if (a.memory is None) != (b.memory is None):
        raise ValueError("states carry different memory layouts")
    return ExtendedState(
        u=a.u - b.u,
        memory=None if a.memory is None else a.memory - b.memory,
        grid=a.grid,
        shadow=None if a.shadow is None or b.shadow is None else a.shadow - b.shadow,
        shadow_grid=a.shadow_grid,
    )


# ---------------------------------------------------------------------------
# drift and steppers


def drift_memory(state: ExtendedState, spec: SystemSpec) -> np.ndarray:
    """Per-mode drift -kappa*alpha_k*u_k - (1-kappa)*(memory drift)_k + phi_k(u)."""
    if spec.is_memoryless:
        raise ValueError("drift_memory needs a memory system")
    alpha = spec.domain.eigenvalues
    if spec.memory_backend == GRID:
        mem = memory_drift(state.memory, state.grid, spec.domain)
    else:
        mem = alpha * state.memory
    phi = apply_potential(state.u, spec.potential, spec.domain)
    return -spec.kappa * alpha * state.u - (1.0 - spec.kappa) * mem + phi


@lru_cache(maxsize=None)
def _cached_shadow_update(grid: HistoryGrid, dt: float) -> ShadowUpdate:
    return ShadowUpdate.build(grid, dt)


def _advance_shadow(state: ExtendedState, u_pre: np.ndarray, dt: float) -> np.ndarray | None:
    if state.shadow is None:
        return None
    upd = _cached_shadow_update(state.shadow_grid, dt)
    return shadow_step(state.shadow, u_pre, upd)


def step_memory(
    state: ExtendedState,
    spec: SystemSpec,
    config: SolverConfig,
    rng: np.random.Generator,
) -> ExtendedState:
    """One semi-implicit Euler-Maruyama step of the memory system."""
    dt = config.dt
    alpha = spec.domain.eigenvalues
    if spec.memory_backend == GRID:
        mem = memory_drift(state.memory, state.grid, spec.domain)
    else:
        mem = alpha * state.memory
    phi = apply_potential(state.u, spec.potential, spec.domain)
    xi = sample_noise_increment(spec.noise, dt, rng)
    u_new = (state.u + dt * (phi - (1.0 - spec.kappa) * mem) + xi) / (
        1.0 + dt * spec.kappa * alpha
    )
    if spec.memory_backend == GRID:
        mem_new = transport_step(state.memory, state.u, dt, state.grid)
    else:
        mem_new = exp_reduction_step(state.memory, state.u, dt, spec.kernel)
    shadow_new = _advance_shadow(state, state.u, dt)
    return replace(state, u=u_new, memory=mem_new, shadow=shadow_new)


def step_memoryless(
    u: np.ndarray,
    spec: SystemSpec,
    config: SolverConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """One step of the limit equation du = (Delta u + phi(u)) dt + Q dw."""
    dt = config.dt
    alpha = spec.domain.eigenvalues
    phi = apply_potential(u, spec.potential, spec.domain)
    xi = sample_noise_increment(spec.noise, dt, rng)
    return (u + dt * phi + xi) / (1.0 + dt * alpha)


def step_nudged_pair(
    pair: tuple[ExtendedState, ExtendedState],
    spec: SystemSpec,
    config: SolverConfig,
    rng: np.random.Generator,
) -> tuple[ExtendedState, ExtendedState]:
    """Advance a synchronously driven pair; the second member is nudged.

    Both states see the identical noise increment (one block drawn per step);
    the nudge kappa*alpha_nbar*P_nbar(u - u_tilde) enters the second member's
    drift explicitly, evaluated at the pre-step states.
    """
    spec.require_coupling_ready()
    a, b = pair
    dt = config.dt
    alpha = spec.domain.eigenvalues
    n_bar = spec.noise.n_bar
    if spec.memory_backend == GRID:
        mem_a = memory_drift(a.memory, a.grid, spec.domain)
        mem_b = memory_drift(b.memory, b.grid, spec.domain)
    else:
        mem_a = alpha * a.memory
        mem_b = alpha * b.memory
    phi_a = apply_potential(a.u, spec.potential, spec.domain)
    phi_b = apply_potential(b.u, spec.potential, spec.domain)
    nudge = np.zeros_like(a.u)
    nudge[:n_bar] = spec.nudge_rate * (a.u[:n_bar] - b.u[:n_bar])
    xi = sample_noise_increment(spec.noise, dt, rng)
    impl = 1.0 + dt * spec.kappa * alpha
    ua_new = (a.u + dt * (phi_a - (1.0 - spec.kappa) * mem_a) + xi) / impl
    ub_new = (b.u + dt * (phi_b - (1.0 - spec.kappa) * mem_b + nudge) + xi) / impl
    if spec.memory_backend == GRID:
        ma_new = transport_step(a.memory, a.u, dt, a.grid)
        mb_new = transport_step(b.memory, b.u, dt, b.grid)
    else:
        ma_new = exp_reduction_step(a.memory, a.u, dt, spec.kernel)
        mb_new = exp_reduction_step(b.memory, b.u, dt, spec.kernel)
    sa_new = _advance_shadow(a, a.u, dt)
    sb_new = _advance_shadow(b, b.u, dt)
    return (
        replace(a, u=ua_new, memory=ma_new, shadow=sa_new),
        replace(b, u=ub_new, memory=mb_new, shadow=sb_new),
    )


def girsanov_shift(
    u: np.ndarray,
    u_tilde: np.ndarray,
    noise: Noise,
    kappa: float,
    domain: Domain,
) -> np.ndarray:
    """Drift shift beta_k = kappa*alpha_nbar*(u_k - u_tilde_k)/q_k on modes k <= nbar."""
    n_bar = noise.n_bar
    if np.any(noise.q[:n_bar] == 0.0):
        raise ValueError("Girsanov shift undefined: zero q_k among the forced modes")
    beta = np.zeros_like(u)
    gain = kappa * domain.eigenvalues[n_bar - 1]
    beta[:n_bar] = gain * (u[:n_bar] - u_tilde[:n_bar]) / noise.q[:n_bar]
    return beta


# ---------------------------------------------------------------------------
# energy functionals


def _history_for_energy(state: ExtendedState, spec: SystemSpec) -> tuple[np.ndarray, HistoryGrid] | None:
    if spec.memory_backend == GRID:
        return state.memory, state.grid
    if state.shadow is not None:
        return state.shadow, state.shadow_grid
    if spec.memory_backend == EXP_REDUCTION:
        raise ValueError(
            "energy functionals under exp_reduction need a co-evolved history "
            "shadow (pass shadow_grid to make_state)"
        )
    return None


def energy_psi0_tilde(
    state: ExtendedState, spec: SystemSpec, kappa1: float, kappa2: float
) -> float:
    """Weighted energy (kappa1/2)||u||^2 + (kappa2/2)||eta||^2_{M0}."""
    if kappa1 <= 0.0 or kappa2 <= 0.0:
        raise ValueError("energy weights must be positive")
    val = 0.5 * kappa1 * float(np.dot(state.u, state.u))
    hist = _history_for_energy(state, spec)
    if hist is not None:
        eta, grid = hist
        val += 0.5 * kappa2 * weighted_norm(eta, 0, grid, spec.domain) ** 2
    return val


def energy_psi0(state: ExtendedState, spec: SystemSpec) -> float:
    """Lyapunov energy (1/2)||u||^2 + ((1-kappa)/2)||eta||^2_{M0}."""
    val = 0.5 * float(np.dot(state.u, state.u))
    hist = _history_for_energy(state, spec)
    if hist is not None:
        eta, grid = hist
        val += 0.5 * (1.0 - spec.kappa) * weighted_norm(eta, 0, grid, spec.domain) ** 2
    return val


def energy_psi1(state: ExtendedState, spec: SystemSpec) -> float:
    """H1 energy (1/2)||u||^2_{H1} + ((1-kappa)/2)||eta||^2_{M1}."""
    alpha = spec.domain.eigenvalues
    val = 0.5 * float(np.dot(alpha * state.u, state.u))
    hist = _history_for_energy(state, spec)
    if hist is not None:
        eta, grid = hist
        val += 0.5 * (1.0 - spec.kappa) * weighted_norm(eta, 1, grid, spec.domain) ** 2
    return val


def extended_norm_sq(state: ExtendedState, spec: SystemSpec) -> float:
    """Squared extended-space norm ||U||^2 = ||u||^2 + ||eta||^2_{M0}."""
    val = float(np.dot(state.u, state.u))
    hist = _history_for_energy(state, spec)
    if hist is not None:
        eta, grid = hist
        val += weighted_norm(eta, 0, grid, spec.domain) ** 2
    return val


# ---------------------------------------------------------------------------
# observables and trajectory simulation

OBSERVABLES = {
    "psi0": energy_psi0,
    "psi1": energy_psi1,
    "u_l2": lambda s, spec: sobolev_norm(s.u, 0, spec.domain),
    "u_h1": lambda s, spec: sobolev_norm(s.u, 1, spec.domain),
    "u_e1": lambda s, spec: float(s.u[0]),
    "u_l2_sq": lambda s, spec: float(np.dot(s.u, s.u)),
    "u_e1_sq": lambda s, spec: float(s.u[0]) ** 2,
    "int_u3": lambda s, spec: integrate_physical(
        to_physical(s.u, spec.domain) ** 3, spec.domain
    ),
    "int_u4": lambda s, spec: integrate_physical(
        to_physical(s.u, spec.domain) ** 4, spec.domain
    ),
}


@dataclass
class TrajectoryRecord:
    """Observable time series plus the final state of one trajectory."""

    times: np.ndarray
    values: dict[str, np.ndarray]
    final_state: ExtendedState


def simulate(
    spec: SystemSpec,
    state0: ExtendedState,
    horizon: float,
    config: SolverConfig,
    observables: list | None = None,
    rng: np.random.Generator | None = None,
) -> TrajectoryRecord:
    """Advance one trajectory over [0, horizon], recording observables.

    ``observables`` may mix registry names and callables ``f(state, spec)``;
    records are taken at t=0 and every ``config.record_every`` steps.
    """
    dt = config.dt
    n_steps = int(round(horizon / dt)) if horizon > 0 else 0
    if n_steps > 10**8:
        raise ValueError("horizon/dt exceeds the 1e8 step budget")
    if rng is None:
        rng = np.random.Generator(np.random.Philox(key=[config.seed, 0]))
    obs: dict[str, object] = {}
    for entry in observables or []:
        if callable(entry):
            obs[getattr(entry, "__name__", f"obs{len(obs)}")] = entry
        else:
            obs[entry] = OBSERVABLES[entry]

    state = state0.copy()
    times = [0.0]
    series: dict[str, list[float]] = {name: [] for name in obs}
    for name, fn in obs.items():
        series[name].append(float(fn(state, spec)))

    for k in range(1, n_steps + 1):
        if spec.is_memoryless:
            u_new = step_memoryless(state.u, spec, config, rng)
            shadow_new = _advance_shadow(state, state.u, dt)
            state.u = u_new
            state.shadow = shadow_new
        else:
            state = step_memory(state, spec, config, rng)
        if k % config.record_every == 0:
            times.append(k * dt)
            for name, fn in obs.items():
                series[name].append(float(fn(state, spec)))

    return TrajectoryRecord(
        times=np.asarray(times),
        values={name: np.asarray(vals) for name, vals in series.items()},
        final_state=state,
    )
