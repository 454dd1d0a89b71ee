"""Fading-memory kernels and the integrated-history field.

The model couples the field u to its own past through a kernel mu_eps(s) =
eps^-2 mu(s/eps) acting on the history lift eta(t, s) = integral of u over
the last s time units.  This module owns:

  * admissible kernels (exponential family + tabulated) and their rescaling,
  * the memory-age grid with kernel-mass quadrature weights,
  * the transport update for eta (first-order upwind) and the exact
    representation-formula evaluation used as its oracle,
  * the exponential-kernel reduction m_k = integral mu_eps eta_k ds, which
    closes exactly (dm/dt = (delta/eps)(u - m)) and has no CFL constraint,
  * the semi-Lagrangian "shadow" update used to reconstruct eta for energy
    diagnostics when the reduction backend carries only m.

Norm convention: ||eta||^2 in the beta-weighted history space is
sum_j w_j sum_k alpha_k^(1+beta) eta_kj^2 with w_j the kernel cell masses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np

from .spectral import Domain

__all__ = [
    "Kernel",
    "KernelCertificate",
    "HistoryGrid",
    "CFLError",
    "rescale_kernel",
    "check_admissible",
    "weighted_norm",
    "transport_step",
    "history_representation",
    "memory_drift",
    "exp_reduction_step",
    "tail_functional",
    "init_history_from_past",
    "ShadowUpdate",
    "shadow_step",
    "read_kernel_table",
]


class CFLError(ValueError):
    """Raised when a transport step exceeds the upwind stability limit."""

    def __init__(self, dt: float, admissible_dt: float):
        super().__init__(
            f"transport step dt={dt:g} violates the upwind CFL condition; "
            f"largest admissible dt is {admissible_dt:g}"
        )
        self.admissible_dt = admissible_dt


@dataclass(frozen=True, eq=False)
class Kernel:
    """Memory kernel, exponential family or tabulated base samples.

    The exponential family is the (M2)-normalized mu(s) = delta^2 e^(-delta s);
    rescaling by eps in (0, 1] gives mu_eps(s) = eps^-2 mu(s/eps) with mass
    delta/eps and first moment 1.  Tabulated kernels store base samples
    (eps = 1); they are renormalized on construction so that the trapezoid
    quadrature of s*mu(s) equals 1 exactly (the stored ``normalization`` is
    the factor applied).
    """

    delta: float
    epsilon: float = 1.0
    table: tuple[np.ndarray, np.ndarray] | None = None
    normalization: float = 1.0

    def __post_init__(self) -> None:
        if self.delta <= 0:
            raise ValueError(f"kernel decay rate must be positive, got {self.delta}")
        if not 0 < self.epsilon <= 1:
            raise ValueError(f"epsilon must lie in (0, 1], got {self.epsilon}")

    @classmethod
    def exponential(cls, delta: float = 1.0, epsilon: float = 1.0) -> "Kernel":
        return cls(delta=delta, epsilon=epsilon)

    @classmethod
    def tabulated(cls, s: np.ndarray, values: np.ndarray, delta: float) -> "Kernel":
        s = np.asarray(s, dtype=np.float64)
        values = np.asarray(values, dtype=np.float64)
        if s.ndim != 1 or s.size < 2 or values.shape != s.shape:
            raise ValueError("tabulated kernel needs matching 1-D node/value arrays")
        if np.any(np.diff(s) <= 0):
            raise ValueError("tabulated kernel nodes must be strictly increasing")
        if np.any(values <= 0):
            raise ValueError("tabulated kernel values must be positive")
        first_moment = np.trapezoid(s * values, s)
        norm = 1.0 / first_moment
        return cls(delta=delta, epsilon=1.0, table=(s, values * norm), normalization=norm)

    @property
    def is_exponential(self) -> bool:
        return self.table is None

    def mu(self, s: np.ndarray | float) -> np.ndarray | float:
        """Rescaled kernel mu_eps(s) = eps^-2 mu(s/eps)."""
        s = np.asarray(s, dtype=np.float64)
        inv_e2 = self.epsilon**-2
        if self.is_exponential:
            out = inv_e2 * self.delta**2 * np.exp(-self.delta * s / self.epsilon)
        else:
            sn, vals = self.table
            out = inv_e2 * np.interp(s / self.epsilon, sn, vals, left=vals[0], right=0.0)
        return float(out) if out.ndim == 0 else out

    def mass(self) -> float:
        """Total mass of mu_eps; delta/eps for the exponential family."""
        if self.is_exponential:
            return self.delta / self.epsilon
        sn, vals = self.table
        return float(np.trapezoid(vals, sn)) / self.epsilon

    def cell_mass(self, a: float, b: float) -> float:
        """Exact (exponential) or finely-quadratured mass of mu_eps over [a, b]."""
        if self.is_exponential:
            rate = self.delta / self.epsilon
            return (self.delta / self.epsilon) * (math.exp(-rate * a) - math.exp(-rate * b))
        sub = np.linspace(a, b, 65)
        return float(np.trapezoid(self.mu(sub), sub))

    def tail_mass(self, s0: float) -> float:
        """Mass of mu_eps over [s0, infinity)."""
        if self.is_exponential:
            return (self.delta / self.epsilon) * math.exp(-self.delta * s0 / self.epsilon)
        sn, vals = self.table
        upper = sn[-1] * self.epsilon
        if s0 >= upper:
            return 0.0
        sub = np.linspace(s0, upper, 257)
        return float(np.trapezoid(self.mu(sub), sub))


def rescale_kernel(base: Kernel, epsilon: float) -> Kernel:
    """Kernel with mu_eps(s) = eps^-2 mu(s/eps); base must be unscaled."""
    if base.epsilon != 1.0:
        raise ValueError("rescale_kernel expects an unscaled base kernel (epsilon = 1)")
    if not 0 < epsilon <= 1:
        raise ValueError(f"epsilon must lie in (0, 1], got {epsilon}")
    return Kernel(
        delta=base.delta,
        epsilon=epsilon,
        table=base.table,
        normalization=base.normalization,
    )


@dataclass(frozen=True)
class KernelCertificate:
    """Admissibility report: decay condition + moment identities."""

    delta: float
    mass: float
    first_moment: float
    second_moment: float
    third_moment_mu_sq: float
    ok: bool
    message: str = ""


def check_admissible(kernel: Kernel, tol_first_moment: float = 1e-8) -> KernelCertificate:
    """Verify the decay condition mu' + (delta/eps) mu <= 0 and the moments.

    For the exponential family the decay condition is an identity; for
    tabulated kernels it is checked by one-sided differences at the nodes
    (rejecting with the first offending node).  Moments of the rescaled
    kernel: mass, first (must equal 1), second, and integral of s^3 mu(s)^2
    (enters the rate experiment's error budget).
    """
    eps, delta = kernel.epsilon, kernel.delta
    if kernel.is_exponential:
        mass = delta / eps
        first = 1.0
        second = 2.0 * eps / delta
        # int_0^inf s^3 mu_eps(s)^2 ds = (delta^4/eps^4) * 6 / (2 delta/eps)^4 = 3/8,
        # independent of both delta and eps for the normalized exponential family.
        third_sq = 0.375
        ok, message = True, ""
    else:
        sn, vals = kernel.table
        dmu = np.diff(vals) / np.diff(sn)
        # One-sided difference attributed to the right node of each interval:
        # for convex decaying densities the chord underestimates |mu'| at the
        # left node, so a left-node check would reject exact exponentials.
        bad = np.nonzero(dmu + kernel.delta * vals[1:] > 1e-12)[0]
        if bad.size:
            j = int(bad[0]) + 1
            return KernelCertificate(
                delta=delta, mass=float("nan"), first_moment=float("nan"),
                second_moment=float("nan"), third_moment_mu_sq=float("nan"),
                ok=False,
                message=f"(M1) violated at node s={sn[j]:g}: mu' + delta*mu = {dmu[j - 1] + delta * vals[j]:g} > 0",
            )
        # Moments via the table's own trapezoid rule (the same quadrature the
        # renormalization uses), mapped through the rescaling laws: mass and
        # second moment pick up 1/eps and eps, the first moment and the
        # s^3 mu^2 integral are scale invariant.
        mass = float(np.trapezoid(vals, sn)) / eps
        first = float(np.trapezoid(sn * vals, sn))
        second = float(np.trapezoid(sn**2 * vals, sn)) * eps
        third_sq = float(np.trapezoid(sn**3 * vals**2, sn))
        ok, message = True, ""
    if abs(first - 1.0) > tol_first_moment:
        ok = False
        message = f"(M2) violated: first moment of mu_eps is {first:.10g}, expected 1"
    return KernelCertificate(
        delta=delta, mass=mass, first_moment=first, second_moment=second,
        third_moment_mu_sq=third_sq, ok=ok, message=message,
    )


@dataclass(frozen=True, eq=False)
class HistoryGrid:
    """Geometric memory-age grid with kernel cell-mass quadrature weights.

    ``weights[j]`` is the exact mass of mu_eps over the node-centered cell
    [m_(j-1), m_j] (midpoint edges; first cell extends to s = 0, last ends at
    s_max).  Quadrature rule: integral of mu_eps(s) g(s) ds ~ sum_j w_j g(s_j),
    which reproduces the total kernel mass exactly for constant g.
    """

    s_nodes: np.ndarray
    weights: np.ndarray
    kernel: Kernel

    def __post_init__(self) -> None:
        if np.any(np.diff(self.s_nodes) <= 0) or self.s_nodes[0] <= 0:
            raise ValueError("grid nodes must be strictly increasing and positive")
        if np.any(self.weights <= 0):
            raise ValueError("quadrature weights must be positive")

    @classmethod
    def geometric(
        cls,
        kernel: Kernel,
        n_nodes: int = 96,
        s_min_factor: float = 1e-3,
        s_max_factor: float = 25.0,
    ) -> "HistoryGrid":
        """Default grid: n nodes from 1e-3*eps to 25*eps/delta, geometric."""
        s_min = s_min_factor * kernel.epsilon
        s_max = s_max_factor * kernel.epsilon / kernel.delta
        nodes = np.geomspace(s_min, s_max, n_nodes)
        edges = np.empty(n_nodes + 1)
        edges[0] = 0.0
        edges[1:-1] = 0.5 * (nodes[:-1] + nodes[1:])
        edges[-1] = s_max
        weights = np.array([kernel.cell_mass(a, b) for a, b in zip(edges[:-1], edges[1:])])
        return cls(s_nodes=nodes, weights=weights, kernel=kernel)

    @cached_property
    def spacings(self) -> np.ndarray:
        """Upwind spacings: s_1 (ghost node at 0) then the node differences."""
        return np.concatenate(([self.s_nodes[0]], np.diff(self.s_nodes)))

    @property
    def admissible_dt(self) -> float:
        return float(np.min(self.spacings))

    @property
    def n_nodes(self) -> int:
        return self.s_nodes.size

    def refined(self, factor: int = 2) -> "HistoryGrid":
        """Grid with ``factor``-times more nodes over the same span."""
        return HistoryGrid.geometric(
            self.kernel,
            n_nodes=factor * (self.n_nodes - 1) + 1,
            s_min_factor=self.s_nodes[0] / self.kernel.epsilon,
            s_max_factor=self.s_nodes[-1] * self.kernel.delta / self.kernel.epsilon,
        )


def weighted_norm(eta: np.ndarray, beta: int, grid: HistoryGrid, domain: Domain) -> float:
    """History norm (sum_j w_j sum_k alpha_k^(1+beta) eta_kj^2)^(1/2)."""
    if beta not in (0, 1):
        raise ValueError(f"beta must be 0 or 1, got {beta}")
    alpha_w = domain.eigenvalues ** (1 + beta)
    sq = np.einsum("ks,s,k->", eta * eta, grid.weights, alpha_w)
    return float(math.sqrt(sq))


def transport_step(eta: np.ndarray, u: np.ndarray, dt: float, grid: HistoryGrid) -> np.ndarray:
    """One first-order upwind step of d_t eta = -d_s eta + u, eta(t, 0) = 0."""
    if dt > grid.admissible_dt:
        raise CFLError(dt, grid.admissible_dt)
    courant = dt / grid.spacings
    shifted = np.empty_like(eta)
    shifted[:, 0] = 0.0
    shifted[:, 1:] = eta[:, :-1]
    return eta - courant * (eta - shifted) + dt * u[:, None]


def history_representation(
    u_path: np.ndarray,
    dt_path: float,
    t: float,
    grid: HistoryGrid,
    eta0: np.ndarray | None = None,
) -> np.ndarray:
    """Evaluate eta(t, s_j) from the stored path of u by the exact formula.

    eta(t, s) = integral_0^min(s,t) u(t - r) dr, plus eta0(s - t) for s > t.
    ``u_path`` holds u at times i * dt_path, i = 0..n, and must cover [0, t];
    time integrals use the trapezoid rule with linear interpolation of the
    cumulative integral at off-grid endpoints.  eta0 is sampled at shifted
    nodes by linear interpolation (anchored at eta0(0) = 0).
    """
    u_path = np.asarray(u_path, dtype=np.float64)
    n_stored = u_path.shape[0] - 1
    if t > n_stored * dt_path + 1e-12:
        raise ValueError(f"path of length {n_stored * dt_path:g} does not cover t={t:g}")
    # cumulative trapezoid integral C(tau) = int_0^tau u, per mode
    cum = np.zeros_like(u_path)
    np.cumsum(0.5 * dt_path * (u_path[1:] + u_path[:-1]), axis=0, out=cum[1:])
    path_times = dt_path * np.arange(n_stored + 1)

    def cum_at(tau: np.ndarray) -> np.ndarray:
        out = np.empty((tau.size, u_path.shape[1]))
        for k in range(u_path.shape[1]):
            out[:, k] = np.interp(tau, path_times, cum[:, k])
        return out

    s = grid.s_nodes
    lower = np.clip(t - s, 0.0, None)
    eta_t = (cum_at(np.full(s.size, t)) - cum_at(lower)).T  # (n_modes, n_s)
    if eta0 is not None:
        behind = s > t
        if np.any(behind):
            shift = s[behind] - t
            nodes_ext = np.concatenate(([0.0], s))
            for k in range(eta_t.shape[0]):
                vals_ext = np.concatenate(([0.0], eta0[k]))
                eta_t[k, behind] += np.interp(shift, nodes_ext, vals_ext)
    return eta_t


def memory_drift(state: np.ndarray, grid: HistoryGrid, domain: Domain) -> np.ndarray:
    """Per-mode kernel-weighted history integrand g_k = alpha_k * <mu_eps, eta_k>.

    Accepts either a history matrix (n_modes, n_s) — quadrature path — or the
    kernel-averaged vector m (n_modes,) from the exponential reduction.  The
    caller applies the -(1-kappa) prefactor.
    """
    if state.ndim == 2:
        return domain.eigenvalues * (state @ grid.weights)
    if state.ndim == 1:
        return domain.eigenvalues * state
    raise ValueError(f"memory state must be 1-D or 2-D, got shape {state.shape}")


def exp_reduction_step(m: np.ndarray, u: np.ndarray, dt: float, kernel: Kernel) -> np.ndarray:
    """Exact step of dm/dt = (delta/eps)(u - m) with u frozen over the step."""
    if not kernel.is_exponential:
        raise ValueError("exponential reduction requires the exponential kernel family")
    decay = math.exp(-kernel.delta * dt / kernel.epsilon)
    return decay * m + (1.0 - decay) * u


def tail_functional(
    eta: np.ndarray, r: float, grid: HistoryGrid, domain: Domain
) -> float:
    """Kernel-weighted H^1 mass of eta outside the age window (1/r, r)."""
    if r < 1:
        raise ValueError(f"tail functional needs r >= 1, got {r}")
    outside = (grid.s_nodes < 1.0 / r) | (grid.s_nodes > r)
    if not np.any(outside):
        return 0.0
    w = grid.weights[outside]
    sq = np.einsum("ks,s,k->", eta[:, outside] ** 2, w, domain.eigenvalues)
    return float(sq)


def init_history_from_past(u_past, grid: HistoryGrid, n_modes: int, n_sub: int = 64) -> np.ndarray:
    """Build eta0(s_j) = integral_0^s_j u_past(r) dr by composite trapezoid.

    ``u_past`` maps age r >= 0 to a coefficient vector; each node integral is
    refined with ``n_sub`` trapezoid panels for accuracy on the coarse grids.
    """
    eta0 = np.empty((n_modes, grid.n_nodes))
    for j, s in enumerate(grid.s_nodes):
        r = np.linspace(0.0, s, n_sub + 1)
        vals = np.stack([np.asarray(u_past(ri), dtype=np.float64) for ri in r])
        eta0[:, j] = np.trapezoid(vals, r, axis=0)
    return eta0


@dataclass(frozen=True, eq=False)
class ShadowUpdate:
    """Precomputed semi-Lagrangian update for a fixed (grid, dt) pair.

    One step of the history equation via the representation formula:
    eta(t+dt, s) = eta(t, s-dt) + dt*u for s > dt (linear interpolation at
    the foot point, zero boundary below the first node), and eta = s*u for
    s <= dt.  Unconditionally stable; used for the diagnostic shadow field
    carried alongside the exponential-reduction backend at any epsilon.
    """

    idx_lo: np.ndarray
    idx_hi: np.ndarray
    w_lo: np.ndarray
    w_hi: np.ndarray
    u_coef: np.ndarray
    dt: float

    @classmethod
    def build(cls, grid: HistoryGrid, dt: float) -> "ShadowUpdate":
        s = grid.s_nodes
        n = s.size
        idx_lo = np.zeros(n, dtype=np.int64)
        idx_hi = np.zeros(n, dtype=np.int64)
        w_lo = np.zeros(n)
        w_hi = np.zeros(n)
        u_coef = np.full(n, dt)
        for j in range(n):
            target = s[j] - dt
            if target <= 0.0:
                u_coef[j] = s[j]  # eta(t+dt, s) ~ s * u for s <= dt
                continue
            pos = int(np.searchsorted(s, target))
            if pos == 0:
                w_lo[j] = target / s[0]  # between the zero boundary and node 0
                idx_lo[j] = 0
            else:
                theta = (target - s[pos - 1]) / (s[pos] - s[pos - 1])
                idx_lo[j], idx_hi[j] = pos - 1, pos
                w_lo[j], w_hi[j] = 1.0 - theta, theta
        return cls(idx_lo=idx_lo, idx_hi=idx_hi, w_lo=w_lo, w_hi=w_hi, u_coef=u_coef, dt=dt)


def shadow_step(eta: np.ndarray, u: np.ndarray, upd: ShadowUpdate) -> np.ndarray:
    """Apply one precomputed semi-Lagrangian step; eta is (..., n_modes, n_s)."""
    return (
        upd.w_lo * eta[..., upd.idx_lo]
        + upd.w_hi * eta[..., upd.idx_hi]
        + upd.u_coef * u[..., None]
    )


def read_kernel_table(path) -> Kernel:
    """Load a tabulated kernel from two-column (s, mu) text; '#' comments.

    The table is (M2)-renormalized on load; the decay rate delta is estimated
    as the minimal pointwise log-slope sup_j (-mu'/mu) compatible with (M1),
    unless a '# delta = <value>' comment overrides it.
    """
    s_vals, mu_vals, delta = [], [], None
    with open(path) as fh:
        for line_no, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped:
                continue
            if stripped.startswith("#"):
                body = stripped.lstrip("#").strip()
                if body.lower().startswith("delta"):
                    try:
                        delta = float(body.split("=", 1)[1])
                    except (IndexError, ValueError) as exc:
                        raise ValueError(f"{path}:{line_no}: malformed delta comment") from exc
                continue
            parts = stripped.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{line_no}: expected two columns, got {len(parts)}")
            s_vals.append(float(parts[0]))
            mu_vals.append(float(parts[1]))
    s_arr = np.array(s_vals)
    mu_arr = np.array(mu_vals)
    if s_arr.size < 2:
        raise ValueError(f"{path}: kernel table needs at least two rows")
    if np.any(np.diff(s_arr) <= 0):
        bad = int(np.nonzero(np.diff(s_arr) <= 0)[0][0])
        raise ValueError(f"{path}: s column not strictly increasing at row {bad + 2}")
    if delta is None:
        with np.errstate(divide="ignore"):
            slopes = -np.diff(np.log(mu_arr)) / np.diff(s_arr)
        delta = float(np.min(slopes))
        if delta <= 0:
            raise ValueError(f"{path}: table admits no positive decay rate (M1)")
    return Kernel.tabulated(s_arr, mu_arr, delta=delta)
