"""Distance-like functions on the extended space and coupling-based estimators.

``d_N`` is the extended-space norm scaled by N and capped at 1; ``d_{N,beta}``
multiplies it (under a square root) by Lyapunov exponential weights, making it
contractive for the dynamics while still comparable to a metric.  Every
Wasserstein-type number produced here is a coupling upper bound — the true
infimum is never attempted.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import ExtendedState, SystemSpec, energy_psi0, extended_norm_sq, state_difference

EXTENDED = "extended"
MARGINAL = "marginal"

#: Largest admissible exponent in the Lyapunov weight e^{beta Psi0}; beyond
#: this exp() overflows double precision and the distance is meaningless.
_EXP_LIMIT = 700.0

#: Energies this large void the beta <= 0.05 moment threshold downstream.
_BETA_MAX = 0.05


@dataclass(frozen=True)
class DistanceSpec:
    """Parameters of the capped distance family.

    Attributes:
        cap_scale: The factor N multiplying the norm before the cap at 1.
        beta: Lyapunov weight; must stay at or below 0.05, the exponential
            moment threshold certified by the energy audits.
        level: "extended" measures (u, eta) in the extended norm; "marginal"
            measures u alone with the 1/2-weighted energy.
    """

    cap_scale: float = 1.0
    beta: float = 0.05
    level: str = EXTENDED

    def __post_init__(self) -> None:
        if self.cap_scale <= 0.0:
            raise ValueError("cap scale N must be positive")
        if not 0.0 < self.beta <= _BETA_MAX:
            raise ValueError(f"beta must lie in (0, {_BETA_MAX}]")
        if self.level not in (EXTENDED, MARGINAL):
            raise ValueError(f"unknown level {self.level!r}")


@dataclass
class EnsemblePairSample:
    """Paired draws (X_i, Y_i) from a coupling of two laws, uniform weights."""

    pairs: list[tuple[ExtendedState, ExtendedState]]

    def __post_init__(self) -> None:
        if not self.pairs:
            raise ValueError("pair sample must be nonempty")


@dataclass(frozen=True)
class TVBound:
    """Total-variation upper bounds from a Girsanov shift budget.

    ``sqrt_bound`` is (1/2) (E int ||beta||^2 dt)^{1/2} capped at 1;
    ``exp_bound`` is the always-sub-one form 1 - (1/2) e^{-(1/2) int}.
    """

    sqrt_bound: float
    exp_bound: float
    shift_budget: float


def _norm(U: ExtendedState, Ut: ExtendedState, spec: SystemSpec, d: DistanceSpec) -> float:
    if d.level == MARGINAL:
        du = U.u - Ut.u
        return float(np.sqrt(np.dot(du, du)))
    return math.sqrt(extended_norm_sq(state_difference(U, Ut), spec))


def _psi(U: ExtendedState, spec: SystemSpec, d: DistanceSpec) -> float:
    if d.level == MARGINAL:
        return 0.5 * float(np.dot(U.u, U.u))
    return energy_psi0(U, spec)


def dist_dN(U: ExtendedState, Ut: ExtendedState, spec: SystemSpec, d: DistanceSpec) -> float:
    """Capped distance N * ||U - Ut|| ^ 1 (wedge), in [0, 1]."""
    return min(d.cap_scale * _norm(U, Ut, spec, d), 1.0)


def dist_dNbeta(U: ExtendedState, Ut: ExtendedState, spec: SystemSpec, d: DistanceSpec) -> float:
    """sqrt(d_N * (1 + e^{beta Psi0(U)} + e^{beta Psi0(Ut)}))."""
    e1 = d.beta * _psi(U, spec, d)
    e2 = d.beta * _psi(Ut, spec, d)
    if e1 > _EXP_LIMIT or e2 > _EXP_LIMIT:
        raise OverflowError("Lyapunov exponent exceeds 700; state outside the usable range")
    return math.sqrt(dist_dN(U, Ut, spec, d) * (1.0 + math.exp(e1) + math.exp(e2)))


def dnbeta_from_parts(
    diff_sq: np.ndarray,
    psi_a: np.ndarray,
    psi_b: np.ndarray,
    d: DistanceSpec,
) -> np.ndarray:
    """Vectorized d_{N,beta} from precomputed squared norms and energies.

    Used on ensemble series where states are long gone: ``diff_sq`` is the
    squared (extended or marginal, caller's choice) norm of the difference.
    """
    e1 = d.beta * np.asarray(psi_a)
    e2 = d.beta * np.asarray(psi_b)
    if np.any(e1 > _EXP_LIMIT) or np.any(e2 > _EXP_LIMIT):
        raise OverflowError("Lyapunov exponent exceeds 700; state outside the usable range")
    dn = np.minimum(d.cap_scale * np.sqrt(np.asarray(diff_sq)), 1.0)
    return np.sqrt(dn * (1.0 + np.exp(e1) + np.exp(e2)))


def wasserstein_upper(samples: EnsemblePairSample, metric) -> tuple[float, float]:
    """Coupling upper bound on W_d: sample mean of metric over pairs.

    Returns (estimate, 95% normal half-width).  Any coupling of the two laws
    bounds the infimum from above, so this is an upper bound, not an estimate
    of W_d itself.
    """
    vals = np.array([metric(x, y) for x, y in samples.pairs])
    if vals.size < 2:
        raise ValueError("need at least 2 pairs for an MC half-width")
    half = 1.96 * float(np.std(vals, ddof=1)) / math.sqrt(vals.size)
    return float(np.mean(vals)), half


def tv_bound_from_shift(times: np.ndarray, mean_shift_sq: np.ndarray) -> TVBound:
    """Total-variation bounds from the time series of E ||beta(t)||^2.

    The budget is the trapezoid quadrature of the series; both the square-root
    bound (clamped to [0,1]) and its exponential refinement are returned.
    """
    times = np.asarray(times, dtype=float)
    vals = np.asarray(mean_shift_sq, dtype=float)
    if np.any(vals < 0.0):
        raise ValueError("squared shift series must be nonnegative")
    budget = float(np.trapezoid(vals, times))
    return TVBound(
        sqrt_bound=min(0.5 * math.sqrt(budget), 1.0),
        exp_bound=1.0 - 0.5 * math.exp(-0.5 * budget),
        shift_budget=budget,
    )


def check_metric_ordering(
    U: ExtendedState, Ut: ExtendedState, spec: SystemSpec, d: DistanceSpec
) -> bool:
    """Marginal d_{N,beta} never exceeds the extended one (projection shrinks)."""
    marginal = dist_dNbeta(U, Ut, spec, replace(d, level=MARGINAL))
    extended = dist_dNbeta(U, Ut, spec, replace(d, level=EXTENDED))
    return marginal <= extended + 1e-12


def triangle_constant(d: DistanceSpec) -> float:
    """C = max{2, e^{beta/(2 N^2)}} for the generalized triangle inequality.

    The two proof cases give e^{beta/N^2} (both capped norms small) and 4
    (some cap active) on the squared distances; on the distances themselves
    these become the square roots above.
    """
    return max(2.0, math.exp(d.beta / (2.0 * d.cap_scale**2)))


def check_triangle(
    U1: ExtendedState,
    U2: ExtendedState,
    U3: ExtendedState,
    spec: SystemSpec,
    d: DistanceSpec,
) -> tuple[float, float, float]:
    """Evaluate d_{N,beta/2}(U1,U3) <= C (d_{N,beta}(U1,U2) + d_{N,beta}(U2,U3)).

    Returns (lhs, rhs, C); the caller asserts lhs <= rhs.
    """
    c = triangle_constant(d)
    half = replace(d, beta=d.beta / 2.0)
    lhs = dist_dNbeta(U1, U3, spec, half)
    rhs = c * (dist_dNbeta(U1, U2, spec, d) + dist_dNbeta(U2, U3, spec, d))
    return lhs, rhs, c
