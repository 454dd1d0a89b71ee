"""Hot time-stepping kernels: numba-jitted loops with pure-numpy twins.

Each public kernel advances a whole batch of trajectories through a chunk of
semi-implicit Euler-Maruyama steps, updating states in place:

  * ``chunk_memory``      — memory system (u, m) with optional shadow history
  * ``chunk_memoryless``  — full-Laplacian limit system, optional ersatz shadow
  * ``chunk_nudged_pair`` — coupled pair, second member nudged toward the first
  * ``chunk_transport``   — upwind transport of a single history field under a
                            prescribed drive (validation / oracle runs)

Backend selection: the numba path is used when numba imports successfully and
the environment variable VOLTERRA_SPDE_NUMBA is not set to 0/false/off.  The
numpy twins are kept in sync operation-for-operation; both paths agree to
floating-point noise (matmuls hit the same BLAS) and are benchmarked against
each other in benchmarks/step_kernel_bench.py.

Array contract (all float64, C-contiguous):
  u, mem        (M, n_modes)          state / kernel-averaged history
  shadow        (M, n_modes, n_s)     diagnostic history field (pass size-0 to skip)
  noise         (M, steps, n_modes)   pre-scaled q_k sqrt(dt) xi increments
  synth, anal   (n_modes, P), (P, n_modes)  dealiasing transform pair
  acc           (4, M)                running integrals of ||A^1/2 u||^2,
                                      ||A u||^2, ||eta||^2_M0, ||eta||^2_M1
                                      (left Riemann; pass size-0 to skip)
"""

from __future__ import annotations

import os

import numpy as np

_flag = os.environ.get("VOLTERRA_SPDE_NUMBA", "auto").strip().lower()
if _flag in ("0", "false", "off", "no"):
    HAS_NUMBA = False
else:
    try:
        from numba import njit

        HAS_NUMBA = True
    except ImportError:
        HAS_NUMBA = False

if not HAS_NUMBA:

    def njit(*args, **kwargs):
        """Fallback no-op decorator when numba is unavailable/disabled."""

        def wrap(fn):
            return fn

        return wrap if not (args and callable(args[0])) else args[0]


def backend_name() -> str:
    return "numba" if HAS_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# numpy twins


def _horner_np(v: np.ndarray, pcoef: np.ndarray) -> np.ndarray:
    out = np.full_like(v, pcoef[-1])
    for i in range(pcoef.size - 2, -1, -1):
        out = out * v + pcoef[i]
    return out


def _accumulate_np(acc, u, shadow, alpha, alpha_sq, w_nodes, dt):
    u2 = u * u
    acc[0] += dt * (u2 @ alpha)
    acc[1] += dt * (u2 @ alpha_sq)
    if shadow.size:
        per_mode = np.einsum("mks,s->mk", shadow * shadow, w_nodes)
        acc[2] += dt * (per_mode @ alpha)
        acc[3] += dt * (per_mode @ alpha_sq)


def _shadow_step_np(shadow, u, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu):
    return (
        sh_wlo * shadow[:, :, sh_ilo]
        + sh_whi * shadow[:, :, sh_ihi]
        + sh_cu * u[:, :, None]
    )


def _chunk_memory_numpy(
    u, mem, shadow, noise, synth, anal, pcoef, inv_impl, mem_coef, decay, dt,
    sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu, alpha, w_nodes, acc,
):
    alpha_sq = alpha * alpha
    n_steps = noise.shape[1]
    for i in range(n_steps):
        if acc.size:
            _accumulate_np(acc, u, shadow, alpha, alpha_sq, w_nodes, dt)
        phi = _horner_np(u @ synth, pcoef) @ anal
        u_next = (u + dt * (phi - mem_coef * mem) + noise[:, i, :]) * inv_impl
        mem *= decay
        mem += (1.0 - decay) * u
        if shadow.size:
            shadow[:] = _shadow_step_np(shadow, u, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu)
        u[:] = u_next


def _chunk_memoryless_numpy(
    u, shadow, noise, synth, anal, pcoef, inv_impl, dt,
    sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu, alpha, w_nodes, acc,
):
    alpha_sq = alpha * alpha
    n_steps = noise.shape[1]
    for i in range(n_steps):
        if acc.size:
            _accumulate_np(acc, u, shadow, alpha, alpha_sq, w_nodes, dt)
        phi = _horner_np(u @ synth, pcoef) @ anal
        u_next = (u + dt * phi + noise[:, i, :]) * inv_impl
        if shadow.size:
            shadow[:] = _shadow_step_np(shadow, u, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu)
        u[:] = u_next


def _chunk_nudged_pair_numpy(
    ua, ma, ha, ub, mb, hb, noise, synth, anal, pcoef, inv_impl, mem_coef,
    decay, dt, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu, nudge, beta_coef, beta_acc,
):
    n_steps = noise.shape[1]
    for i in range(n_steps):
        diff = ua - ub
        beta_acc += dt * np.sum((beta_coef * diff) ** 2, axis=1)
        phi_a = _horner_np(ua @ synth, pcoef) @ anal
        phi_b = _horner_np(ub @ synth, pcoef) @ anal
        xi = noise[:, i, :]
        ua_next = (ua + dt * (phi_a - mem_coef * ma) + xi) * inv_impl
        ub_next = (ub + dt * (phi_b - mem_coef * mb + nudge * diff) + xi) * inv_impl
        ma *= decay
        ma += (1.0 - decay) * ua
        mb *= decay
        mb += (1.0 - decay) * ub
        if ha.size:
            ha[:] = _shadow_step_np(ha, ua, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu)
            hb[:] = _shadow_step_np(hb, ub, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu)
        ua[:] = ua_next
        ub[:] = ub_next


def _chunk_transport_numpy(eta, u_path, dt, spacings):
    n_steps = u_path.shape[0]
    courant = dt / spacings
    for i in range(n_steps):
        shifted = np.empty_like(eta)
        shifted[:, 0] = 0.0
        shifted[:, 1:] = eta[:, :-1]
        eta -= courant * (eta - shifted)
        eta += dt * u_path[i][:, None]


# ---------------------------------------------------------------------------
# numba versions (compiled only when the backend is active)


@njit(cache=True)
def _horner_nb(v, pcoef):  # pragma: no cover - exercised via the public kernels
    out = np.full_like(v, pcoef[-1])
    for i in range(pcoef.size - 2, -1, -1):
        out = out * v + pcoef[i]
    return out


@njit(cache=True)
def _accumulate_nb(acc, u, shadow, alpha, alpha_sq, w_nodes, dt):  # pragma: no cover
    m_traj, n_modes = u.shape
    for m in range(m_traj):
        s0 = 0.0
        s1 = 0.0
        for k in range(n_modes):
            uk2 = u[m, k] * u[m, k]
            s0 += alpha[k] * uk2
            s1 += alpha_sq[k] * uk2
        acc[0, m] += dt * s0
        acc[1, m] += dt * s1
    if shadow.size:
        n_s = shadow.shape[2]
        for m in range(m_traj):
            e0 = 0.0
            e1 = 0.0
            for k in range(n_modes):
                row = 0.0
                for j in range(n_s):
                    row += w_nodes[j] * shadow[m, k, j] * shadow[m, k, j]
                e0 += alpha[k] * row
                e1 += alpha_sq[k] * row
            acc[2, m] += dt * e0
            acc[3, m] += dt * e1


@njit(cache=True)
def _shadow_step_nb(shadow, u, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu):  # pragma: no cover
    m_traj, n_modes, n_s = shadow.shape
    out = np.empty_like(shadow)
    for m in range(m_traj):
        for k in range(n_modes):
            for j in range(n_s):
                out[m, k, j] = (
                    sh_wlo[j] * shadow[m, k, sh_ilo[j]]
                    + sh_whi[j] * shadow[m, k, sh_ihi[j]]
                    + sh_cu[j] * u[m, k]
                )
    return out


@njit(cache=True)
def _chunk_memory_nb(
    u, mem, shadow, noise, synth, anal, pcoef, inv_impl, mem_coef, decay, dt,
    sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu, alpha, w_nodes, acc,
):  # pragma: no cover
    alpha_sq = alpha * alpha
    n_steps = noise.shape[1]
    for i in range(n_steps):
        if acc.size:
            _accumulate_nb(acc, u, shadow, alpha, alpha_sq, w_nodes, dt)
        phi = np.dot(_horner_nb(np.dot(u, synth), pcoef), anal)
        u_next = (u + dt * (phi - mem_coef * mem) + noise[:, i, :]) * inv_impl
        for m in range(mem.shape[0]):
            for k in range(mem.shape[1]):
                mem[m, k] = decay * mem[m, k] + (1.0 - decay) * u[m, k]
        if shadow.size:
            shadow[:] = _shadow_step_nb(shadow, u, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu)
        u[:] = u_next


@njit(cache=True)
def _chunk_memoryless_nb(
    u, shadow, noise, synth, anal, pcoef, inv_impl, dt,
    sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu, alpha, w_nodes, acc,
):  # pragma: no cover
    alpha_sq = alpha * alpha
    n_steps = noise.shape[1]
    for i in range(n_steps):
        if acc.size:
            _accumulate_nb(acc, u, shadow, alpha, alpha_sq, w_nodes, dt)
        phi = np.dot(_horner_nb(np.dot(u, synth), pcoef), anal)
        u_next = (u + dt * phi + noise[:, i, :]) * inv_impl
        if shadow.size:
            shadow[:] = _shadow_step_nb(shadow, u, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu)
        u[:] = u_next


@njit(cache=True)
def _chunk_nudged_pair_nb(
    ua, ma, ha, ub, mb, hb, noise, synth, anal, pcoef, inv_impl, mem_coef,
    decay, dt, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu, nudge, beta_coef, beta_acc,
):  # pragma: no cover
    n_steps = noise.shape[1]
    m_traj, n_modes = ua.shape
    for i in range(n_steps):
        for m in range(m_traj):
            b = 0.0
            for k in range(n_modes):
                z = beta_coef[k] * (ua[m, k] - ub[m, k])
                b += z * z
            beta_acc[m] += dt * b
        phi_a = np.dot(_horner_nb(np.dot(ua, synth), pcoef), anal)
        phi_b = np.dot(_horner_nb(np.dot(ub, synth), pcoef), anal)
        xi = noise[:, i, :]
        ua_next = (ua + dt * (phi_a - mem_coef * ma) + xi) * inv_impl
        ub_next = (ub + dt * (phi_b - mem_coef * mb + nudge * (ua - ub)) + xi) * inv_impl
        for m in range(m_traj):
            for k in range(n_modes):
                ma[m, k] = decay * ma[m, k] + (1.0 - decay) * ua[m, k]
                mb[m, k] = decay * mb[m, k] + (1.0 - decay) * ub[m, k]
        if ha.size:
            ha[:] = _shadow_step_nb(ha, ua, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu)
            hb[:] = _shadow_step_nb(hb, ub, sh_ilo, sh_ihi, sh_wlo, sh_whi, sh_cu)
        ua[:] = ua_next
        ub[:] = ub_next


@njit(cache=True)
def _chunk_transport_nb(eta, u_path, dt, spacings):  # pragma: no cover
    n_modes, n_s = eta.shape
    n_steps = u_path.shape[0]
    for i in range(n_steps):
        for k in range(n_modes):
            prev = 0.0
            for j in range(n_s):
                cur = eta[k, j]
                eta[k, j] = cur - (dt / spacings[j]) * (cur - prev) + dt * u_path[i, k]
                prev = cur


# ---------------------------------------------------------------------------
# dispatch

if HAS_NUMBA:
    chunk_memory = _chunk_memory_nb
    chunk_memoryless = _chunk_memoryless_nb
    chunk_nudged_pair = _chunk_nudged_pair_nb
    chunk_transport = _chunk_transport_nb
else:
    chunk_memory = _chunk_memory_numpy
    chunk_memoryless = _chunk_memoryless_numpy
    chunk_nudged_pair = _chunk_nudged_pair_numpy
    chunk_transport = _chunk_transport_numpy

NO_SHADOW = np.zeros((0, 0, 0))
NO_ACC = np.zeros((0, 0))
