"""Config-file parsing and assumption validation.

Flat INI layout, three sections:

  [system]      length, n_modes, n_quad, kappa, delta, potential (ascending
                coefficients, comma separated), q0, q_decay, n_bar, and
                optionally kernel_table (path) + kernel_renormalize (bool)
  [solver]      dt, seed, record_every
  [experiment]  epsilons, n_traj, horizon, burn_in, averaging, cap_scale,
                beta, workers

Validation reports diagnostics as (assumption_id, message) pairs citing the
standing assumptions:

  (M1)  kernel positivity and exponential-domination decay
  (M2)  unit first moment of the rescaled kernel
  (Q1)  noise amplitude/decay keeps the forcing trace-class
  (Q3)  forcing covers every mode up to n_bar and the damped spectral gap
        kappa * alpha_{n_bar} exceeds the one-sided slope bound of phi
  (P0)  confining polynomial drift (odd degree, negative leading coefficient,
        or the zero/linear-stable degenerate cases)
  (P1)  finite one-sided slope bound sup phi'
  (P2)  pointwise dissipativity x phi(x) <= -a2 |x|^(p0+1) + a3
  (P3)  desk-scale polynomial growth guard (degree at most 7)

Parse failures cite (SYNTAX) and carry the offending line number.
"""

from __future__ import annotations

import configparser

import numpy as np

from .dynamics import EXP_REDUCTION, GRID, MAX_DT, SolverConfig, SystemSpec
from .experiments import ExperimentConfig
from .memory import Kernel, check_admissible, read_kernel_table
from .spectral import Domain, Noise, Potential, check_dissipativity

DEFAULT_CONFIG_TEXT = """\
[system]
length = 3.141592653589793
n_modes = 64
n_quad = 128
kappa = 0.5
delta = 1.0
potential = 0, 1, 0, -1
q0 = 0.25
q_decay = 2.0
n_bar = 2

[solver]
dt = 0.002
seed = 0
record_every = 50

[experiment]
n_traj = 256
horizon = 1.0
burn_in = 20.0
averaging = 100.0
cap_scale = 1.0
beta = 0.05
workers = 1
"""

EPSILON_DEFAULTS = {
    "sweep": (0.2, 0.1, 0.05, 0.025, 0.0125),
    "invariant": (0.2, 0.1, 0.05, 0.025, 0.0125),
    "contraction": (1.0, 0.25, 0.0625),
    "moments": (1.0, 0.25, 0.0625),
    "ergodicity": (1.0, 0.25, 0.0625),
    "validate-oracles": (0.25,),
}


def _find_line(text: str, key: str) -> int:
    for i, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("=")[0].split(":")[0].strip().lower()
        if stripped == key.lower():
            return i
    return 0


class ConfigError(ValueError):
    pass


def _parse_sections(text: str):
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"(SYNTAX) {exc}") from exc
    return parser


def _get(parser, text, section, key, cast, default, diagnostics):
    if not parser.has_option(section, key):
        return default
    raw = parser.get(section, key)
    try:
        return cast(raw)
    except (TypeError, ValueError):
        line = _find_line(text, key)
        diagnostics.append(
            ("(SYNTAX)", f"line {line}: [{section}] {key} = {raw!r} is not a valid "
             f"{cast.__name__}")
        )
        return default


def _float_list(raw: str):
    return tuple(float(v) for v in raw.replace(",", " ").split())


def _bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(raw)


def validate_text(text: str, experiment: str = "sweep", overrides: dict | None = None):
    """Parse + validate config text; returns (ExperimentConfig | None, diagnostics).

    ``diagnostics`` is a list of (assumption_id, message) pairs; the config is
    usable only when the list is empty.  ``overrides`` may replace seed, dt,
    epsilons, workers, out_dir.
    """
    diagnostics: list[tuple[str, str]] = []
    try:
        parser = _parse_sections(text)
    except ConfigError as exc:
        return None, [("(SYNTAX)", str(exc))]
    overrides = overrides or {}
    unknown = set(overrides) - {"dt", "seed", "epsilons", "workers", "out_dir"}
    if unknown:
        raise ValueError(f"unsupported override keys: {sorted(unknown)}")

    g = lambda sec, key, cast, default: _get(parser, text, sec, key, cast, default, diagnostics)
    length = g("system", "length", float, float(np.pi))
    n_modes = g("system", "n_modes", int, 64)
    n_quad = g("system", "n_quad", int, 128)
    kappa = g("system", "kappa", float, 0.5)
    delta = g("system", "delta", float, 1.0)
    coeffs = g("system", "potential", _float_list, (0.0, 1.0, 0.0, -1.0))
    q0 = g("system", "q0", float, 0.25)
    q_decay = g("system", "q_decay", float, 2.0)
    n_bar = g("system", "n_bar", int, 2)
    kernel_table = g("system", "kernel_table", str, None)
    renormalize = g("system", "kernel_renormalize", _bool, True)

    dt = float(overrides.get("dt", g("solver", "dt", float, 2e-3)))
    seed = int(overrides.get("seed", g("solver", "seed", int, 0)))
    record_every = g("solver", "record_every", int, 50)

    default_eps = EPSILON_DEFAULTS.get(experiment, (1.0, 0.25, 0.0625))
    epsilons = tuple(overrides.get(
        "epsilons", g("experiment", "epsilons", _float_list, default_eps)))
    n_traj = g("experiment", "n_traj", int, 256)
    horizon = g("experiment", "horizon", float, 1.0)
    burn_in = g("experiment", "burn_in", float, 20.0)
    averaging = g("experiment", "averaging", float, 100.0)
    cap_scale = g("experiment", "cap_scale", float, 1.0)
    beta = g("experiment", "beta", float, 0.05)
    workers = int(overrides.get("workers", g("experiment", "workers", int, 1)))
    if diagnostics:
        return None, diagnostics

    # --- structural sanity ------------------------------------------------
    if not 0.0 < dt <= MAX_DT:
        diagnostics.append(("(SYNTAX)", f"dt = {dt:g} outside (0, {MAX_DT:g}]"))
    if n_modes < 2 or n_quad < 2 * n_modes:
        diagnostics.append(
            ("(SYNTAX)", f"need n_quad >= 2*n_modes for cubic dealiasing, got "
             f"{n_quad} < {2 * n_modes}"))
    for e in epsilons:
        if not 0.0 < e <= 1.0:
            diagnostics.append(("(SYNTAX)", f"epsilon {e:g} outside (0, 1]"))
    if not 0.0 < kappa < 1.0:
        diagnostics.append(
            ("(SYNTAX)", f"kappa = {kappa:g} outside (0, 1); the memoryless and "
             "pure-memory endpoints are not valid production configs"))
    if diagnostics:
        return None, diagnostics

    # --- kernel: (M1), (M2) ----------------------------------------------
    if delta <= 0.0:
        diagnostics.append(("(M1)", f"kernel rate delta = {delta:g} must be positive"))
        return None, diagnostics
    if kernel_table is not None:
        try:
            if renormalize:
                kernel = read_kernel_table(kernel_table)
            else:
                s_vals, mu_vals = np.loadtxt(kernel_table, comments="#", unpack=True)
                kernel = Kernel(delta=delta, epsilon=1.0,
                                table=(np.asarray(s_vals), np.asarray(mu_vals)),
                                normalization=1.0)
        except (OSError, ValueError) as exc:
            diagnostics.append(("(M1)", f"kernel table {kernel_table!r}: {exc}"))
            return None, diagnostics
    else:
        kernel = Kernel.exponential(delta)
    cert = check_admissible(kernel)
    if not cert.ok:
        aid = "(M2)" if cert.message.startswith("(M2)") else "(M1)"
        diagnostics.append((aid, cert.message))

    # --- potential: (P0)-(P3) --------------------------------------------
    try:
        potential = Potential(coeffs=tuple(coeffs))
    except ValueError as exc:
        diagnostics.append(("(P0)", f"potential coefficients {coeffs}: {exc}"))
        return None, diagnostics
    if not potential.is_zero:
        degree = len(potential.coeffs) - 1
        lead = potential.coeffs[-1]
        confining = (degree % 2 == 1) and (lead < 0.0 or (degree == 1 and lead <= 0.0))
        if not confining:
            diagnostics.append(
                ("(P0)", f"potential degree {degree} with leading coefficient "
                 f"{lead:g} is not confining (need odd degree, negative leading "
                 "coefficient)"))
        if degree > 7:
            diagnostics.append(
                ("(P3)", f"potential degree {degree} exceeds the desk-scale growth "
                 "guard (max 7)"))
        if diagnostics:
            return None, diagnostics
        if not np.isfinite(potential.a_phi):
            diagnostics.append(("(P1)", "one-sided slope bound sup phi' is not finite"))
        ok, worst_x, margin = check_dissipativity(potential, potential.a2, potential.a3)
        if not ok:
            diagnostics.append(
                ("(P2)", f"x*phi(x) <= -a2|x|^(p0+1) + a3 fails at x = {worst_x:.6g} "
                 f"(margin {margin:.3g})"))

    # --- noise: (Q1), (Q3) -------------------------------------------------
    if q0 <= 0.0:
        diagnostics.append(("(Q1)", f"noise amplitude q0 = {q0:g} must be positive"))
    if q_decay <= 1.5:
        diagnostics.append(
            ("(Q1)", f"noise decay exponent {q_decay:g} <= 1.5 leaves "
             "sum alpha_k q_k^2 divergent in the large-n limit"))
    if n_bar < 1 or n_bar > n_modes:
        diagnostics.append(("(Q3)", f"n_bar = {n_bar} outside [1, n_modes]"))
    if diagnostics:
        return None, diagnostics

    domain = Domain(length=length, n_modes=n_modes, n_quad=n_quad)
    noise = Noise.power_law(n_modes, q0=q0, decay=q_decay, n_bar=n_bar)
    gap = kappa * float(domain.eigenvalues[n_bar - 1])
    if gap <= potential.a_phi:
        diagnostics.append(
            ("(Q3)", f"damped spectral gap kappa*alpha_{n_bar} = {gap:.6g} does not "
             f"exceed sup phi' = {potential.a_phi:g}; coupling has no contraction "
             "margin"))
    if np.any(noise.q[:n_bar] <= 0.0):
        diagnostics.append(
            ("(Q3)", f"noise must act on every mode up to n_bar = {n_bar}"))
    if diagnostics:
        return None, diagnostics

    # The exact kernel-average reduction only applies to the exponential
    # family; tabulated kernels fall back to the transported history grid.
    backend = EXP_REDUCTION if kernel.is_exponential else GRID
    system = SystemSpec(domain=domain, kappa=kappa, kernel=kernel,
                        potential=potential, noise=noise,
                        memory_backend=backend)
    solver = SolverConfig(dt=dt, seed=seed, record_every=record_every)
    cfg = ExperimentConfig(
        experiment=experiment, system=system, solver=solver, epsilons=epsilons,
        n_traj=n_traj, horizon=horizon, burn_in=burn_in, averaging=averaging,
        cap_scale=cap_scale, beta=beta, workers=workers,
        out_dir=overrides.get("out_dir"),
    )
    return cfg, []


def validate_config(path, experiment: str = "sweep", overrides: dict | None = None):
    """File-path variant of validate_text."""
    with open(path) as fh:
        text = fh.read()
    return validate_text(text, experiment=experiment, overrides=overrides)
