"""Closed-form cavity response, photon-number noise, heating rates, and
jitter-convolved lineshapes.

Conventions used throughout:

* ``L(omega) = 1/(1 - i(omega - omega_c')/kappa)`` is the cavity amplitude
  response; |L|^2 is the normalized Lorentzian transmission.
* ``S_nn(omega) = 2 nbar kappa / (kappa^2 + (Delta + omega)^2)`` is the
  spectral density of intracavity photon-number fluctuations (units of
  seconds, i.e. a density over angular frequency), with ``Delta`` the probe
  detuning from the atoms-and-drive-shifted resonance. It is the Fourier
  transform of the two-time correlation ``nbar exp(i Delta tau - kappa |tau|)``
  and is asymmetric in omega whenever Delta != 0.
* Detunings called ``delta_pc`` are measured from the bare cavity;
  detunings called ``Delta`` from the shifted resonance.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial.hermite import hermgauss
from scipy import integrate, optimize

from .collective import CollectiveMode, photon_resonance_pull
from .constants import HBAR
from .errors import NumericError, ValidationError
from .params import PhysicalParams, derive

GH_ORDERS = (16, 32, 64, 128, 256)
GH_RELTOL = 1e-6
FIXED_POINT_DAMPING = 0.5
FIXED_POINT_MAX_ITER = 10_000
OCCUPATION_WARN_THRESHOLD = 10.0


# --- elementary response / noise ----------------------------------------------

def lorentzian_response(omega, omega_c_prime, kappa):
    """Complex cavity amplitude response L(omega); kappa > 0 required."""
    if kappa <= 0:
        raise ValidationError("kappa must be positive")
    return 1.0 / (1.0 - 1j * (np.asarray(omega) - omega_c_prime) / kappa)


def photon_noise_spectrum(omega, nbar, Delta, kappa):
    """Photon-number noise spectral density S_nn(omega), in seconds."""
    if nbar < 0:
        raise ValidationError("nbar must be non-negative")
    if kappa <= 0:
        raise ValidationError("kappa must be positive")
    return 2.0 * nbar * kappa / (kappa**2 + (Delta + np.asarray(omega)) ** 2)


def two_time_correlation(tau, nbar, Delta, kappa):
    """Stationary photon-number correlation <n(tau) n(0)> - nbar^2.

    Equals ``nbar exp(i Delta tau - kappa |tau|)``; the tau < 0 side is the
    conjugate-symmetric extension C(-tau) = C(tau)*.
    """
    if nbar < 0:
        raise ValidationError("nbar must be non-negative")
    tau = np.asarray(tau, dtype=float)
    return nbar * np.exp(1j * Delta * tau - kappa * np.abs(tau))


# --- heating rates --------------------------------------------------------------

@dataclass(frozen=True)
class HeatingRates:
    """Per-atom heating rates in watts and their ratio R/R_fs = 1 + R_c/R_fs."""

    r_c: float
    r_fs: float
    ratio: float


def freespace_heating(nbar, params: PhysicalParams) -> float:
    """Free-space diffusive heating rate per atom in a standing wave,
    R_fs = (f0^2/2m)(nbar/kappa)(1/C)."""
    if nbar < 0:
        raise ValidationError("nbar must be non-negative")
    d = derive(params)
    return (d.f0**2 / (2.0 * params.mass)) * (nbar / params.kappa) / d.cooperativity_C


def backaction_heating(nbar, Delta, mode: CollectiveMode, params: PhysicalParams) -> float:
    """Backaction heating rate per atom,
    R_c = hbar omega_z kappa^2 epsilon^2 S_nn(-omega_z) / N.

    For a uniform ensemble this reduces identically to
    R_fs * C / (1 + (Delta - omega_z)^2/kappa^2).
    """
    if mode.n_atoms <= 0:
        raise ValidationError("per-atom rate undefined for an empty ensemble")
    s_minus = photon_noise_spectrum(-params.omega_z, nbar, Delta, params.kappa)
    return HBAR * params.omega_z * params.kappa**2 * mode.epsilon**2 * s_minus / mode.n_atoms


def heating_rates(nbar, Delta, mode: CollectiveMode, params: PhysicalParams) -> HeatingRates:
    r_fs = freespace_heating(nbar, params)
    r_c = backaction_heating(nbar, Delta, mode, params)
    return HeatingRates(r_c=r_c, r_fs=r_fs, ratio=1.0 + r_c / r_fs if r_fs > 0 else 1.0)


def occupation_rate(occupation, nbar, Delta, mode: CollectiveMode,
                    params: PhysicalParams,
                    warn_threshold: float = OCCUPATION_WARN_THRESHOLD) -> float:
    """Growth rate of the collective-mode occupation,
    d<a+a>/dt = kappa^2 eps^2 [S_nn(-w_z) + (S_nn(-w_z) - S_nn(+w_z)) <a+a>].

    The linearized form holds for small occupations; a warning is emitted
    above ``warn_threshold``.
    """
    if occupation < 0:
        raise ValidationError("occupation must be non-negative")
    if occupation > warn_threshold:
        warnings.warn(
            f"occupation {occupation:g} exceeds the small-occupation regime "
            f"(threshold {warn_threshold:g}); the linearized rate may not apply",
            stacklevel=2,
        )
    s_minus = photon_noise_spectrum(-params.omega_z, nbar, Delta, params.kappa)
    s_plus = photon_noise_spectrum(+params.omega_z, nbar, Delta, params.kappa)
    k2e2 = params.kappa**2 * mode.epsilon**2
    return k2e2 * (s_minus + (s_minus - s_plus) * occupation)


# --- noise-spectrum container ---------------------------------------------------

@dataclass(frozen=True)
class NoiseSpectrum:
    """Frequency grid plus S_nn values, tagged with their provenance
    (``analytic`` or ``oracle``; oracle spectra carry per-point standard
    errors)."""

    grid: np.ndarray
    values: np.ndarray
    provenance: str
    stderr: np.ndarray | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        values = np.asarray(self.values, dtype=float)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "values", values)
        if self.provenance not in ("analytic", "oracle"):
            raise ValidationError("provenance must be 'analytic' or 'oracle'")
        if grid.shape != values.shape:
            raise ValidationError("grid and values must have matching shapes")
        if np.any(np.diff(grid) <= 0):
            raise ValidationError("grid must be strictly increasing")
        if np.any(values < 0):
            raise ValidationError("spectral densities must be non-negative")
        if self.provenance == "oracle":
            if self.stderr is None:
                raise ValidationError("oracle spectra must carry standard errors")
            object.__setattr__(self, "stderr", np.asarray(self.stderr, dtype=float))


def analytic_spectrum(omega_grid, nbar, Delta, kappa) -> NoiseSpectrum:
    grid = np.asarray(omega_grid, dtype=float)
    return NoiseSpectrum(grid=grid, values=photon_noise_spectrum(grid, nbar, Delta, kappa),
                         provenance="analytic")


def spectrum_to_csv(spectrum: NoiseSpectrum) -> str:
    """Columns ``omega_rad_s,value,stderr`` (stderr 0 for analytic spectra)."""
    err = spectrum.stderr if spectrum.stderr is not None else np.zeros_like(spectrum.values)
    rows = ["omega_rad_s,value,stderr"]
    rows.extend(
        f"{w:.17g},{v:.17g},{e:.17g}"
        for w, v, e in zip(spectrum.grid, spectrum.values, err)
    )
    return "\n".join(rows) + "\n"


# --- self-consistent intracavity photon number ----------------------------------
#
# The drive displaces the collective coordinate, pulling the resonance by
# ``pull = N_eff f0^2/(hbar m omega_z^2)`` per photon, so the steady photon
# number solves  n = nbar_max / (1 + ((x + pull*n)/kappa)^2)  with
# x = delta_pc - Delta_N. For strong enough drive the solution is multivalued
# (optical bistability) and a sweep direction selects the branch.

SWEEP_UP = "sweep_up"
SWEEP_DOWN = "sweep_down"


def _steady_roots(x: float, nbar_max: float, pull: float, kappa: float) -> np.ndarray:
    """All physical roots of the steady-state cubic at detuning ``x``
    (relative to the zero-drive shifted resonance), sorted ascending."""
    if nbar_max == 0:
        return np.array([0.0])
    if pull == 0:
        return np.array([nbar_max / (1.0 + (x / kappa) ** 2)])
    u = x / kappa
    b = pull / kappa
    roots = np.roots([b**2, 2 * b * u, 1 + u**2, -nbar_max])
    real = roots[np.abs(roots.imag) <= 1e-9 * np.abs(roots).max()].real
    real = real[(real > 0) & (real <= nbar_max * (1 + 1e-9))]
    return np.sort(real)


def intracavity_branches(delta_pc: float, nbar_max: float, mode: CollectiveMode,
                         params: PhysicalParams) -> np.ndarray:
    """All steady intracavity photon numbers at ``delta_pc`` (from the bare
    cavity); more than one entry signals bistability."""
    pull = photon_resonance_pull(mode, params)
    return _steady_roots(delta_pc - mode.delta_N, nbar_max, pull, params.kappa)


def bistability_folds(nbar_max: float, mode: CollectiveMode,
                      params: PhysicalParams) -> list[float]:
    """Detunings (relative to the zero-drive shifted resonance) of the two
    saddle-node folds bounding the multivalued region; empty when the
    lineshape is single-valued everywhere."""
    pull = photon_resonance_pull(mode, params)
    kappa = params.kappa
    if pull <= 0 or nbar_max <= 0:
        return []

    def dxdn_zero(n):
        # fold condition: pull = kappa * nbar_max / (2 n^2 sqrt(nbar_max/n - 1))
        return kappa * nbar_max / (2.0 * n**2 * np.sqrt(nbar_max / n - 1.0)) - pull

    res = optimize.minimize_scalar(
        lambda lnn: dxdn_zero(np.exp(lnn)),
        bounds=(np.log(nbar_max) - 30.0, np.log(nbar_max * (1 - 1e-12))),
        method="bounded",
    )
    if res.fun >= 0:
        return []
    n_min = np.exp(res.x)
    lo = optimize.brentq(lambda lnn: dxdn_zero(np.exp(lnn)),
                         np.log(nbar_max) - 30.0, res.x)
    hi = optimize.brentq(lambda lnn: dxdn_zero(np.exp(lnn)),
                         res.x, np.log(nbar_max * (1 - 1e-12)))
    folds = []
    for n_f in (np.exp(lo), np.exp(hi)):
        folds.append(-pull * n_f - kappa * np.sqrt(nbar_max / n_f - 1.0))
    return sorted(folds)


def _branch_value(x: float, nbar_max: float, pull: float, kappa: float,
                  branch: str, folds: list[float]) -> float:
    """Branch-resolved steady photon number from the cubic roots."""
    roots = _steady_roots(x, nbar_max, pull, kappa)
    if len(roots) == 1:
        return float(roots[0])
    return float(roots[0]) if branch == SWEEP_UP else float(roots[-1])


def _damped_fixed_point(x: float, nbar_max: float, pull: float, kappa: float,
                        n0: float) -> float:
    n = n0
    for _ in range(FIXED_POINT_MAX_ITER):
        target = nbar_max / (1.0 + ((x + pull * n) / kappa) ** 2)
        n_new = n + FIXED_POINT_DAMPING * (target - n)
        if abs(n_new - n) <= 1e-13 * max(1.0, nbar_max):
            return n_new
        n = n_new
    residual = abs(nbar_max / (1.0 + ((x + pull * n) / kappa) ** 2) - n)
    raise NumericError(
        f"steady intracavity photon number did not converge after "
        f"{FIXED_POINT_MAX_ITER} iterations (residual {residual:.3e})"
    )


def steady_intracavity(delta_pc: float, nbar_max: float, mode: CollectiveMode,
                       params: PhysicalParams, branch: str = SWEEP_UP) -> float:
    """Self-consistent intracavity photon number at probe detuning
    ``delta_pc`` from the bare cavity.

    Solved by damped fixed-point iteration with continuation: the solver
    walks a detuning grid from far outside resonance toward ``delta_pc`` in
    the direction given by ``branch``, warm-starting each step, so the value
    returned is the one continuously connected to the stated sweep.
    """
    if nbar_max < 0:
        raise ValidationError("nbar_max must be non-negative")
    if branch not in (SWEEP_UP, SWEEP_DOWN):
        raise ValidationError(f"unknown branch {branch!r}")
    pull = photon_resonance_pull(mode, params)
    kappa = params.kappa
    x = delta_pc - mode.delta_N
    span = 20.0 * kappa + pull * nbar_max
    start = x - span if branch == SWEEP_UP else x + span
    n = 0.0
    for xi in np.linspace(start, x, 400):
        n = _damped_fixed_point(xi, nbar_max, pull, kappa, n)
    return n


def sweep_lineshape(delta_pc_grid, nbar_max: float, mode: CollectiveMode,
                    params: PhysicalParams, branch: str = SWEEP_UP) -> np.ndarray:
    """Branch-followed lineshape over a detuning grid: each point is the
    damped fixed point warm-started from its neighbour in sweep order."""
    grid = np.asarray(delta_pc_grid, dtype=float)
    if branch not in (SWEEP_UP, SWEEP_DOWN):
        raise ValidationError(f"unknown branch {branch!r}")
    pull = photon_resonance_pull(mode, params)
    order = range(len(grid)) if branch == SWEEP_UP else range(len(grid) - 1, -1, -1)
    out = np.empty_like(grid)
    n = steady_intracavity(grid[0 if branch == SWEEP_UP else -1], nbar_max, mode,
                           params, branch)
    for i in order:
        n = _damped_fixed_point(grid[i] - mode.delta_N, nbar_max, pull,
                                params.kappa, n)
        out[i] = n
    return out


# --- Gaussian jitter convolutions ------------------------------------------------

_GH_CACHE: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _gauss_hermite_mean(func, center: float, sigma: float,
                        reltol: float = GH_RELTOL) -> float:
    """<func(center + xi)> over xi ~ N(0, sigma^2) by Gauss-Hermite quadrature
    with order doubling until the relative change drops below ``reltol``.

    Hermite node generation overflows above order 256, and for integrand
    structure much narrower than sigma the ladder may stall there; in that
    case the mean falls back to adaptive Gauss-Kronrod quadrature of the
    explicitly Gaussian-weighted integrand (tails truncated at 8 sigma).
    """
    prev = None
    change = np.inf
    for order in GH_ORDERS:
        if order not in _GH_CACHE:
            _GH_CACHE[order] = hermgauss(order)
        nodes, weights = _GH_CACHE[order]
        val = float(np.sum(weights * func(center + np.sqrt(2.0) * sigma * nodes))
                    / np.sqrt(np.pi))
        if prev is not None:
            change = abs(val - prev)
            if change <= reltol * max(abs(val), 1e-300):
                return val
        prev = val

    norm = 1.0 / (sigma * np.sqrt(2.0 * np.pi))

    def integrand(x):
        return float(func(np.asarray([x]))[0]) * norm * np.exp(
            -((x - center) ** 2) / (2.0 * sigma**2))

    val2, err = integrate.quad(integrand, center - 8.0 * sigma, center + 8.0 * sigma,
                               limit=400, epsabs=1e-300, epsrel=0.1 * reltol)
    if not np.isfinite(val2) or err > reltol * max(abs(val2), 1e-300):
        raise NumericError(
            f"jitter average did not converge below {reltol:g} "
            f"(Gauss-Hermite change {change:.3e}, "
            f"adaptive estimate error {err:.3e})"
        )
    return val2


def voigt_transmission(delta_pc: float, nbar_max: float, mode: CollectiveMode,
                       params: PhysicalParams, branch: str = SWEEP_UP,
                       sigma: float | None = None) -> float:
    """Jitter-convolved mean intracavity photon number at nominal detuning
    ``delta_pc`` (from the bare cavity).

    The probe detuning jitters with Gaussian rms ``sigma`` (default: the
    configured ``sigma_jitter``) slowly compared with the cavity response,
    so the mean transmission is the Gaussian average of the self-consistent,
    branch-followed photon number. When the lineshape is bistable the
    integrand has a step at each fold; the integral is then split at the
    folds and each smooth piece handled by adaptive quadrature.
    """
    if sigma is None:
        sigma = params.sigma_jitter
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    if sigma == 0.0:
        return steady_intracavity(delta_pc, nbar_max, mode, params, branch)
    pull = photon_resonance_pull(mode, params)
    kappa = params.kappa
    x0 = delta_pc - mode.delta_N
    folds = bistability_folds(nbar_max, mode, params)
    if not folds:
        def f(xs):
            return np.array([
                _steady_roots(x, nbar_max, pull, kappa)[0] for x in np.atleast_1d(xs)
            ])
        return _gauss_hermite_mean(f, x0, sigma)

    lo, hi = x0 - 8.0 * sigma, x0 + 8.0 * sigma
    cuts = sorted({lo, hi} | {f for f in folds if lo < f < hi})
    total = 0.0
    norm = 1.0 / (sigma * np.sqrt(2.0 * np.pi))

    def integrand(x):
        n = _branch_value(x, nbar_max, pull, kappa, branch, folds)
        return n * norm * np.exp(-((x - x0) ** 2) / (2.0 * sigma**2))

    for a, b in zip(cuts[:-1], cuts[1:]):
        val, err = integrate.quad(integrand, a, b, limit=200, epsabs=1e-12,
                                  epsrel=1e-9)
        if not np.isfinite(val):
            raise NumericError(f"lineshape convolution failed on [{a:g}, {b:g}]")
        total += val
    return total


def effective_cooperativity(mode: CollectiveMode, params: PhysicalParams) -> float:
    """Peak backaction-to-free-space heating ratio, 2 (N_eff/N) C.

    Follows from R_c/R_fs = 2 (N_eff/N) C / (1 + (Delta - omega_z)^2/kappa^2);
    equals the single-atom cooperativity C for a uniform ensemble."""
    if mode.n_atoms <= 0:
        raise ValidationError("effective cooperativity undefined for an empty ensemble")
    return 2.0 * (mode.n_eff / mode.n_atoms) * derive(params).cooperativity_C


def jitter_averaged_heating(delta: float, coop_eff: float, params: PhysicalParams,
                            sigma: float | None = None,
                            reltol: float = GH_RELTOL) -> tuple[float, float]:
    """Gaussian-jitter averages (<nbar * r>, <nbar>) at detuning ``delta``
    from the displacement-corrected resonance.

    In this frame the transmission is the plain Lorentzian (normalized to 1
    on resonance) and the per-photon heating rate in units of the free-space
    rate is r(u) = 1 + coop_eff/(1 + (u - omega_z)^2/kappa^2). The fast
    jitter rides the instantaneous resonance, which the slow collective
    displacement tracks only on average.
    """
    if sigma is None:
        sigma = params.sigma_jitter
    if sigma < 0:
        raise ValidationError("sigma must be non-negative")
    kappa = params.kappa
    omega_z = params.omega_z

    def nbar_l(u):
        return 1.0 / (1.0 + (u / kappa) ** 2)

    def weighted(u):
        return nbar_l(u) * (1.0 + coop_eff / (1.0 + ((u - omega_z) / kappa) ** 2))

    if sigma == 0.0:
        return weighted(delta), nbar_l(delta)
    num = _gauss_hermite_mean(weighted, delta, sigma, reltol)
    den = _gauss_hermite_mean(nbar_l, delta, sigma, reltol)
    return num, den


def convolved_heating_per_photon(delta_pc: float, mode: CollectiveMode,
                                 params: PhysicalParams,
                                 sigma: float | None = None) -> float:
    """Reduction factor of the measured per-photon heating rate caused by
    probe-detuning jitter, at detuning ``delta_pc`` from the
    displacement-corrected resonance.

    Defined as the jitter-weighted per-photon rate <nbar r>/<nbar> divided
    by the unjittered rate r(delta_pc); equal to 1 for sigma = 0 at every
    detuning.
    """
    coop_eff = effective_cooperativity(mode, params)
    num, den = jitter_averaged_heating(delta_pc, coop_eff, params, sigma)
    bare_num, bare_den = jitter_averaged_heating(delta_pc, coop_eff, params, 0.0)
    return (num / den) / (bare_num / bare_den)
