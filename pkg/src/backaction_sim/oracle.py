"""Independent numerical verification of the closed-form results.

Three oracles live here:

* a stochastic one: photon-number fluctuations synthesized as a complex
  Ornstein-Uhlenbeck process with pole (i Delta - kappa), driving a kicked
  collective oscillator whose diffusive energy growth is compared against
  the spectral prediction;
* a deterministic one: fixed-step RK4 integration of the coupled mean-field
  equations for the cavity amplitude and the collective coordinate;
* quadrature cross-checks: the Fourier-transform identity between the
  two-time correlation and the noise spectrum, and the whiteness of the
  transmitted field's commutator kernel.

A classical noise trajectory is real-valued, so its periodogram can only
reproduce the *symmetrized* spectrum [S_nn(w) + S_nn(-w)]/2; the quantum
asymmetry S_nn(-w_z) - S_nn(+w_z) (cooling vs anti-cooling) is a
normal-ordering effect validated analytically through the FT check instead.
All trajectory ensembles are keyed by (seed, trajectory index) through a
counter-based Philox generator, so results are bit-reproducible and
independent of how trajectories are distributed over threads.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy import integrate

from .collective import CollectiveMode
from .constants import HBAR
from .errors import ConfigError, NumericError, ValidationError
from .params import PhysicalParams
from .spectra import NoiseSpectrum, lorentzian_response, photon_noise_spectrum

GRANULAR_EPSILON_LIMIT = 0.5
DEFAULT_MECHANICAL_Q = 40.0


@dataclass(frozen=True)
class TrajectoryConfig:
    """Ensemble-run configuration; ``dt`` must resolve both the cavity and
    the trap timescale (dt < 0.1/kappa and dt < 0.1/omega_z)."""

    seed: int
    n_trajectories: int
    dt: float
    duration: float

    def validate(self, kappa: float, omega_z: float) -> None:
        if self.n_trajectories < 1:
            raise ConfigError("n_trajectories must be at least 1")
        if not 0 < self.dt < 0.1 / kappa:
            raise ConfigError(f"dt = {self.dt:g} s must satisfy 0 < dt < 0.1/kappa")
        if self.dt >= 0.1 / omega_z:
            raise ConfigError(f"dt = {self.dt:g} s must satisfy dt < 0.1/omega_z")
        if self.duration < self.dt:
            raise ConfigError("duration must cover at least one step")

    @property
    def n_steps(self) -> int:
        return int(round(self.duration / self.dt))


@dataclass(frozen=True)
class EnsembleEstimate:
    """Monte Carlo mean with its standard error."""

    mean: float
    stderr: float
    n_samples: int

    def __post_init__(self):
        if self.stderr < 0:
            raise ValidationError("stderr must be non-negative")


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent, splittable stream for one trajectory."""
    key = np.array([np.uint64(seed & 0xFFFFFFFFFFFFFFFF), np.uint64(index)],
                   dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))


def _thread_map(fn: Callable[[int], None], n_items: int, n_threads: int | None) -> None:
    """Run fn(i) for every i, optionally across threads. Each call writes to
    a distinct slot of a preallocated array, so the schedule cannot change
    the result."""
    if not n_threads or n_threads <= 1:
        for i in range(n_items):
            fn(i)
        return
    with ThreadPoolExecutor(max_workers=n_threads) as pool:
        list(pool.map(fn, range(n_items)))


# --- synthesized photon noise -------------------------------------------------

def synthesize_photon_noise(config: TrajectoryConfig, nbar: float, Delta: float,
                            kappa: float, omega_z: float | None = None,
                            n_threads: int | None = None):
    """Stationary photon-number fluctuation trajectories delta_n(t).

    A complex Gaussian process z is generated by the exact one-step update
    z -> z e^{(i Delta - kappa) dt} + xi with <|xi|^2> = nbar(1 - e^{-2 kappa dt}),
    so its correlation <z(t+tau) z*(t)> = nbar e^{(i Delta - kappa) tau} holds
    with no discretization error. The returned real process sqrt(2) Re z has
    correlation nbar cos(Delta tau) e^{-kappa|tau|}, i.e. C(0) = nbar and the
    symmetrized spectrum.

    Returns ``(times, dn)`` with ``dn`` of shape (n_trajectories, n_steps).
    """
    if nbar < 0:
        raise ValidationError("nbar must be non-negative")
    config.validate(kappa, omega_z if omega_z is not None else kappa)
    n_steps = config.n_steps
    n_traj = config.n_trajectories
    xi = np.empty((n_traj, n_steps), dtype=complex)
    z0 = np.empty(n_traj, dtype=complex)
    drive_sd = np.sqrt(nbar * (1.0 - np.exp(-2.0 * kappa * config.dt)) / 2.0)
    start_sd = np.sqrt(nbar / 2.0)

    def fill(i):
        rng = trajectory_rng(config.seed, i)
        z0[i] = (rng.standard_normal() + 1j * rng.standard_normal()) * start_sd
        draws = rng.standard_normal((2, n_steps))
        xi[i] = (draws[0] + 1j * draws[1]) * drive_sd

    _thread_map(fill, n_traj, n_threads)

    decay = np.exp((1j * Delta - kappa) * config.dt)
    dn = np.empty((n_traj, n_steps))
    z = z0
    for k in range(n_steps):
        dn[:, k] = np.sqrt(2.0) * z.real
        z = z * decay + xi[:, k]
    times = np.arange(n_steps) * config.dt
    return times, dn


def estimate_noise_spectrum(config: TrajectoryConfig, nbar: float, Delta: float,
                            kappa: float, omega_max: float | None = None,
                            n_threads: int | None = None) -> NoiseSpectrum:
    """Ensemble-averaged periodogram of the synthesized noise, as a
    :class:`NoiseSpectrum` tagged ``oracle`` with per-point standard errors.

    The estimate converges to the symmetrized spectrum; restrict comparisons
    to |omega| <= omega_max (default 5 kappa).
    """
    if omega_max is None:
        omega_max = 5.0 * kappa
    _, dn = synthesize_photon_noise(config, nbar, Delta, kappa, n_threads=n_threads)
    n_steps = dn.shape[1]
    freqs = 2.0 * np.pi * np.fft.fftfreq(n_steps, config.dt)
    periodograms = (np.abs(np.fft.fft(dn, axis=1)) ** 2) * config.dt / n_steps
    sel = np.abs(freqs) <= omega_max
    order = np.argsort(freqs[sel])
    grid = freqs[sel][order]
    mean = periodograms[:, sel].mean(axis=0)[order]
    stderr = periodograms[:, sel].std(axis=0, ddof=1)[order] / np.sqrt(dn.shape[0])
    return NoiseSpectrum(grid=grid, values=mean, provenance="oracle", stderr=stderr)


# --- kicked oscillator ----------------------------------------------------------

def _check_linear_growth(t: np.ndarray, y: np.ndarray) -> None:
    """Reject ensembles whose mean energy growth has a statistically
    significant and material quadratic component (the short-time linear
    ansatz would then be violated and the window should be shortened)."""
    A = np.vstack([np.ones_like(t), t, t * t]).T
    coef, res, rank, _ = np.linalg.lstsq(A, y, rcond=None)
    dof = len(t) - 3
    if dof <= 0 or not len(res):
        return
    sigma2 = res[0] / dof
    cov = sigma2 * np.linalg.inv(A.T @ A)
    t_stat = abs(coef[2]) / np.sqrt(cov[2, 2]) if cov[2, 2] > 0 else 0.0
    span = t[-1] - t[0]
    material = abs(coef[2]) * span**2 > 0.10 * abs(coef[1]) * span
    if t_stat > 5.0 and material:
        raise NumericError(
            "ensemble energy growth is significantly nonlinear over the fit "
            "window; shorten the trajectory duration"
        )


def kicked_oscillator_heating(config: TrajectoryConfig, nbar: float, Delta: float,
                              mode: CollectiveMode, params: PhysicalParams,
                              n_threads: int | None = None,
                              transient: float | None = None) -> EnsembleEstimate:
    """Monte Carlo estimate of the diffusive heating rate dE/dt (watts) of the
    collective oscillator kicked by photon-number noise.

    The oscillator starts at rest and evolves under
    d(alpha)/dt = -i omega_z alpha + i kappa epsilon dn(t) (equivalently a
    force (hbar/Z_ho) kappa epsilon dn on the momentum), integrated with an
    exponential-rotation trapezoidal step; E = hbar omega_z |alpha|^2. The
    expected rate for the synthesized (symmetrized) noise is
    hbar omega_z kappa^2 epsilon^2 [S_nn(w_z) + S_nn(-w_z)]/2.
    """
    if mode.epsilon > GRANULAR_EPSILON_LIMIT:
        raise ValidationError(
            f"epsilon = {mode.epsilon:.3f} exceeds {GRANULAR_EPSILON_LIMIT}; "
            "the coarse-grained treatment is outside its validated regime"
        )
    kappa, omega_z = params.kappa, params.omega_z
    times, dn = synthesize_photon_noise(config, nbar, Delta, kappa, omega_z,
                                        n_threads=n_threads)
    if mode.epsilon == 0.0:
        return EnsembleEstimate(mean=0.0, stderr=0.0, n_samples=config.n_trajectories)

    n_steps = dn.shape[1]
    rot = np.exp(-1j * omega_z * config.dt)
    half_kick = 0.5j * kappa * mode.epsilon * config.dt
    alpha = np.zeros(config.n_trajectories, dtype=complex)
    energies = np.empty_like(dn)
    energies[:, 0] = 0.0
    for k in range(n_steps - 1):
        alpha = rot * (alpha + half_kick * dn[:, k]) + half_kick * dn[:, k + 1]
        energies[:, k + 1] = alpha.real**2 + alpha.imag**2

    if transient is None:
        transient = min(10.0 / kappa, 0.25 * config.duration)
    i0 = int(round(transient / config.dt))
    i0 = min(max(i0, 0), n_steps - 2)
    _check_linear_growth(times[i0:], energies[:, i0:].mean(axis=0))
    slopes = (energies[:, -1] - energies[:, i0]) / (times[-1] - times[i0])
    scale = HBAR * omega_z
    mean = float(slopes.mean()) * scale
    stderr = float(slopes.std(ddof=1) / np.sqrt(len(slopes))) * scale if len(slopes) > 1 else 0.0
    return EnsembleEstimate(mean=mean, stderr=stderr, n_samples=config.n_trajectories)


def symmetrized_heating_prediction(nbar: float, Delta: float, mode: CollectiveMode,
                                   params: PhysicalParams) -> float:
    """Closed-form target for :func:`kicked_oscillator_heating` (watts)."""
    s_sym = 0.5 * (photon_noise_spectrum(params.omega_z, nbar, Delta, params.kappa)
                   + photon_noise_spectrum(-params.omega_z, nbar, Delta, params.kappa))
    return HBAR * params.omega_z * params.kappa**2 * mode.epsilon**2 * s_sym


# --- mean-field dynamics ----------------------------------------------------------

@dataclass(frozen=True)
class DriveSchedule:
    """Constant-amplitude coherent drive with a (possibly time-dependent)
    probe detuning from the bare cavity."""

    nbar_max: float
    delta_pc: float | Callable[[float], float]

    def detuning(self, t: float) -> float:
        return self.delta_pc(t) if callable(self.delta_pc) else self.delta_pc


@dataclass(frozen=True)
class MeanfieldTrajectory:
    times: np.ndarray
    re_b: np.ndarray
    im_b: np.ndarray
    z: np.ndarray       # collective coordinate, m
    p: np.ndarray       # collective momentum, kg m/s
    work: np.ndarray    # cumulative optical work on the oscillator, J

    @property
    def nbar(self) -> np.ndarray:
        return self.re_b**2 + self.im_b**2


def meanfield_integrate(config: TrajectoryConfig, drive: DriveSchedule,
                        mode: CollectiveMode, params: PhysicalParams,
                        initial_state=(0j, 0.0, 0.0),
                        mechanical_q: float | None = DEFAULT_MECHANICAL_Q,
                        record_every: int = 1) -> MeanfieldTrajectory:
    """Fixed-step RK4 integration of the noiseless (expectation-value)
    dynamics of the cavity amplitude b and the collective coordinate:

        db/dt = (i delta(t, Z) - kappa) b + sqrt(2 kappa) b_in
        dZ/dt = P / (N_eff m)
        dP/dt = -N_eff m omega_z^2 Z + N_eff f0 |b|^2 - gamma_m P

    with delta(t, Z) = delta_pc(t) - Delta_N + N_eff f0 Z / hbar in the
    probe frame and gamma_m = omega_z / Q (``mechanical_q=None`` disables
    damping). The cumulative work of the optical force on the oscillator is
    integrated alongside the state so that energy-balance checks hold to the
    integrator's own accuracy. Diverging energy aborts with
    :class:`NumericError` (step size too large for the detuning scale).
    """
    kappa, omega_z = params.kappa, params.omega_z
    config.validate(kappa, omega_z)
    if drive.nbar_max < 0:
        raise ValidationError("nbar_max must be non-negative")
    if mode.n_eff <= 0:
        raise ValidationError("mean-field dynamics require a coupled mode (N_eff > 0)")
    gamma_m = omega_z / mechanical_q if mechanical_q else 0.0
    m_eff = mode.n_eff * params.mass
    kf0 = mode.n_eff * mode.f0
    spring = m_eff * omega_z**2
    drive_amp = np.sqrt(2.0 * kappa) * np.sqrt(kappa * drive.nbar_max / 2.0)
    delta_n = mode.delta_N
    dt = config.dt
    n_steps = config.n_steps

    b, z, p = initial_state
    b = complex(b)
    w = 0.0
    energy_bound = 1e12 * max(HBAR * omega_z, spring * (1e-6) ** 2) * max(1.0, drive.nbar_max)

    def deriv(t, b, z, p):
        delta = drive.detuning(t) - delta_n + kf0 * z / HBAR
        db = (1j * delta - kappa) * b + drive_amp
        dz = p / m_eff
        force = kf0 * (b.real * b.real + b.imag * b.imag)
        dp = -spring * z + force - gamma_m * p
        dw = force * dz
        return db, dz, dp, dw

    n_rec = (n_steps + record_every - 1) // record_every
    out = np.empty((n_rec, 6))
    j = 0
    for k in range(n_steps):
        t = k * dt
        if k % record_every == 0:
            out[j] = (t, b.real, b.imag, z, p, w)
            j += 1
        k1 = deriv(t, b, z, p)
        k2 = deriv(t + dt / 2, b + dt / 2 * k1[0], z + dt / 2 * k1[1], p + dt / 2 * k1[2])
        k3 = deriv(t + dt / 2, b + dt / 2 * k2[0], z + dt / 2 * k2[1], p + dt / 2 * k2[2])
        k4 = deriv(t + dt, b + dt * k3[0], z + dt * k3[1], p + dt * k3[2])
        b += dt / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
        z += dt / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
        p += dt / 6 * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
        w += dt / 6 * (k1[3] + 2 * k2[3] + 2 * k3[3] + k4[3])
        energy = p * p / (2 * m_eff) + 0.5 * spring * z * z
        if not np.isfinite(energy) or energy > energy_bound:
            raise NumericError(
                f"mean-field integration diverged at t = {t:.3e} s; "
                "reduce dt relative to the largest detuning"
            )
    return MeanfieldTrajectory(times=out[:j, 0], re_b=out[:j, 1], im_b=out[:j, 2],
                               z=out[:j, 3], p=out[:j, 4], work=out[:j, 5])


def oscillator_energy(traj: MeanfieldTrajectory, mode: CollectiveMode,
                      params: PhysicalParams) -> np.ndarray:
    """Mechanical energy P^2/(2 N_eff m) + N_eff m omega_z^2 Z^2 / 2 along a
    mean-field trajectory."""
    m_eff = mode.n_eff * params.mass
    return traj.p**2 / (2 * m_eff) + 0.5 * m_eff * params.omega_z**2 * traj.z**2


def trajectory_to_csv(traj: MeanfieldTrajectory) -> str:
    """Columns ``t_s,re_b,im_b,z_m,p_si``."""
    rows = ["t_s,re_b,im_b,z_m,p_si"]
    rows.extend(
        f"{t:.17g},{rb:.17g},{ib:.17g},{zz:.17g},{pp:.17g}"
        for t, rb, ib, zz, pp in zip(traj.times, traj.re_b, traj.im_b, traj.z, traj.p)
    )
    return "\n".join(rows) + "\n"


# --- analytic cross-checks ---------------------------------------------------------

def output_whiteness_kernel(omega_grid, omega_c_prime: float, kappa: float) -> np.ndarray:
    """Frequency kernel of the transmitted-field commutator,
    2 kappa^2/(kappa^2 + d^2) - (L + L*) + 1 with d = omega - omega_c'.

    Identically 1: the Lorentzian photon-number dynamics inside the cavity
    cancels out of the output-field commutator, so transmitted shot noise
    stays white.
    """
    grid = np.asarray(omega_grid, dtype=float)
    d = grid - omega_c_prime
    L = lorentzian_response(grid, omega_c_prime, kappa)
    return 2.0 * kappa**2 / (kappa**2 + d**2) - 2.0 * L.real + 1.0


def spectrum_ft_check(nbar: float, Delta: float, kappa: float, omega_grid) -> float:
    """Worst-case relative error between the quadrature Fourier transform of
    the two-time correlation and the closed-form spectrum over the grid.

    The grid must stay within |omega| <= 10 kappa (beyond that the integrand
    oscillates too fast for the default quadrature budget to be meaningful).
    """
    grid = np.asarray(omega_grid, dtype=float)
    if np.any(np.abs(grid) > 10.0 * kappa):
        raise ValidationError("omega grid must satisfy |omega| <= 10 kappa")
    if nbar < 0:
        raise ValidationError("nbar must be non-negative")
    worst = 0.0
    for omega in grid:
        # FT(C) = 2 Re int_0^inf nbar e^{-kappa tau} e^{i(Delta+omega) tau} dtau,
        # computed in units of 1/kappa to keep the oscillatory rule conditioned
        val, err = integrate.quad(
            lambda s: np.exp(-s), 0.0, np.inf,
            weight="cos", wvar=(Delta + omega) / kappa,
        )
        val *= 2.0 * nbar / kappa
        if not np.isfinite(val):
            raise NumericError(f"FT quadrature failed at omega = {omega:g}")
        closed = photon_noise_spectrum(omega, nbar, Delta, kappa)
        worst = max(worst, abs(val - closed) / closed)
    return worst


def estimates_to_csv(rows: list[tuple[str, EnsembleEstimate, int]]) -> str:
    """Columns ``quantity,mean,stderr,n_samples,seed``."""
    out = ["quantity,mean,stderr,n_samples,seed"]
    out.extend(
        f"{name},{est.mean:.17g},{est.stderr:.17g},{est.n_samples},{seed}"
        for name, est, seed in rows
    )
    return "\n".join(out) + "\n"
