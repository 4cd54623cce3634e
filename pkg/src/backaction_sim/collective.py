"""Reduction of an atomic ensemble to the single collective mode that couples
to the cavity.

For atoms at equilibrium positions z_i the cavity senses the weighted sum
Z = N_eff^-1 sum_i sin(2 k_p z_i) dz_i with N_eff = sum_i sin^2(2 k_p z_i),
equivalent to the centre of mass of N_eff atoms sitting at points of maximum
position sensitivity. The ``uniform`` ensemble tag takes the continuum limit
in which both sin^2 averages equal 1/2.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .constants import HBAR, TWO_PI
from .errors import ValidationError
from .params import PhysicalParams, derive

DECOUPLED_WARNING = "collective mode is decoupled from the cavity (N_eff = 0)"


@dataclass(frozen=True)
class AtomicEnsemble:
    """Atom count plus equilibrium positions along the cavity axis.

    ``positions is None`` selects the analytic uniform distribution (atoms
    spread evenly over the standing wave); otherwise ``positions`` holds one
    coordinate per atom in metres.
    """

    n_atoms: int
    positions: np.ndarray | None = None

    def __post_init__(self):
        if self.n_atoms < 0:
            raise ValidationError("n_atoms must be non-negative")
        if self.positions is not None:
            pos = np.asarray(self.positions, dtype=float)
            object.__setattr__(self, "positions", pos)
            if pos.ndim != 1 or len(pos) != self.n_atoms:
                raise ValidationError(
                    f"positions length {pos.size} does not match n_atoms {self.n_atoms}"
                )

    @property
    def is_uniform(self) -> bool:
        return self.positions is None

    def validate_in_cavity(self, params: PhysicalParams) -> None:
        if self.positions is not None and len(self.positions):
            half = params.cavity_length / 2.0
            if np.abs(self.positions).max() >= half:
                raise ValidationError("ensemble positions must satisfy |z| < cavity_length/2")

    @staticmethod
    def uniform(n_atoms: int) -> "AtomicEnsemble":
        return AtomicEnsemble(n_atoms=n_atoms)

    @staticmethod
    def from_positions(positions) -> "AtomicEnsemble":
        pos = np.asarray(positions, dtype=float)
        return AtomicEnsemble(n_atoms=len(pos), positions=pos)

    @staticmethod
    def lattice(n_atoms: int, n_sites: int, params: PhysicalParams,
                offset: float = 0.0) -> "AtomicEnsemble":
        """Place equal atom numbers on ``n_sites`` consecutive trap antinodes
        (spacing lambda_t/2), shifted by ``offset`` metres relative to the
        probe standing wave. The trap/probe registration is not fixed by the
        apparatus, hence the explicit offset."""
        if n_sites <= 0:
            raise ValidationError("n_sites must be positive")
        site_spacing = params.lambda_t / 2.0
        sites = (np.arange(n_sites) - (n_sites - 1) / 2.0) * site_spacing + offset
        per_site, leftover = divmod(n_atoms, n_sites)
        counts = np.full(n_sites, per_site, dtype=int)
        counts[:leftover] += 1
        return AtomicEnsemble.from_positions(np.repeat(sites, counts))

    @staticmethod
    def grid(n_atoms: int, span: float, center: float = 0.0) -> "AtomicEnsemble":
        """Uniform grid of ``n_atoms`` positions covering ``span`` metres;
        useful as the explicit-position limit of the uniform distribution."""
        pos = center + (np.arange(n_atoms) + 0.5) / n_atoms * span - span / 2.0
        return AtomicEnsemble.from_positions(pos)


@dataclass(frozen=True)
class CollectiveMode:
    """Mode-level quantities for one ensemble at one drive strength.

    ``resonance_shift`` is the drive-shifted resonance relative to the bare
    cavity, i.e. omega_c' - omega_c, so no absolute optical frequency is
    carried around.
    """

    n_atoms: int
    n_eff: float
    delta_N: float          # rad/s
    z_ho: float             # m
    p_ho: float             # kg m/s
    epsilon: float          # dimensionless granularity
    f0: float               # N, signed single-photon force
    nbar: float             # drive photon number the mode was built for
    resonance_shift: float  # rad/s, omega_c' - omega_c


def effective_atom_number(ensemble: AtomicEnsemble, params: PhysicalParams) -> float:
    """N_eff = sum_i sin^2(2 k_p z_i); N/2 for the uniform tag."""
    if ensemble.is_uniform:
        return ensemble.n_atoms / 2.0
    ensemble.validate_in_cavity(params)
    if ensemble.n_atoms == 0:
        return 0.0
    k_p = TWO_PI / params.lambda_p
    return float(np.sum(np.sin(2.0 * k_p * ensemble.positions) ** 2))


def cavity_shift(ensemble: AtomicEnsemble, params: PhysicalParams) -> float:
    """Dispersive cavity shift Delta_N = sum_i g0^2 sin^2(k_p z_i)/delta_ca;
    N g0^2/(2 delta_ca) for the uniform tag."""
    if ensemble.is_uniform:
        return ensemble.n_atoms * params.g0**2 / (2.0 * params.delta_ca)
    ensemble.validate_in_cavity(params)
    if ensemble.n_atoms == 0:
        return 0.0
    k_p = TWO_PI / params.lambda_p
    g_sq = params.g0**2 * np.sin(k_p * ensemble.positions) ** 2
    return float(np.sum(g_sq) / params.delta_ca)


def atoms_from_shift(delta_N: float, params: PhysicalParams) -> float:
    """Invert the uniform-distribution cavity shift: N = 2 delta_ca Delta_N/g0^2.

    ``delta_N`` must carry the same sign as ``delta_ca`` (or be zero).
    """
    if delta_N != 0.0 and np.sign(delta_N) != np.sign(params.delta_ca):
        raise ValidationError(
            "delta_N and delta_ca must have the same sign for the uniform inversion"
        )
    return 2.0 * params.delta_ca * delta_N / params.g0**2


def oscillator_length(n_eff: float, params: PhysicalParams) -> float:
    """Collective zero-point length Z_ho = sqrt(hbar/(2 m omega_z N_eff))."""
    if n_eff <= 0:
        raise ValidationError("oscillator length undefined for N_eff <= 0")
    return float(np.sqrt(HBAR / (2.0 * params.mass * params.omega_z * n_eff)))


def granularity(ensemble: AtomicEnsemble, params: PhysicalParams) -> float:
    """Granularity epsilon = N_eff |f0| Z_ho / (hbar kappa).

    Quantifies the single-photon impulse against the zero-point momentum
    spread; epsilon << 1 is the coarse-grained (non-granular) regime. An
    ensemble with N_eff = 0 is decoupled: returns 0 with a warning rather
    than raising.
    """
    n_eff = effective_atom_number(ensemble, params)
    if n_eff == 0:
        warnings.warn(DECOUPLED_WARNING, stacklevel=2)
        return 0.0
    f0 = derive(params).f0
    z_ho = oscillator_length(n_eff, params)
    return n_eff * abs(f0) * z_ho / (HBAR * params.kappa)


def static_displacement(nbar: float, params: PhysicalParams) -> float:
    """Mean displacement of the collective coordinate under nbar photons:
    DeltaZ = (hbar k_p g0^2 / (m omega_z^2 delta_ca)) nbar.

    The wavevector here is the probe wavevector k_p; the sign follows
    delta_ca.
    """
    if nbar < 0:
        raise ValidationError("nbar must be non-negative")
    f0 = derive(params).f0
    return f0 * nbar / (params.mass * params.omega_z**2)


def shifted_resonance(ensemble: AtomicEnsemble, nbar: float, params: PhysicalParams) -> float:
    """Drive-shifted resonance relative to the bare cavity:
    omega_c' - omega_c = Delta_N - N_eff f0 DeltaZ / hbar."""
    delta_N = cavity_shift(ensemble, params)
    n_eff = effective_atom_number(ensemble, params)
    if n_eff == 0:
        return delta_N
    f0 = derive(params).f0
    return delta_N - n_eff * f0 * static_displacement(nbar, params) / HBAR


def build_mode(ensemble: AtomicEnsemble, params: PhysicalParams, nbar: float = 0.0) -> CollectiveMode:
    """Assemble every mode-level quantity for an ensemble at drive ``nbar``."""
    if nbar < 0:
        raise ValidationError("nbar must be non-negative")
    ensemble.validate_in_cavity(params)
    n_eff = effective_atom_number(ensemble, params)
    delta_N = cavity_shift(ensemble, params)
    f0 = derive(params).f0
    if n_eff > 0:
        z_ho = oscillator_length(n_eff, params)
        p_ho = HBAR / (2.0 * z_ho)
        epsilon = n_eff * abs(f0) * z_ho / (HBAR * params.kappa)
        shift = delta_N - n_eff * f0 * static_displacement(nbar, params) / HBAR
    else:
        z_ho = float("inf")
        p_ho = 0.0
        epsilon = 0.0
        shift = delta_N
    return CollectiveMode(
        n_atoms=ensemble.n_atoms, n_eff=n_eff, delta_N=delta_N, z_ho=z_ho,
        p_ho=p_ho, epsilon=epsilon, f0=f0, nbar=nbar, resonance_shift=shift,
    )


def photon_resonance_pull(mode: CollectiveMode, params: PhysicalParams) -> float:
    """Resonance pull per intracavity photon, N_eff f0^2/(hbar m omega_z^2)
    in rad/s; the coefficient behind optical bistability."""
    return mode.n_eff * mode.f0**2 / (HBAR * params.mass * params.omega_z**2)


# --- serialization ------------------------------------------------------------

def ensemble_to_csv(ensemble: AtomicEnsemble) -> str:
    """CSV with columns ``index,z_m``; 17 significant digits so positions
    survive a text round trip bit-exactly. Uniform ensembles encode the tag
    in a header comment."""
    lines = [f"# n_atoms={ensemble.n_atoms}", f"# uniform={int(ensemble.is_uniform)}",
             "index,z_m"]
    if not ensemble.is_uniform:
        lines.extend(f"{i},{z:.17g}" for i, z in enumerate(ensemble.positions))
    return "\n".join(lines) + "\n"


def ensemble_from_csv(text: str) -> AtomicEnsemble:
    n_atoms = None
    uniform = None
    positions = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            key, _, value = line.lstrip("# ").partition("=")
            if key == "n_atoms":
                n_atoms = int(value)
            elif key == "uniform":
                uniform = bool(int(value))
            continue
        if line == "index,z_m":
            continue
        _, _, z = line.partition(",")
        positions.append(float(z))
    if n_atoms is None or uniform is None:
        raise ValidationError("ensemble CSV is missing its header block")
    if uniform:
        return AtomicEnsemble.uniform(n_atoms)
    return AtomicEnsemble(n_atoms=n_atoms, positions=np.asarray(positions))
