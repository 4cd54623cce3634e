"""System parameters and derived cavity/atom quantities.

Internal convention: SI units with *angular* frequencies (rad/s) everywhere.
Configuration documents use ordinary frequencies in Hz; the ``_hz`` suffix on
a config key marks the conversion point, so a factor of 2*pi can never hide
inside a formula.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, fields, replace

from .constants import C_LIGHT, HBAR, K_B, RB87_MASS_KG, TWO_PI
from .errors import ConfigError, ValidationError

# Far-detuned validation cut: |delta_ca| must exceed this many g0.
FAR_DETUNED_FACTOR = 100.0


@dataclass(frozen=True)
class PhysicalParams:
    """All measured/configured constants of the atoms-cavity system.

    Angular frequencies in rad/s, lengths in m, energies in J. Defaults are
    the experimental operating point; ``delta_ca`` defaults to 2pi x 100 GHz
    (the value used for the resonant heating runs) and should be set
    explicitly in configs when a different detuning is intended.
    """

    g0: float = TWO_PI * 14.4e6            # single-atom coupling
    kappa: float = TWO_PI * 0.66e6         # cavity field half-linewidth
    gamma: float = TWO_PI * 3e6            # atomic half-linewidth
    omega_z: float = TWO_PI * 42e3         # axial trap frequency
    delta_ca: float = TWO_PI * 100e9       # atom-cavity detuning (signed)
    lambda_p: float = 780e-9               # probe wavelength
    lambda_t: float = 850e-9               # trap wavelength
    mass: float = RB87_MASS_KG
    trap_depth_U: float = 6.6e-6 * K_B     # trap depth as an energy
    temperature: float = 0.8e-6
    eta_det: float = 0.040                 # photon detection quantum efficiency
    sigma_jitter: float = TWO_PI * 1.1e6   # rms probe-detuning jitter
    gamma_bg: float = 0.9                  # background per-atom loss rate, 1/s
    mirror_loss_ppm: float = 3.8
    mirror_trans_ppm: float = 1.5
    cavity_length: float = 194e-6

    def __post_init__(self):
        violations = self.violations()
        if violations:
            raise ValidationError("invalid parameters: " + "; ".join(violations))

    def violations(self) -> list[str]:
        """Return every violated invariant (empty list when valid)."""
        out = []
        positive = [
            "g0", "kappa", "gamma", "omega_z", "lambda_p", "lambda_t", "mass",
            "trap_depth_U", "temperature", "gamma_bg", "mirror_loss_ppm",
            "mirror_trans_ppm", "cavity_length",
        ]
        for name in positive:
            if not object.__getattribute__(self, name) > 0:
                out.append(f"{name} must be strictly positive")
        if not 0.0 < self.eta_det <= 1.0:
            out.append("eta_det must lie in (0, 1]")
        if self.sigma_jitter < 0:
            out.append("sigma_jitter must be non-negative")
        if abs(self.delta_ca) <= FAR_DETUNED_FACTOR * self.g0:
            out.append(
                f"|delta_ca| = {abs(self.delta_ca):.3e} rad/s violates the "
                f"far-detuned requirement |delta_ca| > {FAR_DETUNED_FACTOR:.0f} g0"
            )
        return out


@dataclass(frozen=True)
class DerivedParams:
    """Quantities derived from :class:`PhysicalParams`."""

    cooperativity_C: float   # g0^2 / (2 kappa Gamma)
    kappa_from_mirrors: float  # rad/s, reconstructed from finesse and FSR
    k_p: float               # probe wavevector, 1/m
    k_t: float               # trap wavevector, 1/m
    f0: float                # single-photon dipole force hbar k_p g0^2/delta_ca, N (signed)


def derive(params: PhysicalParams) -> DerivedParams:
    """Compute cooperativity, wavevectors, the single-photon force, and the
    mirror-based half-linewidth.

    The mirror reconstruction uses FSR = c/(2L), finesse F = 2pi/(round-trip
    loss) with round-trip loss 2*(loss + trans) ppm, and converts the
    half-linewidth FSR/(2F) (in Hz) to rad/s.
    """
    fsr_hz = C_LIGHT / (2.0 * params.cavity_length)
    round_trip_loss = 2.0 * (params.mirror_loss_ppm + params.mirror_trans_ppm) * 1e-6
    finesse = TWO_PI / round_trip_loss
    kappa_mirrors = TWO_PI * fsr_hz / (2.0 * finesse)
    k_p = TWO_PI / params.lambda_p
    return DerivedParams(
        cooperativity_C=params.g0**2 / (2.0 * params.kappa * params.gamma),
        kappa_from_mirrors=kappa_mirrors,
        k_p=k_p,
        k_t=TWO_PI / params.lambda_t,
        f0=HBAR * k_p * params.g0**2 / params.delta_ca,
    )


# --- configuration documents -------------------------------------------------
#
# Flat UTF-8 ``key = value`` lines, '#' comments. Unit suffixes mark the
# conversion applied on load: _hz (ordinary Hz -> rad/s), _m (metres),
# _uk (microkelvin), _s (seconds), _kg (kilograms). A single document may
# also carry protocol keys consumed by :mod:`backaction_sim.experiment`;
# ``load_config`` accepts their presence but only reads the physical keys.

_HZ_KEYS = {
    "g0_hz": "g0",
    "kappa_hz": "kappa",
    "gamma_hz": "gamma",
    "omega_z_hz": "omega_z",
    "delta_ca_hz": "delta_ca",
    "sigma_jitter_hz": "sigma_jitter",
}
_M_KEYS = {
    "lambda_p_m": "lambda_p",
    "lambda_t_m": "lambda_t",
    "cavity_length_m": "cavity_length",
}
_UK_KEYS = {
    "trap_depth_uk": "trap_depth_U",   # converted via k_B
    "temperature_uk": "temperature",
}
_PLAIN_KEYS = {
    "mass_kg": "mass",
    "eta_det": "eta_det",
    "gamma_bg": "gamma_bg",
    "mirror_loss_ppm": "mirror_loss_ppm",
    "mirror_trans_ppm": "mirror_trans_ppm",
}

PHYSICAL_KEYS = frozenset(_HZ_KEYS) | frozenset(_M_KEYS) | frozenset(_UK_KEYS) | frozenset(_PLAIN_KEYS)

# Keys owned by the experiment-protocol schema; tolerated by load_config so
# one document can drive a whole pipeline run.
PROTOCOL_KEYS = frozenset({
    "n_initial", "delta_pc_hz", "nbar_max", "bin_time_s", "window_s",
    "equilibration_tau_s", "duration_s", "seed", "extra_loss", "substeps",
    "hold_delta_hz", "hold_nbar",
    # CLI operation knobs
    "spectrum_nbar", "spectrum_delta_hz", "grid_span_kappa", "grid_points",
    "curve_n_atoms", "curve_nbar_max", "oracle_n_trajectories",
})


def parse_document(text: str) -> dict[str, float]:
    """Parse a flat config document to a key -> float mapping.

    Raises :class:`ConfigError` naming the offending line/key on any syntax
    or number-format problem. Duplicate keys are rejected.
    """
    out: dict[str, float] = {}
    for lineno, raw in enumerate(io.StringIO(text), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            out[key] = float(value.strip())
        except ValueError:
            raise ConfigError(
                f"line {lineno}: key {key!r} has non-numeric value {value.strip()!r}"
            ) from None
    return out


def params_from_mapping(doc: dict[str, float]) -> PhysicalParams:
    """Build :class:`PhysicalParams` from a parsed document, applying unit
    conversions; keys absent from the document keep their defaults."""
    kwargs: dict[str, float] = {}
    for key, value in doc.items():
        if key in _HZ_KEYS:
            kwargs[_HZ_KEYS[key]] = TWO_PI * value
        elif key in _M_KEYS:
            kwargs[_M_KEYS[key]] = value
        elif key in _UK_KEYS:
            field = _UK_KEYS[key]
            kwargs[field] = value * 1e-6 * (K_B if field == "trap_depth_U" else 1.0)
        elif key in _PLAIN_KEYS:
            kwargs[_PLAIN_KEYS[key]] = value
        elif key in PROTOCOL_KEYS:
            continue
        else:
            raise ConfigError(f"unknown configuration key {key!r}")
    return PhysicalParams(**kwargs)


def load_config(text: str) -> PhysicalParams:
    """Parse a config document and return validated parameters.

    Unspecified keys take the defaults above. Protocol keys may be present
    (they are read elsewhere); anything else unknown raises
    :class:`ConfigError` naming the key.
    """
    return params_from_mapping(parse_document(text))


def to_config_text(params: PhysicalParams) -> str:
    """Serialize parameters back to a config document (Hz/metres/uK units).

    ``load_config(to_config_text(p))`` reproduces every field to within one
    ulp (the only operations applied are multiply and divide by the same
    constant).
    """
    lines = [
        f"g0_hz = {params.g0 / TWO_PI!r}",
        f"kappa_hz = {params.kappa / TWO_PI!r}",
        f"gamma_hz = {params.gamma / TWO_PI!r}",
        f"omega_z_hz = {params.omega_z / TWO_PI!r}",
        f"delta_ca_hz = {params.delta_ca / TWO_PI!r}",
        f"sigma_jitter_hz = {params.sigma_jitter / TWO_PI!r}",
        f"lambda_p_m = {params.lambda_p!r}",
        f"lambda_t_m = {params.lambda_t!r}",
        f"cavity_length_m = {params.cavity_length!r}",
        f"trap_depth_uk = {params.trap_depth_U / K_B / 1e-6!r}",
        f"temperature_uk = {params.temperature / 1e-6!r}",
        f"mass_kg = {params.mass!r}",
        f"eta_det = {params.eta_det!r}",
        f"gamma_bg = {params.gamma_bg!r}",
        f"mirror_loss_ppm = {params.mirror_loss_ppm!r}",
        f"mirror_trans_ppm = {params.mirror_trans_ppm!r}",
    ]
    return "\n".join(lines) + "\n"


_DUMP_UNITS = {
    "g0": ("hz", TWO_PI), "kappa": ("hz", TWO_PI), "gamma": ("hz", TWO_PI),
    "omega_z": ("hz", TWO_PI), "delta_ca": ("hz", TWO_PI),
    "sigma_jitter": ("hz", TWO_PI),
    "lambda_p": ("m", 1.0), "lambda_t": ("m", 1.0), "cavity_length": ("m", 1.0),
    "mass": ("kg", 1.0), "trap_depth_U": ("J", 1.0), "temperature": ("K", 1.0),
    "eta_det": ("dimensionless", 1.0), "gamma_bg": ("1/s", 1.0),
    "mirror_loss_ppm": ("ppm", 1.0), "mirror_trans_ppm": ("ppm", 1.0),
}


def params_to_csv(params: PhysicalParams, derived: DerivedParams | None = None) -> str:
    """CSV dump of all parameters (and, optionally, derived quantities),
    columns ``key,value,unit``. Frequencies are exported in ordinary Hz."""
    rows = ["key,value,unit"]
    for f in fields(params):
        unit, divisor = _DUMP_UNITS[f.name]
        rows.append(f"{f.name},{getattr(params, f.name) / divisor:.17g},{unit}")
    if derived is not None:
        rows.append(f"cooperativity_C,{derived.cooperativity_C:.17g},dimensionless")
        rows.append(f"kappa_from_mirrors,{derived.kappa_from_mirrors / TWO_PI:.17g},hz")
        rows.append(f"k_p,{derived.k_p:.17g},1/m")
        rows.append(f"k_t,{derived.k_t:.17g},1/m")
        rows.append(f"f0,{derived.f0:.17g},N")
    return "\n".join(rows) + "\n"


def with_updates(params: PhysicalParams, **changes) -> PhysicalParams:
    """Return a copy with the given fields replaced (re-validated)."""
    return replace(params, **changes)
