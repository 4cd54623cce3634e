"""Simulator and analysis toolkit for quantum-measurement backaction on the
collective motion of a trapped atomic ensemble in a driven optical cavity.

The package computes the closed-form predictions (photon-number noise
spectra, backaction heating rates, jitter-convolved lineshapes), verifies
them against independent numerical oracles (stochastic trajectory ensembles,
mean-field integration, quadrature transforms), and reproduces the full
bolometric measurement pipeline from transmission traces to heating curves.
"""

__version__ = "0.1.0"

from .collective import (
    AtomicEnsemble,
    CollectiveMode,
    atoms_from_shift,
    build_mode,
    cavity_shift,
    effective_atom_number,
    granularity,
    shifted_resonance,
    static_displacement,
)
from .errors import BackactionError, ConfigError, NumericError, ValidationError
from .experiment import (
    HeatingAnalysis,
    ProtocolConfig,
    TransmissionTrace,
    analyze_trace,
    forward_simulate,
    heating_curve,
    offresonance_control,
    technical_noise_scan,
)
from .oracle import (
    DriveSchedule,
    EnsembleEstimate,
    TrajectoryConfig,
    kicked_oscillator_heating,
    meanfield_integrate,
    output_whiteness_kernel,
    spectrum_ft_check,
    synthesize_photon_noise,
)
from .params import DerivedParams, PhysicalParams, derive, load_config
from .spectra import (
    HeatingRates,
    NoiseSpectrum,
    backaction_heating,
    convolved_heating_per_photon,
    freespace_heating,
    heating_rates,
    lorentzian_response,
    occupation_rate,
    photon_noise_spectrum,
    steady_intracavity,
    two_time_correlation,
    voigt_transmission,
)

__all__ = [
    "AtomicEnsemble", "BackactionError", "CollectiveMode", "ConfigError",
    "DerivedParams", "DriveSchedule", "EnsembleEstimate", "HeatingAnalysis",
    "HeatingRates", "NoiseSpectrum", "NumericError", "PhysicalParams",
    "ProtocolConfig", "TrajectoryConfig", "TransmissionTrace",
    "ValidationError", "analyze_trace", "atoms_from_shift",
    "backaction_heating", "build_mode", "cavity_shift",
    "convolved_heating_per_photon", "derive", "effective_atom_number",
    "forward_simulate", "freespace_heating", "granularity", "heating_curve",
    "heating_rates", "kicked_oscillator_heating", "load_config",
    "lorentzian_response", "meanfield_integrate", "occupation_rate",
    "offresonance_control", "output_whiteness_kernel",
    "photon_noise_spectrum", "shifted_resonance", "spectrum_ft_check",
    "static_displacement", "steady_intracavity", "synthesize_photon_noise",
    "technical_noise_scan", "two_time_correlation", "voigt_transmission",
]
