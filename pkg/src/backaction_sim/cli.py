"""Command-line orchestration.

One subcommand per module boundary:

* ``params``        -> parameter dump with derived quantities
* ``spectrum``      -> analytic photon-number noise spectrum
* ``heating-curve`` -> jitter-convolved R/R_fs theory curve
* ``simulate``      -> forward transmission trace
* ``analyze``       -> heating extraction from a trace file
* ``oracle``        -> the numerical cross-check suites

Every run writes a ``manifest.csv`` with the resolved configuration, seed,
and tool version; all outputs are CSV with 17-significant-digit floats so a
rerun with the same seed is byte-identical apart from the ``# timestamp=``
comment line. Exit codes: 0 success, 1 validation/config error, 2 numeric
error.
"""

from __future__ import annotations

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .collective import AtomicEnsemble, build_mode
from .constants import TWO_PI
from .errors import NumericError, ValidationError
from .experiment import (
    ProtocolConfig,
    analysis_to_csv,
    analyze_trace,
    forward_simulate,
    heating_curve,
    heating_curve_to_csv,
    protocol_from_mapping,
    trace_from_csv,
    trace_to_csv,
)
from .oracle import (
    DriveSchedule,
    EnsembleEstimate,
    TrajectoryConfig,
    estimate_noise_spectrum,
    estimates_to_csv,
    kicked_oscillator_heating,
    meanfield_integrate,
    output_whiteness_kernel,
    spectrum_ft_check,
    symmetrized_heating_prediction,
)
from .params import (
    PhysicalParams,
    derive,
    params_from_mapping,
    params_to_csv,
    parse_document,
)
from .spectra import analytic_spectrum, photon_noise_spectrum, spectrum_to_csv
from .collective import static_displacement

THREADS_ENV_VAR = "BACKACTION_SIM_THREADS"
COMMANDS = ("params", "spectrum", "heating-curve", "simulate", "analyze", "oracle")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_NUMERIC = 2


@dataclass(frozen=True)
class RunManifest:
    """Resolved invocation: which command, which config, where to write."""

    command: str
    config_path: str | None
    output_dir: str
    seed_override: int | None = None
    threads: int | None = None
    trace_path: str | None = None


def _resolve_threads(cli_value: int | None) -> int | None:
    if cli_value is not None:
        return cli_value
    env = os.environ.get(THREADS_ENV_VAR)
    if env is None:
        return None
    try:
        return int(env)
    except ValueError:
        raise ValidationError(f"{THREADS_ENV_VAR} must be an integer, got {env!r}") from None


def _read_config(manifest: RunManifest) -> dict[str, float]:
    if manifest.config_path is None:
        return {}
    path = Path(manifest.config_path)
    if not path.is_file():
        raise ValidationError(f"config path {path} is not a readable file")
    return parse_document(path.read_text(encoding="utf-8"))


def _write(out_dir: Path, name: str, text: str) -> None:
    (out_dir / name).write_text(text, encoding="utf-8")


def _manifest_csv(manifest: RunManifest, doc: dict[str, float], seed: int,
                  params: PhysicalParams) -> str:
    lines = [f"# timestamp={time.strftime('%Y-%m-%dT%H:%M:%S')}"]
    lines.append("key,value")
    lines.append(f"command,{manifest.command}")
    lines.append(f"version,{__version__}")
    lines.append(f"seed,{seed}")
    lines.append(f"threads,{manifest.threads if manifest.threads else 1}")
    if manifest.config_path:
        lines.append(f"config_path,{manifest.config_path}")
    if manifest.trace_path:
        lines.append(f"trace_path,{manifest.trace_path}")
    for key in sorted(doc):
        lines.append(f"config.{key},{doc[key]:.17g}")
    for f in fields(params):
        lines.append(f"resolved.{f.name},{getattr(params, f.name):.17g}")
    return "\n".join(lines) + "\n"


def _default_ensemble(doc: dict[str, float], key: str = "curve_n_atoms") -> AtomicEnsemble:
    n_atoms = int(doc.get(key, 1e5))
    return AtomicEnsemble.uniform(n_atoms)


def _cmd_params(manifest, doc, params, seed, out_dir) -> int:
    _write(out_dir, "params.csv", params_to_csv(params, derive(params)))
    return EXIT_OK


def _cmd_spectrum(manifest, doc, params, seed, out_dir) -> int:
    nbar = doc.get("spectrum_nbar", 1.9)
    delta = TWO_PI * doc.get("spectrum_delta_hz", params.omega_z / TWO_PI)
    span = doc.get("grid_span_kappa", 10.0)
    npts = int(doc.get("grid_points", 1001))
    grid = np.linspace(-span * params.kappa, span * params.kappa, npts)
    spectrum = analytic_spectrum(grid, nbar, delta, params.kappa)
    _write(out_dir, "spectrum.csv", spectrum_to_csv(spectrum))
    return EXIT_OK


def _cmd_heating_curve(manifest, doc, params, seed, out_dir) -> int:
    ensemble = _default_ensemble(doc)
    nbar_max = doc.get("curve_nbar_max", 1.9)
    mode = build_mode(ensemble, params, nbar=nbar_max)
    span = doc.get("grid_span_kappa", 8.0)
    npts = int(doc.get("grid_points", 321))
    grid = params.omega_z + np.linspace(-span * params.kappa, span * params.kappa, npts)
    curve = heating_curve(params, mode, params.sigma_jitter, grid)
    _write(out_dir, "heating_curve.csv", heating_curve_to_csv(params, mode, curve))
    return EXIT_OK


def _cmd_simulate(manifest, doc, params, seed, out_dir) -> int:
    protocol = protocol_from_mapping(doc)
    if manifest.seed_override is not None:
        protocol = ProtocolConfig(**{**{f.name: getattr(protocol, f.name)
                                        for f in fields(ProtocolConfig)},
                                     "seed": seed})
    ensemble = AtomicEnsemble.uniform(int(round(protocol.n_initial)))
    trace = forward_simulate(protocol, params, ensemble)
    _write(out_dir, "trace.csv", trace_to_csv(trace))
    return EXIT_OK


def _cmd_analyze(manifest, doc, params, seed, out_dir) -> int:
    if not manifest.trace_path:
        raise ValidationError("analyze requires --trace PATH")
    trace_file = Path(manifest.trace_path)
    if not trace_file.is_file():
        raise ValidationError(f"trace path {trace_file} is not a readable file")
    trace = trace_from_csv(trace_file.read_text(encoding="utf-8"))
    analysis = analyze_trace(trace, params)
    _write(out_dir, "analysis.csv", analysis_to_csv(analysis))
    return EXIT_OK


def _cmd_oracle(manifest, doc, params, seed, out_dir) -> int:
    """Run every cross-check suite; nonzero exit if any tolerance is missed."""
    n_traj = int(doc.get("oracle_n_trajectories", 512))
    kappa, omega_z = params.kappa, params.omega_z
    threads = manifest.threads
    rows: list[tuple[str, EnsembleEstimate, int]] = []
    failures: list[str] = []

    grid = np.linspace(-10 * kappa, 10 * kappa, 81)
    ft_err = spectrum_ft_check(1.9, omega_z, kappa, grid)
    rows.append(("spectrum_ft_max_rel_err", EnsembleEstimate(ft_err, 0.0, len(grid)), seed))
    if ft_err > 1e-3:
        failures.append(f"FT cross-check error {ft_err:.2e} > 1e-3")

    wgrid = np.linspace(-1e6 * kappa, 1e6 * kappa, 10_001)
    white_dev = float(np.abs(output_whiteness_kernel(wgrid, 0.0, kappa) - 1.0).max())
    rows.append(("whiteness_max_dev", EnsembleEstimate(white_dev, 0.0, len(wgrid)), seed))
    if white_dev > 1e-9:
        failures.append(f"whiteness kernel deviates by {white_dev:.2e} > 1e-9")

    config = TrajectoryConfig(seed=seed, n_trajectories=n_traj, dt=0.05 / kappa,
                              duration=200.0 / kappa)
    spectrum = estimate_noise_spectrum(config, 1.9, omega_z, kappa,
                                       omega_max=5 * kappa, n_threads=threads)
    sym = 0.5 * (photon_noise_spectrum(spectrum.grid, 1.9, omega_z, kappa)
                 + photon_noise_spectrum(-spectrum.grid, 1.9, omega_z, kappa))
    rms = float(np.sqrt(np.mean((spectrum.values / sym - 1.0) ** 2)))
    rows.append(("periodogram_rms_rel_dev", EnsembleEstimate(rms, 0.0, n_traj), seed))
    if rms > 0.05:
        failures.append(f"periodogram rms deviation {rms:.3f} > 0.05")

    ensemble = AtomicEnsemble.uniform(int(1e5))
    mode = build_mode(ensemble, params, nbar=1.9)
    kicked_cfg = TrajectoryConfig(seed=seed + 1, n_trajectories=n_traj,
                                  dt=0.05 / kappa, duration=60.0 / kappa)
    est = kicked_oscillator_heating(kicked_cfg, 1.9, omega_z, mode, params,
                                    n_threads=threads)
    target = symmetrized_heating_prediction(1.9, omega_z, mode, params)
    rows.append(("kicked_oscillator_dEdt_W", est, seed + 1))
    rows.append(("kicked_oscillator_target_W",
                 EnsembleEstimate(target, 0.0, 1), seed + 1))
    dev = abs(est.mean - target)
    if dev > max(0.10 * target, 3.0 * est.stderr):
        failures.append(
            f"kicked-oscillator rate {est.mean:.3e} vs {target:.3e} "
            f"outside 10% and 3 sigma")

    mf_cfg = TrajectoryConfig(seed=seed, n_trajectories=1, dt=0.05 / kappa,
                              duration=30.0 * 10.0 / omega_z)
    drive = DriveSchedule(nbar_max=1.0, delta_pc=mode.delta_N - 3.0 * kappa)
    traj = meanfield_integrate(mf_cfg, drive, mode, params, mechanical_q=10.0,
                               record_every=20)
    period = int(round(TWO_PI / omega_z / (mf_cfg.dt * 20)))
    z_tail = float(traj.z[-period:].mean())
    n_tail = float(traj.nbar[-period:].mean())
    z_pred = static_displacement(n_tail, params)
    settle_err = abs(z_tail / z_pred - 1.0)
    rows.append(("meanfield_settle_rel_err",
                 EnsembleEstimate(settle_err, 0.0, 1), seed))
    if settle_err > 1e-3:
        failures.append(f"mean-field displacement off by {settle_err:.2e} > 1e-3")

    _write(out_dir, "oracle_report.csv", estimates_to_csv(rows))
    for name, est_row, _ in rows:
        print(f"oracle {name}: {est_row.mean:.6e}")
    if failures:
        for failure in failures:
            print(f"FAIL {failure}", file=sys.stderr)
        raise NumericError("; ".join(failures))
    return EXIT_OK


_HANDLERS = {
    "params": _cmd_params,
    "spectrum": _cmd_spectrum,
    "heating-curve": _cmd_heating_curve,
    "simulate": _cmd_simulate,
    "analyze": _cmd_analyze,
    "oracle": _cmd_oracle,
}


def run(manifest: RunManifest) -> int:
    """Execute a manifest; returns the process exit code."""
    try:
        if manifest.command not in _HANDLERS:
            raise ValidationError(f"unknown command {manifest.command!r}")
        threads = _resolve_threads(manifest.threads)
        manifest = RunManifest(
            command=manifest.command, config_path=manifest.config_path,
            output_dir=manifest.output_dir, seed_override=manifest.seed_override,
            threads=threads, trace_path=manifest.trace_path,
        )
        doc = _read_config(manifest)
        params = params_from_mapping(doc)
        seed = manifest.seed_override if manifest.seed_override is not None \
            else int(doc.get("seed", 0))
        if "seed" in doc and manifest.seed_override is not None:
            doc = {**doc, "seed": float(seed)}
        out_dir = Path(manifest.output_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        code = _HANDLERS[manifest.command](manifest, doc, params, seed, out_dir)
        _write(out_dir, "manifest.csv", _manifest_csv(manifest, doc, seed, params))
        return code
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="backaction-sim",
        description="Cavity measurement-backaction simulator and analysis toolkit",
    )
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", default=None, metavar="PATH",
                        help="flat key = value configuration document")
    parser.add_argument("--out", default=".", metavar="DIR",
                        help="output directory (created if missing)")
    parser.add_argument("--seed", type=int, default=None, metavar="U64",
                        help="override the configured random seed")
    parser.add_argument("--threads", type=int, default=None, metavar="N",
                        help=f"worker threads for batch operations "
                             f"(fallback: ${THREADS_ENV_VAR})")
    parser.add_argument("--format", default="csv", choices=["csv"],
                        help="output format (CSV only)")
    parser.add_argument("--trace", default=None, metavar="PATH",
                        help="input trace file (analyze command)")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    manifest = RunManifest(
        command=args.command, config_path=args.config, output_dir=args.out,
        seed_override=args.seed, threads=args.threads, trace_path=args.trace,
    )
    return run(manifest)


if __name__ == "__main__":
    sys.exit(main())
