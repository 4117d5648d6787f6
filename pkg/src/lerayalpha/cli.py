"""Command-line entry points.

    lerayalpha simulate         --config run.cfg [--seed S] [--out DIR]
    lerayalpha covariance       --config run.cfg [--seed S] [--out DIR]
    lerayalpha girsanov-compare --config run.cfg [--observable SPEC] [...]
    lerayalpha validate-field   --config run.cfg

Exit codes: 0 pass, 1 invariant or acceptance failure, 2 usage error.
Any command run twice with the same configuration and seed writes
byte-identical artifacts, independent of the worker count.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .config import SimConfig, load_config, make_initial, parse_observable
from .covariance import CovarianceState, cross_validate, evolve_covariance, mc_covariance
from .errors import ConfigError, ConsistencyError, DomainError, LerayAlphaError
from .girsanov import compare_measures
from .integrators import run_ensemble, run_trajectory
from .noise import NoiseParams, NoiseTape
from .output import (fmt, meta_header, write_cov_check_ndjson, write_cov_csv,
                     write_girsanov_csv, write_meta, write_run_ndjson)
from .spectral import STREAM_NONLINEAR, SpectralField


def _load(args) -> SimConfig:
    config = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.out is not None:
        overrides["out"] = args.out
    if getattr(args, "observable", None) is not None:
        overrides["observable"] = args.observable
    if overrides:
        config = config.with_overrides(**overrides)
    os.makedirs(config.out, exist_ok=True)
    return config


def cmd_simulate(args) -> int:
    config = _load(args)
    layout = config.layout()
    y0 = make_initial(config, layout)
    if config.noise_tape:
        tape = NoiseTape.sample(layout, config.n_steps, config.dt, config.seed)
        tape.dump_ndjson(os.path.join(config.out, config.noise_tape))
        record = run_trajectory(config, y0, tape=tape)
        ens = _single_as_ensemble(config, layout, y0, record)
    else:
        ens = run_ensemble(config, y0)
    meta = meta_header("simulate", config, {"modes": layout.size})
    write_meta(config.out, meta)
    write_run_ndjson(config.out, meta, ens)
    violations = int(ens.energy_violations.sum())
    mean_terminal = float(np.mean(ens.energies[:, -1]))
    print(f"simulate: trajectories={ens.n_paths} terminal_energy_mean={fmt(mean_terminal)} "
          f"energy_violations={violations}")
    return 0  # flags are diagnostics; aborts and IO failures raise


def _single_as_ensemble(config, layout, y0, record):
    from .integrators import EnsembleResult
    return EnsembleResult(
        layout=layout, scheme=record.scheme, linear_only=config.linear_only,
        dt=config.dt, base_seed=config.seed, stream=0,
        seeds=np.array([record.seed], dtype=np.uint64),
        times=record.times, energies=record.energies[None],
        final_values=record.final_values[None], initial_values=y0.values.copy(),
        params=NoiseParams(config.sigma, config.alpha, config.p),
        energy_violations=np.array([record.energy_violations]),
        snapshots=None if record.snapshots is None else record.snapshots[None],
        log_mart=None if record.log_mart is None else record.log_mart[None],
        quad_var=None if record.quad_var is None else record.quad_var[None],
    )


def cmd_covariance(args) -> int:
    config = _load(args)
    layout = config.layout()
    y0 = make_initial(config, layout)
    params = NoiseParams(config.sigma, config.alpha, config.p)
    a0 = CovarianceState.from_field(y0)
    final, diag = evolve_covariance(a0, params, config.dt, config.T,
                                    record_every=config.record_every)
    mc_config = config.with_overrides(
        linear_only=True,
        scheme="em" if config.scheme == "rk4" else config.scheme,
        sigma=config.sigma)
    ens = run_ensemble(mc_config, y0)
    mc_state, stderr = mc_covariance(ens, config.T)
    z = cross_validate(final, mc_state, stderr)
    max_z = float(z.max()) if z.size else 0.0
    report = final.structural_report()
    structural_ok = (
        report["symmetry_defect"] <= 1e-12
        and report["min_eigen_ratio"] >= -1e-10
        and report["kernel_residual"] <= 1e-10
        and report["projection_residual"] <= 1e-10
        and diag.max_trace_drift <= 1e-8
    )
    summary = {
        "max_z": max_z,
        "trace_drift": diag.max_trace_drift,
        "psd_violations": diag.psd_violations,
        "structural": report,
        "paths": ens.n_paths,
    }
    meta = meta_header("covariance", config, {"modes": layout.size})
    write_meta(config.out, meta)
    write_cov_csv(config.out, meta, [(t, m, layout) for t, m in diag.recorded])
    write_cov_check_ndjson(config.out, meta, layout, final, mc_state, stderr, z, summary)
    ok = max_z <= 4.0 and structural_ok and diag.psd_violations == 0
    print(f"covariance: max_z={fmt(max_z)} trace_drift={fmt(diag.max_trace_drift)} "
          f"psd_violations={diag.psd_violations} -> {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 1


def cmd_girsanov_compare(args) -> int:
    config = _load(args)
    if config.sigma == 0:
        raise ConfigError("girsanov-compare needs sigma > 0 (measure change undefined)")
    if config.scheme == "rk4":
        raise ConfigError("girsanov-compare needs a stochastic scheme")
    layout = config.layout()
    y0 = make_initial(config, layout)
    lin_config = config.with_overrides(linear_only=True, scheme="em")
    nl_config = config.with_overrides(linear_only=False, scheme="em")
    lin = run_ensemble(lin_config, y0)
    nl = run_ensemble(nl_config, y0, stream=STREAM_NONLINEAR)
    reports = [compare_measures(lin, nl, config.observable),
               compare_measures(lin, nl, "one")]
    meta = meta_header("girsanov-compare", config, {"modes": layout.size})
    write_meta(config.out, meta)
    write_girsanov_csv(config.out, meta, reports)
    ok = all(rep["z"] <= 3.0 for rep in reports)
    for rep in reports:
        print(f"girsanov-compare: observable={rep['observable']} "
              f"weighted={fmt(rep['weighted_est'])}(+-{fmt(rep['weighted_se'])}) "
              f"direct={fmt(rep['direct_est'])}(+-{fmt(rep['direct_se'])}) "
              f"z={fmt(rep['z'])}")
    print(f"girsanov-compare: {'PASS' if ok else 'FAIL'} (3-sigma criterion)")
    return 0 if ok else 1


def cmd_validate_field(args) -> int:
    config = _load(args)
    layout = config.layout()
    spec = config.ic.strip()
    violations = []
    if spec.startswith("file:"):
        field, violations = SpectralField.load_ndjson_checked(spec[5:], layout)
    else:
        field = make_initial(config, layout)
    residual = field.incompressibility_residual()
    energy = field.energy()
    ok = not violations and np.isfinite(energy)
    print(f"validate-field: modes={layout.size} energy={fmt(energy)} "
          f"raw_violations={len(violations)} projected_residual={fmt(residual)} "
          f"-> {'PASS' if ok else 'FAIL'}")
    for v in violations:
        print(f"validate-field: mode {v['k']} residual {fmt(v['residual'])}")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lerayalpha",
        description="Spectral simulator for a stochastically forced, "
                    "smoothed-advection model of ideal flow")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in (("simulate", cmd_simulate),
                     ("covariance", cmd_covariance),
                     ("girsanov-compare", cmd_girsanov_compare),
                     ("validate-field", cmd_validate_field)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="path to key=value config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", default=None, help="override the output directory")
        if name == "girsanov-compare":
            p.add_argument("--observable", default=None,
                           help="observable spec (default from config)")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (DomainError, ConsistencyError, LerayAlphaError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
