"""Deterministic on-disk artifacts: NDJSON event streams and CSV reports.

Every file starts with a machine-readable meta header (config echo, seed,
scheme, code version) so outputs are self-describing, and all floating-point
values are serialized with 17 significant digits so they round-trip exactly.
Nothing time- or host-dependent is written: two runs with the same seed
produce byte-identical artifacts.
"""

from __future__ import annotations

import json
import os


def fmt(x: float) -> str:
    """17-significant-digit decimal form (exact float round trip)."""
    return format(float(x), ".17g")


def meta_header(command: str, config, extra: dict | None = None) -> dict:
    from . import __version__
    meta = {
        "command": command,
        "version": __version__,
        "config": config.as_dict(),
    }
    if extra:
        meta.update(extra)
    return meta


def meta_json(meta: dict) -> str:
    return json.dumps({"meta": meta}, sort_keys=True, separators=(",", ":"))


def write_meta(outdir: str, meta: dict) -> str:
    path = os.path.join(outdir, "meta.json")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(meta_json(meta) + "\n")
    return path


def write_run_ndjson(outdir: str, meta: dict, ensemble) -> str:
    """Trajectory events: one line per (trajectory, recorded time)."""
    path = os.path.join(outdir, "run.ndjson")
    times = ensemble.times
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(meta_json(meta) + "\n")
        for i in range(ensemble.n_paths):
            for r, t in enumerate(times):
                parts = [f'"traj":{i}', f'"seed":{int(ensemble.seeds[i])}',
                         f'"t":{fmt(t)}', f'"energy":{fmt(ensemble.energies[i, r])}']
                if ensemble.log_mart is not None:
                    parts.append(f'"L":{fmt(ensemble.log_mart[i, r])}')
                    parts.append(f'"qv":{fmt(ensemble.quad_var[i, r])}')
                if ensemble.snapshots is not None:
                    modes = []
                    for k, v in zip(ensemble.layout.vectors.tolist(),
                                    ensemble.snapshots[i, r]):
                        nums = [fmt(v[0].real), fmt(v[0].imag), fmt(v[1].real),
                                fmt(v[1].imag), fmt(v[2].real), fmt(v[2].imag)]
                        modes.append(f'[[{k[0]},{k[1]},{k[2]}],[{",".join(nums)}]]')
                    parts.append(f'"modes":[{",".join(modes)}]')
                parts.append(f'"violations":{int(ensemble.energy_violations[i])}')
                fh.write("{" + ",".join(parts) + "}\n")
    return path


def write_cov_csv(outdir: str, meta: dict, recorded) -> str:
    """ODE covariance series: upper-triangle entries per (time, mode)."""
    path = os.path.join(outdir, "cov.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + meta_json(meta) + "\n")
        fh.write("t,k1,k2,k3,a11,a12,a13,a22,a23,a33\n")
        for t, mats, layout in recorded:
            for k, a in zip(layout.vectors.tolist(), mats):
                cells = [fmt(t), str(k[0]), str(k[1]), str(k[2]),
                         fmt(a[0, 0]), fmt(a[0, 1]), fmt(a[0, 2]),
                         fmt(a[1, 1]), fmt(a[1, 2]), fmt(a[2, 2])]
                fh.write(",".join(cells) + "\n")
    return path


def write_cov_check_ndjson(outdir: str, meta: dict, layout, ode_state, mc_state,
                           stderr, z, summary: dict) -> str:
    """Cross-validation diagnostics: per-mode z-scores plus a summary line."""
    path = os.path.join(outdir, "cov_check.ndjson")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(meta_json(meta) + "\n")
        for i, k in enumerate(layout.vectors.tolist()):
            rec = {
                "k": k,
                "ode": [[float(x) for x in row] for row in ode_state.matrices[i]],
                "mc": [[float(x) for x in row] for row in mc_state.matrices[i]],
                "stderr": [[float(x) for x in row] for row in stderr[i]],
                "max_z": float(z[i].max()),
            }
            fh.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
        fh.write(json.dumps({"summary": summary}, sort_keys=True,
                            separators=(",", ":")) + "\n")
    return path


def write_girsanov_csv(outdir: str, meta: dict, reports) -> str:
    """Measure-transfer comparison: one row per observable."""
    path = os.path.join(outdir, "girsanov.csv")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# " + meta_json(meta) + "\n")
        fh.write("observable,weighted_est,weighted_se,direct_est,direct_se,z\n")
        for rep in reports:
            fh.write(",".join([
                rep["observable"], fmt(rep["weighted_est"]), fmt(rep["weighted_se"]),
                fmt(rep["direct_est"]), fmt(rep["direct_se"]), fmt(rep["z"]),
            ]) + "\n")
    return path
