"""Time-stepping schemes and the trajectory/ensemble runners.

Three schemes, all with a constant step and re-projection onto the
divergence-free constraint after every update (the projection is part of
the scheme definition, not a hidden fix-up):

* classical RK4 for the deterministic system,
* Euler-Maruyama for the Ito form (always includes the correction drift),
* stochastic Heun (trapezoidal predictor-corrector) converging to the
  Stratonovich solution; it never adds the Ito correction.

Trajectories are independent units of work.  Each one owns a counter-based
generator keyed `base_seed XOR index`, so ensembles are reproducible and
independent of how trajectories are grouped into batches or spread over
worker threads.  The engine steps whole batches of trajectories at once
(state arrays of shape (paths, modes, 3)), which is just the batched form
of the single-path update: per-path results do not depend on the batch.
"""

from __future__ import annotations

import hashlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dataclass_field
from enum import Enum

import numpy as np

from .dynamics import diffusion_rhs, interaction_table, ito_rhs, nonlinear_rhs
from .errors import ConsistencyError, DomainError
from .girsanov import assert_incompressible, log_weight_increment, qv_increment
from .noise import NoiseIncrement, NoiseParams, NoiseTape
from .spectral import (STREAM_TRAJECTORY, SpectralField, SpectrumLayout, philox)

#: byte budget for the per-step gather transients of one batch
_GATHER_BUDGET = 96_000_000
#: byte budget for one block of pre-drawn noise
_NOISE_BUDGET = 128_000_000


def _batch_limits(n_modes: int, n_terms: int) -> tuple[int, int]:
    """(paths per batch, steps of noise per draw) sized to the shell.

    Both bounds depend only on the layout, never on worker count or
    ensemble size, so identical trajectories are produced regardless of
    how the work is split.
    """
    chunk = int(_GATHER_BUDGET // (max(n_terms, n_modes, 1) * 48))
    chunk = max(256, min(8192, chunk))
    block = int(_NOISE_BUDGET // (chunk * max(n_modes, 1) * 96))
    block = max(8, min(128, block))
    return chunk, block


class Scheme(str, Enum):
    RK4 = "rk4"
    EM = "em"
    HEUN = "heun"

    @property
    def stochastic(self) -> bool:
        return self is not Scheme.RK4


def energy_slack(scheme: Scheme, dt: float, t: float, rate_scale: float = 1.0) -> float:
    """Relative slack allowed on the pathwise energy bound at time t.

    Scaled from the scheme's order: O(dt^4) for RK4 (1e-8 at dt=1e-3 over a
    unit horizon), the default 10*dt per unit time for Heun, and for
    Euler-Maruyama a diffusive sqrt(dt*t) envelope whose prefactor follows
    the correction-matrix trace (the pathwise energy of the Ito scheme is a
    random walk with that rate, not an O(dt) error).
    """
    horizon = max(t, dt)
    if scheme is Scheme.RK4:
        return 1e-8 * (dt / 1e-3) ** 4 * max(t, 1.0)
    if scheme is Scheme.EM:
        return 10.0 * np.sqrt(max(rate_scale, 1.0) * dt * horizon)
    return 10.0 * dt * horizon


# -- single-step kernels on raw value arrays ---------------------------------


def _rk4_core(vals, dt, table, alpha, p):
    k1 = nonlinear_rhs(vals, table, alpha, p)
    k2 = nonlinear_rhs(vals + (0.5 * dt) * k1, table, alpha, p)
    k3 = nonlinear_rhs(vals + (0.5 * dt) * k2, table, alpha, p)
    k4 = nonlinear_rhs(vals + dt * k3, table, alpha, p)
    out = vals + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    table.layout.project_values(out)
    return out


def _stage_increment(vals, dwp, dt, table, params, linear_only):
    """f(Y) dt + g(Y, dW), fused over the shared term set.

    The convective drift and the diffusion run over the same interaction
    terms with the same P_k(Y_{k-h}) factor, so one gather/reduction covers
    both; `f` here never includes the Ito correction.
    """
    from .dynamics import _ext_values, _segment_sum  # shared kernels

    ext_y = _ext_values(vals)
    ykh = ext_y[..., table.khm_ext, :]
    ext_w = _ext_values(dwp)
    wh = ext_w[..., table.h_ext, :]
    coef = params.sigma_h(table.h_ns) * np.einsum("...tj,tj->...t", wh, table.k_vec_c)
    if not linear_only:
        yh = ext_y[..., table.h_ext, :]
        coef += (dt * table.convective_weights(params.alpha, params.p)) * np.einsum(
            "...tj,tj->...t", yh, table.k_vec_c)
    out = _segment_sum((-1j) * coef[..., None] * ykh, table)
    table.layout.project_values(out)
    return out


def _em_core(vals, dwp, dt, table, params, linear_only, corr):
    out = vals + dt * ito_rhs(vals, corr)
    out += _stage_increment(vals, dwp, dt, table, params, linear_only)
    table.layout.project_values(out)
    return out


def _heun_core(vals, dwp, dt, table, params, linear_only):
    s1 = _stage_increment(vals, dwp, dt, table, params, linear_only)
    s2 = _stage_increment(vals + s1, dwp, dt, table, params, linear_only)
    out = vals + 0.5 * (s1 + s2)
    table.layout.project_values(out)
    return out


def _check_finite(vals, step):
    if not np.all(np.isfinite(vals)):
        raise ConsistencyError(f"non-finite state after step {step}; aborting run")


# -- public single-step operations -------------------------------------------


def det_rk4_step(field: SpectralField, dt: float, alpha: float, p: float = 1.0) -> SpectralField:
    """One classical four-stage step of the deterministic system."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    table = interaction_table(field.layout)
    out = _rk4_core(field.values, dt, table, alpha, p)
    _check_finite(out, 1)
    return SpectralField(field.layout, out, project=False, copy=False)


def em_step(field: SpectralField, dt: float, dw: NoiseIncrement, params: NoiseParams,
            linear_only: bool = False) -> SpectralField:
    """One Euler-Maruyama step of the Ito-form system (correction included)."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    table = interaction_table(field.layout)
    corr = table.correction_matrices_c(params)
    out = _em_core(field.values, dw.projected, dt, table, params, linear_only, corr)
    _check_finite(out, 1)
    return SpectralField(field.layout, out, project=False, copy=False)


def heun_step(field: SpectralField, dt: float, dw: NoiseIncrement, params: NoiseParams,
              linear_only: bool = False) -> SpectralField:
    """One stochastic Heun step of the Stratonovich-form system."""
    if dt <= 0:
        raise DomainError("dt must be positive")
    table = interaction_table(field.layout)
    out = _heun_core(field.values, dw.projected, dt, table, params, linear_only)
    _check_finite(out, 1)
    return SpectralField(field.layout, out, project=False, copy=False)


# -- records ------------------------------------------------------------------


@dataclass
class TrajectoryRecord:
    """Sampled output of one trajectory."""

    times: np.ndarray
    energies: np.ndarray
    seed: int
    scheme: Scheme
    dt: float
    linear_only: bool
    initial_energy: float
    final_values: np.ndarray
    snapshots: np.ndarray | None = None
    log_mart: np.ndarray | None = None
    quad_var: np.ndarray | None = None
    energy_violations: int = 0

    def density(self) -> float:
        if self.log_mart is None:
            raise DomainError("trajectory was run without Girsanov tracking")
        with np.errstate(over="ignore"):
            return float(np.exp(self.log_mart[-1] - 0.5 * self.quad_var[-1]))


@dataclass
class EnsembleResult:
    """Stacked per-trajectory output of an ensemble run.

    Aggregation over trajectories is always done in index order on the
    stacked arrays, so results do not depend on how the work was chunked
    or scheduled.
    """

    layout: SpectrumLayout
    scheme: Scheme
    linear_only: bool
    dt: float
    base_seed: int
    stream: int
    seeds: np.ndarray
    times: np.ndarray
    energies: np.ndarray           # (paths, len(times))
    final_values: np.ndarray       # (paths, modes, 3)
    initial_values: np.ndarray     # (modes, 3)
    params: NoiseParams
    energy_violations: np.ndarray  # (paths,)
    snapshots: np.ndarray | None = None      # (paths, len(times), modes, 3)
    log_mart: np.ndarray | None = None       # (paths, len(times))
    quad_var: np.ndarray | None = None

    @property
    def n_paths(self) -> int:
        return self.final_values.shape[0]

    def record(self, i: int) -> TrajectoryRecord:
        return TrajectoryRecord(
            times=self.times,
            energies=self.energies[i],
            seed=int(self.seeds[i]),
            scheme=self.scheme,
            dt=self.dt,
            linear_only=self.linear_only,
            initial_energy=float(np.sum(np.abs(self.initial_values) ** 2)),
            final_values=self.final_values[i],
            snapshots=None if self.snapshots is None else self.snapshots[i],
            log_mart=None if self.log_mart is None else self.log_mart[i],
            quad_var=None if self.quad_var is None else self.quad_var[i],
            energy_violations=int(self.energy_violations[i]),
        )

    def snapshot_at(self, t: float) -> np.ndarray:
        """(paths, modes, 3) state array at a recorded time."""
        hits = np.nonzero(np.isclose(self.times, t, rtol=0, atol=1e-12 + 1e-9 * abs(t)))[0]
        if hits.size:
            idx = int(hits[0])
            if self.snapshots is not None:
                return self.snapshots[:, idx]
            if idx == len(self.times) - 1:
                return self.final_values
            if idx == 0:
                return np.broadcast_to(self.initial_values,
                                       (self.n_paths,) + self.initial_values.shape).copy()
        raise ConsistencyError(f"no snapshot recorded at t={t!r}")

    def densities(self) -> np.ndarray:
        if self.log_mart is None:
            raise DomainError("ensemble was run without Girsanov tracking")
        with np.errstate(over="ignore"):
            return np.exp(self.log_mart[:, -1] - 0.5 * self.quad_var[:, -1])

    def fingerprint(self) -> tuple:
        digest = hashlib.sha256(np.ascontiguousarray(self.initial_values).tobytes()).hexdigest()
        return (self.layout.cutoff, self.params.key(), self.dt,
                float(self.times[-1]) if len(self.times) else 0.0, digest)

    def compatible_with(self, other: "EnsembleResult") -> bool:
        return self.fingerprint() == other.fingerprint()


# -- the batched engine --------------------------------------------------------


def _recorded_steps(n_steps: int, every: int) -> np.ndarray:
    steps = list(range(0, n_steps + 1, max(1, every)))
    if steps[-1] != n_steps:
        steps.append(n_steps)
    return np.asarray(steps, dtype=np.int64)


def _batch_energy(vals) -> np.ndarray:
    e = np.einsum("bmj,bmj->b", vals.real, vals.real)
    e += np.einsum("bmj,bmj->b", vals.imag, vals.imag)
    return e


def _simulate_batch(layout, y0_values, seeds, *, scheme, linear_only, params,
                    dt, n_steps, rec_steps, record_modes, track_girsanov,
                    stream, tape_raw=None):
    """Advance a batch of trajectories; returns per-batch output arrays."""
    table = interaction_table(layout)
    b = len(seeds)
    m = layout.size
    vals = np.repeat(y0_values[None, :, :], b, axis=0)
    n_rec = len(rec_steps)
    energies = np.empty((b, n_rec))
    snaps = np.empty((b, n_rec, m, 3), dtype=np.complex128) if record_modes else None
    l_ser = np.zeros((b, n_rec)) if track_girsanov else None
    q_ser = np.zeros((b, n_rec)) if track_girsanov else None
    violations = np.zeros(b, dtype=np.int64)
    e0 = _batch_energy(vals)
    log_mart = np.zeros(b)
    quad_var = np.zeros(b)

    corr = table.correction_matrices_c(params) if scheme is Scheme.EM else None
    rate_scale = float(np.einsum("mii->m", corr.real).max()) if corr is not None and corr.size else 1.0
    gens = [philox(int(s), stream) for s in seeds] if (scheme.stochastic and tape_raw is None) else None
    sqrt_dt = np.sqrt(dt)
    _, step_block = _batch_limits(m, table.n_terms)

    rec_pos = 0

    def record(step_index):
        nonlocal rec_pos
        while rec_pos < n_rec and rec_steps[rec_pos] == step_index:
            t = step_index * dt
            e = _batch_energy(vals)
            energies[:, rec_pos] = e
            if snaps is not None:
                snaps[:, rec_pos] = vals
            if l_ser is not None:
                assert_incompressible(vals, layout, f"at step {step_index}")
                l_ser[:, rec_pos] = log_mart
                q_ser[:, rec_pos] = quad_var
            violations[:] += e > e0 * (1.0 + energy_slack(scheme, dt, t, rate_scale)) + 1e-300
            rec_pos += 1

    record(0)
    step = 0
    while step < n_steps:
        blk = min(step_block, n_steps - step)
        if scheme.stochastic:
            if tape_raw is not None:
                raw_block = tape_raw[:, step:step + blk]
            else:
                draws = np.stack([g.standard_normal((blk, m, 3, 2)) for g in gens])
                raw_block = (draws[..., 0] + 1j * draws[..., 1]) * sqrt_dt
        for j in range(blk):
            if scheme.stochastic:
                raw = raw_block[:, j]
                if track_girsanov:
                    log_mart += log_weight_increment(vals, raw, params.sigma)
                    quad_var += qv_increment(vals, dt, params.sigma)
                dwp = raw.copy()
                layout.project_values(dwp)
                if scheme is Scheme.EM:
                    vals = _em_core(vals, dwp, dt, table, params, linear_only, corr)
                else:
                    vals = _heun_core(vals, dwp, dt, table, params, linear_only)
            else:
                vals = _rk4_core(vals, dt, table, params.alpha, params.p)
            _check_finite(vals, step + j + 1)
            record(step + j + 1)
        step += blk

    return {
        "energies": energies,
        "finals": vals,
        "snapshots": snaps,
        "log_mart": l_ser,
        "quad_var": q_ser,
        "violations": violations,
    }


def run_ensemble(config, y0: SpectralField, count: int | None = None, *,
                 stream: int = STREAM_TRAJECTORY, workers: int | None = None,
                 record_modes: bool | None = None,
                 track_girsanov: bool | None = None) -> EnsembleResult:
    """Run `count` independent trajectories from the same initial state.

    Trajectory i uses the counter-based stream keyed `config.seed XOR i`, so
    the result is a pure function of (config, y0, count) regardless of chunk
    sizes or the number of worker threads.
    """
    count = int(config.ensemble if count is None else count)
    if count < 1:
        raise DomainError("ensemble size must be >= 1")
    workers = int(config.workers if workers is None else workers)
    layout = y0.layout
    if layout.cutoff != config.cutoff:
        raise DomainError("initial state layout does not match the configuration")
    scheme = Scheme(config.scheme)
    params = NoiseParams(config.sigma, config.alpha, config.p)
    if record_modes is None:
        record_modes = config.record_modes
    if track_girsanov is None:
        track_girsanov = bool(config.linear_only and config.sigma > 0 and scheme.stochastic)
    n_steps = config.n_steps
    rec_steps = _recorded_steps(n_steps, config.record_every)
    n_rec = len(rec_steps)
    m = layout.size

    e0 = y0.energy()
    if not np.isfinite(e0):
        raise DomainError("initial state has non-finite energy")

    seeds = np.array([(config.seed ^ i) & 0xFFFFFFFFFFFFFFFF for i in range(count)],
                     dtype=np.uint64)
    energies = np.empty((count, n_rec))
    finals = np.empty((count, m, 3), dtype=np.complex128)
    snaps = np.empty((count, n_rec, m, 3), dtype=np.complex128) if record_modes else None
    l_ser = np.zeros((count, n_rec)) if track_girsanov else None
    q_ser = np.zeros((count, n_rec)) if track_girsanov else None
    violations = np.zeros(count, dtype=np.int64)

    chunk_paths, _ = _batch_limits(m, interaction_table(layout).n_terms)
    chunks = [(lo, min(lo + chunk_paths, count)) for lo in range(0, count, chunk_paths)]

    def run_chunk(bounds):
        lo, hi = bounds
        out = _simulate_batch(
            layout, y0.values, seeds[lo:hi], scheme=scheme,
            linear_only=config.linear_only, params=params, dt=config.dt,
            n_steps=n_steps, rec_steps=rec_steps, record_modes=record_modes,
            track_girsanov=track_girsanov, stream=stream)
        energies[lo:hi] = out["energies"]
        finals[lo:hi] = out["finals"]
        if snaps is not None:
            snaps[lo:hi] = out["snapshots"]
        if l_ser is not None:
            l_ser[lo:hi] = out["log_mart"]
            q_ser[lo:hi] = out["quad_var"]
        violations[lo:hi] = out["violations"]

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run_chunk, chunks))
    else:
        for bounds in chunks:
            run_chunk(bounds)

    return EnsembleResult(
        layout=layout, scheme=scheme, linear_only=config.linear_only, dt=config.dt,
        base_seed=config.seed, stream=stream, seeds=seeds,
        times=rec_steps * config.dt, energies=energies, final_values=finals,
        initial_values=y0.values.copy(), params=params,
        energy_violations=violations, snapshots=snaps,
        log_mart=l_ser, quad_var=q_ser)


def run_trajectory(config, y0: SpectralField, seed: int | None = None, *,
                   tape: NoiseTape | None = None,
                   stream: int = STREAM_TRAJECTORY) -> TrajectoryRecord:
    """Run a single trajectory (batched engine with batch size one).

    `seed` defaults to the configured base seed, matching trajectory 0 of
    `run_ensemble`.  Passing a `tape` replays a fixed Brownian path instead
    of sampling.
    """
    layout = y0.layout
    if layout.cutoff != config.cutoff:
        raise DomainError("initial state layout does not match the configuration")
    scheme = Scheme(config.scheme)
    params = NoiseParams(config.sigma, config.alpha, config.p)
    if not np.isfinite(y0.energy()):
        raise DomainError("initial state has non-finite energy")
    n_steps = config.n_steps
    if tape is not None:
        if tape.n_steps != n_steps or not np.isclose(tape.dt, config.dt):
            raise DomainError("tape does not match the configured grid")
        tape_raw = tape.raw[None]
    else:
        tape_raw = None
    seed = config.seed if seed is None else int(seed)
    rec_steps = _recorded_steps(n_steps, config.record_every)
    track = bool(config.linear_only and config.sigma > 0 and scheme.stochastic)
    out = _simulate_batch(
        layout, y0.values, np.array([seed], dtype=np.uint64), scheme=scheme,
        linear_only=config.linear_only, params=params, dt=config.dt,
        n_steps=n_steps, rec_steps=rec_steps, record_modes=config.record_modes,
        track_girsanov=track, stream=stream, tape_raw=tape_raw)
    return TrajectoryRecord(
        times=rec_steps * config.dt,
        energies=out["energies"][0],
        seed=seed,
        scheme=scheme,
        dt=config.dt,
        linear_only=config.linear_only,
        initial_energy=y0.energy(),
        final_values=out["finals"][0],
        snapshots=None if out["snapshots"] is None else out["snapshots"][0],
        log_mart=None if out["log_mart"] is None else out["log_mart"][0],
        quad_var=None if out["quad_var"] is None else out["quad_var"][0],
        energy_violations=int(out["violations"][0]),
    )
