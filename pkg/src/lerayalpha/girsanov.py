"""Change of measure between the linear and nonlinear systems.

Along a linear-system trajectory driven by raw Brownian draws {B'_h}, the
running log-martingale and its quadratic variation are

    L(t)  = (1/sigma) sum_{h in J_N} int_0^t <Y_h, dB'_h>_R
    [L,L](t) = (1/sigma^2) int_0^t sum_{h in J_N} ||Y_h||^2 ds

with <.,.>_R the sum over the six real coordinates.  The weight
exp(L - [L,L]/2) turns linear-ensemble averages into nonlinear-system
statistics: shifting the raw draws by (1/sigma) Y_h dt converts the linear
diffusion term into exactly the convective drift, because
sigma_h / sigma = 1 / (1 + alpha ||h||^2)^p matches the drift weight.
Since the state stays incompressible, pairing Y_h with the raw draw or its
projection is the same thing; this is asserted at accumulation time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import diffusion_rhs, interaction_table, ito_rhs, nonlinear_rhs
from .errors import ConsistencyError, DomainError
from .noise import NoiseIncrement, NoiseParams, NoiseTape
from .spectral import SpectralField


def log_weight_increment(values: np.ndarray, raw: np.ndarray, sigma: float) -> np.ndarray:
    """(1/sigma) sum_h <Y_h, dB'_h>_R for state (..., M, 3) and raw draws."""
    acc = np.einsum("...mj,...mj->...", values.real, raw.real)
    acc += np.einsum("...mj,...mj->...", values.imag, raw.imag)
    return acc / sigma


def qv_increment(values: np.ndarray, dt: float, sigma: float) -> np.ndarray:
    """(dt/sigma^2) sum_h ||Y_h||^2 for state (..., M, 3)."""
    e = np.einsum("...mj,...mj->...", values.real, values.real)
    e += np.einsum("...mj,...mj->...", values.imag, values.imag)
    return e * (dt / (sigma * sigma))


def assert_incompressible(values: np.ndarray, layout, where: str = "") -> None:
    """The shift relies on P_h(Y_h) = Y_h; verify it within roundoff."""
    dots = np.abs(np.einsum("...mj,mj->...m", values, layout.vectors_f))
    scale = np.sqrt(np.einsum("...mj,...mj->...m", np.abs(values), np.abs(values))
                    * layout.norms_sq.astype(np.float64))
    bad = dots > 1e-10 * np.maximum(scale, 1e-300)
    if np.any(bad & (scale > 0)):
        raise ConsistencyError(f"state lost incompressibility {where}".strip())


@dataclass(frozen=True)
class GirsanovAccumulator:
    """Running log-martingale L, quadratic variation [L,L], and time."""

    log_mart: float = 0.0
    quad_var: float = 0.0
    t: float = 0.0

    def __post_init__(self):
        if self.quad_var < 0:
            raise DomainError("quadratic variation cannot be negative")


def girsanov_step(acc: GirsanovAccumulator, field: SpectralField,
                  raw_increment, dt: float, sigma: float) -> GirsanovAccumulator:
    """Advance the accumulator over one step.

    `field` is the state at the step start (left-endpoint rule) and
    `raw_increment` holds the pre-projection draws dB'_h for the stored
    half-lattice modes, drawn with the same dt as the integrator step.
    """
    if sigma == 0:
        raise DomainError("measure change undefined for sigma = 0")
    if dt <= 0:
        raise DomainError("dt must be positive")
    raw = raw_increment.raw if isinstance(raw_increment, NoiseIncrement) else np.asarray(raw_increment)
    assert_incompressible(field.values, field.layout, "in girsanov_step")
    dl = float(log_weight_increment(field.values, raw, sigma))
    dq = float(qv_increment(field.values, dt, sigma))
    return GirsanovAccumulator(acc.log_mart + dl, acc.quad_var + dq, acc.t + dt)


def log_density(acc: GirsanovAccumulator) -> float:
    return acc.log_mart - 0.5 * acc.quad_var


def density(acc: GirsanovAccumulator) -> float:
    """Radon-Nikodym weight exp(L - [L,L]/2); strictly positive.

    Kept in log space until this final exponentiation; overflow saturates
    to inf rather than raising.
    """
    with np.errstate(over="ignore"):
        return float(np.exp(log_density(acc)))


def reweight_expectation(ensemble, observable, ddof: int = 1):
    """Estimate the nonlinear-system expectation of an observable from a
    weighted linear ensemble.

    Parameters
    ----------
    ensemble : EnsembleResult
        A linear-only stochastic ensemble with Girsanov accumulators.
    observable : callable or str
        Either a callable mapping the ensemble to a (paths,) sample array,
        or an observable spec string (see `config.parse_observable`).

    Returns
    -------
    (estimate, standard_error)
    """
    if not getattr(ensemble, "linear_only", False):
        raise DomainError("reweighting requires a linear-only ensemble")
    weights = ensemble.densities()
    if isinstance(observable, str):
        from .config import parse_observable
        observable = parse_observable(observable)
    samples = np.asarray(observable(ensemble), dtype=np.float64)
    if samples.shape != weights.shape:
        raise DomainError("observable must return one sample per trajectory")
    prods = weights * samples
    n = prods.shape[0]
    est = float(np.mean(prods))
    se = float(np.std(prods, ddof=ddof) / np.sqrt(n)) if n > 1 else float("inf")
    return est, se


def compare_measures(linear_ens, nonlinear_ens, observable):
    """Cross-validate the measure transfer: weighted linear ensemble vs a
    directly simulated nonlinear ensemble, for one scalar observable.

    Returns a report dict with both estimates, standard errors, the z-score
    of the discrepancy, and the weight normalization diagnostic.
    """
    if not linear_ens.compatible_with(nonlinear_ens):
        raise DomainError("ensembles were produced with mismatched configurations")
    if getattr(nonlinear_ens, "linear_only", True):
        raise DomainError("second ensemble must simulate the nonlinear system")
    if isinstance(observable, str):
        from .config import parse_observable
        name, fn = observable, parse_observable(observable)
    else:
        name, fn = getattr(observable, "__name__", "observable"), observable
    w_est, w_se = reweight_expectation(linear_ens, fn)
    samples = np.asarray(fn(nonlinear_ens), dtype=np.float64)
    d_est = float(np.mean(samples))
    d_se = float(np.std(samples, ddof=1) / np.sqrt(samples.shape[0]))
    combined = float(np.hypot(w_se, d_se))
    z = abs(w_est - d_est) / combined if combined > 0 else 0.0
    weights = linear_ens.densities()
    w_mean = float(np.mean(weights))
    w_mean_se = float(np.std(weights, ddof=1) / np.sqrt(weights.shape[0]))
    return {
        "observable": name,
        "weighted_est": w_est,
        "weighted_se": w_se,
        "direct_est": d_est,
        "direct_se": d_se,
        "z": z,
        "weight_mean": w_mean,
        "weight_mean_se": w_mean_se,
    }


@dataclass
class DriftShiftReport:
    """Outcome of the per-step shift identity check."""

    n_steps: int
    max_abs_err: float
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def drift_shift_check(y0: SpectralField, tape: NoiseTape, params: NoiseParams,
                      tolerance: float = 1e-13) -> DriftShiftReport:
    """Verify, step by step along a linear trajectory, that rewriting the
    linear diffusion with the shifted draws reproduces the convective drift.

    With dW' = dB' - (dt/sigma) Y_h, linearity of the diffusion in its noise
    argument gives

        diffusion(Y, dB') = diffusion(Y, dW') + dt * nonlinear_drift(Y)

    exactly, because sigma_h/sigma equals the convective filter weight.  The
    check integrates the linear system with the tape and compares both sides
    at every step.
    """
    if params.sigma == 0:
        raise DomainError("measure change undefined for sigma = 0")
    layout = y0.layout
    if tape.layout != layout:
        raise DomainError("tape and field live on different layouts")
    table = interaction_table(layout)
    corr = table.correction_matrices_c(params)
    dt = tape.dt
    vals = y0.values.copy()
    max_abs = 0.0
    max_rel = 0.0
    for s in range(tape.n_steps):
        raw = tape.raw[s]
        shifted = raw - (dt / params.sigma) * vals
        dwp_b = raw.copy()
        layout.project_values(dwp_b)
        dwp_w = shifted.copy()
        layout.project_values(dwp_w)
        lhs = diffusion_rhs(vals, dwp_b, table, params)
        rhs = (diffusion_rhs(vals, dwp_w, table, params)
               + dt * nonlinear_rhs(vals, table, params.alpha, params.p))
        err = float(np.max(np.abs(lhs - rhs)))
        scale = max(float(np.max(np.abs(lhs))), float(np.max(np.abs(rhs))), 1e-300)
        max_abs = max(max_abs, err)
        max_rel = max(max_rel, err / scale)
        # advance with the linear Euler-Maruyama update on the same draws
        vals = vals + dt * ito_rhs(vals, corr) + lhs
        layout.project_values(vals)
        if not np.all(np.isfinite(vals)):
            raise ConsistencyError(f"non-finite state at step {s + 1} of the shift check")
    return DriftShiftReport(tape.n_steps, max_abs, max_rel, tolerance)
