"""Closed evolution of the per-mode covariance matrices of the linear system.

For the linear dynamics the 3x3 second-moment matrices
A_k = E[Re Y_k Re Y_k^T + Im Y_k Im Y_k^T] satisfy an autonomous linear ODE
among themselves:

    dA_k/dt = sum_{h in Gamma_N^k} sigma_h^2 ||P_h(k)||^2
              [ -P_k P_{k-h} A_k - A_k P_{k-h} P_k + 2 P_k A_{k-h} P_k ]

with the conjugate-mode convention A_{-k} = A_k (real parts of conjugate
coefficients have identical second moments).  The ODE uses the same
truncated interaction set as the SDE, so Monte-Carlo estimates and the
integrated ODE are estimates of the same quantity and their comparison is
meaningful.  Under that symmetric truncation sum_k Tr(A_k) is a conserved
quantity of the ODE, mirroring pathwise energy conservation.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dynamics import interaction_table
from .errors import ConsistencyError, DomainError
from .noise import NoiseParams
from .spectral import SpectralField, SpectrumLayout


@dataclass
class CovarianceState:
    """Map from stored modes to symmetric PSD 3x3 matrices, with time stamp."""

    layout: SpectrumLayout
    matrices: np.ndarray  # (M, 3, 3) float64
    t: float = 0.0

    def __post_init__(self):
        self.matrices = np.asarray(self.matrices, dtype=np.float64)
        if self.matrices.shape != (self.layout.size, 3, 3):
            raise DomainError(
                f"matrices must have shape ({self.layout.size}, 3, 3)")

    @classmethod
    def zeros(cls, layout: SpectrumLayout, t: float = 0.0) -> "CovarianceState":
        return cls(layout, np.zeros((layout.size, 3, 3)), t)

    @classmethod
    def from_field(cls, field_: SpectralField, t: float = 0.0) -> "CovarianceState":
        """Covariance of a deterministic state: outer(Re) + outer(Im)."""
        re, im = field_.values.real, field_.values.imag
        mats = np.einsum("mi,mj->mij", re, re) + np.einsum("mi,mj->mij", im, im)
        return cls(field_.layout, mats, t)

    # -- structural invariants -------------------------------------------

    def trace_sum(self) -> float:
        return float(np.einsum("mii->", self.matrices))

    def symmetry_defect(self) -> float:
        a = self.matrices
        num = np.linalg.norm(a - np.transpose(a, (0, 2, 1)), axis=(1, 2))
        den = np.maximum(np.linalg.norm(a, axis=(1, 2)), 1e-300)
        return float(np.max(num / den)) if a.size else 0.0

    def min_eigen_ratio(self) -> float:
        """min over modes of lambda_min / trace (>= -1e-10 for PSD within tolerance)."""
        a = 0.5 * (self.matrices + np.transpose(self.matrices, (0, 2, 1)))
        eigs = np.linalg.eigvalsh(a)
        tr = np.maximum(np.einsum("mii->m", a), 1e-300)
        return float(np.min(eigs[:, 0] / tr)) if a.size else 0.0

    def kernel_residual(self) -> float:
        """max over modes of ||A_k k|| / (||A_k|| ||k||)."""
        ak = np.einsum("mij,mj->mi", self.matrices, self.layout.vectors_f)
        num = np.linalg.norm(ak, axis=1)
        den = np.maximum(np.linalg.norm(self.matrices, axis=(1, 2))
                         * np.sqrt(self.layout.norms_sq.astype(np.float64)), 1e-300)
        return float(np.max(num / den)) if ak.size else 0.0

    def projection_residual(self) -> float:
        """max over modes of ||P_k A_k P_k - A_k|| / ||A_k||."""
        p = self.layout.projectors
        pap = np.einsum("mij,mjk,mkl->mil", p, self.matrices, p)
        num = np.linalg.norm(pap - self.matrices, axis=(1, 2))
        den = np.maximum(np.linalg.norm(self.matrices, axis=(1, 2)), 1e-300)
        return float(np.max(num / den)) if pap.size else 0.0

    def structural_report(self) -> dict:
        return {
            "symmetry_defect": self.symmetry_defect(),
            "min_eigen_ratio": self.min_eigen_ratio(),
            "kernel_residual": self.kernel_residual(),
            "projection_residual": self.projection_residual(),
            "trace_sum": self.trace_sum(),
        }


def covariance_rhs(state: CovarianceState, params: NoiseParams) -> np.ndarray:
    """Time derivative of the covariance matrices, shape (M, 3, 3).

    Lookups of A at k-h outside the stored half-lattice use A_{-m} = A_m.
    """
    table = interaction_table(state.layout)
    a = state.matrices
    c = table.correction_matrices(params)
    left = np.einsum("mij,mjk->mik", c, a)
    right = np.einsum("mij,mkj->mik", a, c)  # A_k (P_{k-h} P_k) summed = A C^T
    coef = params.sigma_h(table.h_ns) ** 2 * table.phk_sq
    gathered = coef[:, None, None] * a[table.khm_mode]
    s = np.zeros_like(a)
    if table.n_terms:
        sums = np.add.reduceat(gathered, table.seg_starts, axis=0)
        s[table.seg_modes] = sums
    p = state.layout.projectors
    sandwich = np.einsum("mij,mjk,mkl->mil", p, s, p)
    return -left - right + 2.0 * sandwich


@dataclass
class CovarianceDiagnostics:
    """Bookkeeping of one covariance integration."""

    times: np.ndarray
    trace_sums: np.ndarray
    min_eigen_ratio: float
    psd_violations: int
    time_integrated: "TimeIntegratedCovariance"
    recorded: list = field(default_factory=list)  # [(t, matrices)] at the cadence

    @property
    def max_trace_drift(self) -> float:
        t0 = self.trace_sums[0]
        scale = max(abs(t0), 1e-300)
        return float(np.max(np.abs(self.trace_sums - t0)) / scale)


@dataclass
class TimeIntegratedCovariance:
    """B_k = integral of A_k over [0, T] (trapezoidal), with diagnostics."""

    layout: SpectrumLayout
    matrices: np.ndarray
    horizon: float

    def trace_sum(self) -> float:
        return float(np.einsum("mii->", self.matrices))

    def max_eigenvalues(self) -> np.ndarray:
        sym = 0.5 * (self.matrices + np.transpose(self.matrices, (0, 2, 1)))
        return np.linalg.eigvalsh(sym)[:, -1]

    def report(self) -> dict:
        """Per-mode maximal eigenvalue and trace, ordered by ||k||^2; the
        traces must decay across the shell for the uniqueness argument."""
        traces = np.einsum("mii->m", self.matrices)
        return {
            "horizon": self.horizon,
            "trace_sum": self.trace_sum(),
            "norm_sq": self.layout.norms_sq.tolist(),
            "traces": traces.tolist(),
            "max_eigenvalues": self.max_eigenvalues().tolist(),
        }


def evolve_covariance(a0: CovarianceState, params: NoiseParams, dt: float, horizon: float,
                      record_every: int | None = None,
                      psd_tolerance: float = 1e-10):
    """Integrate the covariance ODE with classical RK4.

    Matrices are symmetrized after every step; positive semidefiniteness is
    checked (flagged in the diagnostics, never silently enforced).

    Returns (state_at_horizon, CovarianceDiagnostics).
    """
    if dt <= 0:
        raise DomainError("dt must be positive")
    if horizon < 0:
        raise DomainError("horizon must be nonnegative")
    n_steps = int(round(horizon / dt)) if horizon > 0 else 0
    if horizon > 0 and abs(n_steps * dt - horizon) > 1e-9 * max(horizon, dt):
        raise DomainError("horizon must be an integer number of steps")
    layout = a0.layout
    a = a0.matrices.copy()
    t0 = a0.t

    def rhs(mats):
        return covariance_rhs(CovarianceState(layout, mats, 0.0), params)

    traces = np.empty(n_steps + 1)
    traces[0] = float(np.einsum("mii->", a))
    b_int = np.zeros_like(a)
    min_ratio = CovarianceState(layout, a, t0).min_eigen_ratio()
    violations = 1 if min_ratio < -psd_tolerance else 0
    recorded = [(t0, a.copy())] if record_every else []

    for s in range(n_steps):
        prev = a
        k1 = rhs(a)
        k2 = rhs(a + 0.5 * dt * k1)
        k3 = rhs(a + 0.5 * dt * k2)
        k4 = rhs(a + dt * k3)
        a = a + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        a = 0.5 * (a + np.transpose(a, (0, 2, 1)))
        if not np.all(np.isfinite(a)):
            raise ConsistencyError(f"non-finite covariance after step {s + 1}")
        b_int += 0.5 * dt * (prev + a)
        traces[s + 1] = float(np.einsum("mii->", a))
        state = CovarianceState(layout, a, t0 + (s + 1) * dt)
        ratio = state.min_eigen_ratio()
        min_ratio = min(min_ratio, ratio)
        if ratio < -psd_tolerance:
            violations += 1
        if record_every and ((s + 1) % record_every == 0 or s + 1 == n_steps):
            recorded.append((t0 + (s + 1) * dt, a.copy()))

    final = CovarianceState(layout, a, t0 + n_steps * dt)
    diag = CovarianceDiagnostics(
        times=t0 + dt * np.arange(n_steps + 1),
        trace_sums=traces,
        min_eigen_ratio=min_ratio,
        psd_violations=violations,
        time_integrated=TimeIntegratedCovariance(layout, b_int, n_steps * dt),
        recorded=recorded,
    )
    return final, diag


def mc_covariance(ensemble, t: float):
    """Empirical covariance matrices at a recorded time of a linear ensemble.

    Returns (CovarianceState, standard_errors) where the errors array has the
    same (M, 3, 3) shape (entrywise standard error of the mean).
    """
    if not getattr(ensemble, "linear_only", False):
        raise DomainError("covariance estimation requires linear-only trajectories")
    snap = ensemble.snapshot_at(t)  # (paths, M, 3), raises if t was not recorded
    re, im = snap.real, snap.imag
    prods = np.einsum("bmi,bmj->bmij", re, re) + np.einsum("bmi,bmj->bmij", im, im)
    mean = prods.mean(axis=0)
    n = prods.shape[0]
    if n > 1:
        stderr = prods.std(axis=0, ddof=1) / np.sqrt(n)
    else:
        stderr = np.zeros_like(mean)
    return CovarianceState(ensemble.layout, mean, t), stderr


def cross_validate(ode_state: CovarianceState, mc_state: CovarianceState,
                   stderr: np.ndarray, se_floor: float = 1e-12):
    """Entrywise z-scores between the ODE solution and the MC estimate.

    A small floor on the standard error absorbs entries that are structural
    zeros on both sides (roundoff-level differences with roundoff-level
    spread).
    """
    scale = max(float(np.max(np.abs(ode_state.matrices)) if ode_state.matrices.size else 0.0),
                1e-300)
    floor = se_floor * scale
    z = np.abs(ode_state.matrices - mc_state.matrices) / np.maximum(stderr, floor)
    return z
