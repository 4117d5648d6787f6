"""Wavevector lattice, half-spectrum fields and orthogonal projectors.

The simulated velocity field is real-valued, so its Fourier coefficients
satisfy Y(-k) = conj(Y(k)).  Only one representative per conjugate pair is
stored: the canonical half-lattice

    J = {k : k1 > 0, or (k1 = 0, k2 > 0), or (k1 = 0, k2 = 0, k3 > 0)}

truncated to the open shell 0 < ||k|| < N (integer test ||k||^2 < N^2).
Conjugate symmetry is structural: looking up -k returns the conjugate of
the stored value, so it can never be violated.  Incompressibility
(<Y_k, k> = 0) is enforced by projecting at construction and after every
additive update.
"""

from __future__ import annotations

import json

import numpy as np

from .errors import ConsistencyError, DomainError

# |<Y_k,k>| <= INCOMPRESSIBILITY_TOL * ||Y_k|| * ||k|| for any accepted field.
INCOMPRESSIBILITY_TOL = 1e-12

# Stream tags for the second 64-bit word of a Philox key; keeps the noise
# used by different purposes (trajectories, initial conditions, direct
# nonlinear ensembles) on provably disjoint counter-based streams.
STREAM_TRAJECTORY = 0
STREAM_NONLINEAR = 1
STREAM_INITIAL = 2


def philox(seed: int, stream: int = STREAM_TRAJECTORY) -> np.random.Generator:
    """Counter-based generator for a (64-bit seed, stream) pair."""
    key = (int(stream) << 64) | (int(seed) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.Philox(key=key))


def in_half_lattice(k) -> bool:
    """Membership in the canonical half-lattice J (one of each +-k pair)."""
    k1, k2, k3 = int(k[0]), int(k[1]), int(k[2])
    return k1 > 0 or (k1 == 0 and k2 > 0) or (k1 == 0 and k2 == 0 and k3 > 0)


def projector_matrix(k) -> np.ndarray:
    """3x3 matrix of the orthogonal projection onto the plane normal to k.

    P_k = I - k k^T / ||k||^2.  Symmetric, idempotent, eigenvalues {0,1,1},
    and P_k k = 0.
    """
    kv = np.asarray(k, dtype=np.int64)
    ns = int(kv @ kv)
    if ns == 0:
        raise DomainError("projector undefined for the zero wavevector")
    kf = kv.astype(np.float64)
    return np.eye(3) - np.outer(kf, kf) / ns


def project(k, v) -> np.ndarray:
    """Project a (possibly complex) 3-vector onto the plane normal to k.

    Acts componentwise on real and imaginary parts:
    P_k(v) = v - (<v,k>/<k,k>) k with k real.
    """
    kv = np.asarray(k, dtype=np.int64)
    ns = int(kv @ kv)
    if ns == 0:
        raise DomainError("projection undefined for the zero wavevector")
    vv = np.asarray(v)
    kf = kv.astype(np.float64)
    return vv - (vv @ kf) / ns * kf


class SpectrumLayout:
    """Canonical enumeration of the truncated half-lattice J_N.

    Modes are stored densely in a fixed deterministic order (sorted by
    squared norm, then lexicographically), which pins the floating-point
    summation order of every reduction in the package.  Immutable; safe to
    share across threads.
    """

    def __init__(self, cutoff: int):
        cutoff = int(cutoff)
        if cutoff < 1:
            raise DomainError(f"cutoff must be a positive integer, got {cutoff}")
        self.cutoff = cutoff

        rng = np.arange(-(cutoff - 1), cutoff, dtype=np.int64)
        grid = np.stack(np.meshgrid(rng, rng, rng, indexing="ij"), axis=-1).reshape(-1, 3)
        ns = np.einsum("ij,ij->i", grid, grid)
        k1, k2, k3 = grid[:, 0], grid[:, 1], grid[:, 2]
        half = (k1 > 0) | ((k1 == 0) & (k2 > 0)) | ((k1 == 0) & (k2 == 0) & (k3 > 0))
        keep = (ns > 0) & (ns < cutoff * cutoff) & half
        vectors = grid[keep]
        ns = ns[keep]
        order = np.lexsort((vectors[:, 2], vectors[:, 1], vectors[:, 0], ns))
        self.vectors = np.ascontiguousarray(vectors[order])
        self.norms_sq = np.ascontiguousarray(ns[order])
        self.size = self.vectors.shape[0]

        self.vectors_f = self.vectors.astype(np.float64)
        self.inv_norms_sq = 1.0 / self.norms_sq.astype(np.float64)
        self._index = {tuple(v): i for i, v in enumerate(self.vectors.tolist())}
        self._projectors = None
        self._interactions = None  # filled lazily by dynamics.interaction_table

    # -- membership ------------------------------------------------------

    def in_shell(self, k) -> bool:
        """True if 0 < ||k||^2 < N^2 (exact integer comparison)."""
        kv = np.asarray(k, dtype=np.int64)
        ns = int(kv @ kv)
        return 0 < ns < self.cutoff * self.cutoff

    def contains(self, k) -> bool:
        """True if k is one of the stored canonical representatives."""
        return tuple(int(c) for c in k) in self._index

    def mode_index(self, k) -> int:
        return self._index[tuple(int(c) for c in k)]

    def ext_lookup(self, k):
        """Storage slot for any lattice vector in the conjugate-extended shell.

        Returns (index, conj) where conj says the stored value must be
        conjugated, or None when k lies outside the extended shell (or is 0).
        """
        key = tuple(int(c) for c in k)
        i = self._index.get(key)
        if i is not None:
            return i, False
        i = self._index.get((-key[0], -key[1], -key[2]))
        if i is not None:
            return i, True
        return None

    # -- derived geometry --------------------------------------------------

    @property
    def projectors(self) -> np.ndarray:
        """(M,3,3) stack of P_k for the stored modes."""
        if self._projectors is None:
            kf = self.vectors_f
            outer = np.einsum("mi,mj->mij", kf, kf)
            self._projectors = np.eye(3)[None, :, :] - outer * self.inv_norms_sq[:, None, None]
        return self._projectors

    def project_values(self, values: np.ndarray) -> np.ndarray:
        """Remove the along-k component of every stored mode, in place.

        `values` has shape (..., M, 3); the projection acts mode by mode and
        componentwise on real/imaginary parts.
        """
        coef = np.einsum("...mj,mj->...m", values, self.vectors_f) * self.inv_norms_sq
        values -= coef[..., None] * self.vectors_f
        return values

    def __eq__(self, other):
        return isinstance(other, SpectrumLayout) and other.cutoff == self.cutoff

    def __hash__(self):
        return hash(("SpectrumLayout", self.cutoff))

    def __repr__(self):
        return f"SpectrumLayout(cutoff={self.cutoff}, modes={self.size})"


class SpectralField:
    """Half-spectrum velocity state: one complex 3-vector per mode in J_N.

    Coefficients for -k are implicit through conjugation, the coefficient at
    the origin is implicitly zero, and every stored vector is orthogonal to
    its wavevector.  Treat instances as immutable; updates happen on copies
    inside the integrators.
    """

    __slots__ = ("layout", "values")

    def __init__(self, layout: SpectrumLayout, values: np.ndarray, project: bool = True,
                 copy: bool = True):
        values = np.array(values, dtype=np.complex128, copy=copy)
        if values.shape != (layout.size, 3):
            raise DomainError(
                f"values must have shape ({layout.size}, 3), got {values.shape}")
        if project:
            layout.project_values(values)
        self.layout = layout
        self.values = values

    # -- constructors -----------------------------------------------------

    @classmethod
    def zeros(cls, layout: SpectrumLayout) -> "SpectralField":
        return cls(layout, np.zeros((layout.size, 3), dtype=np.complex128),
                   project=False, copy=False)

    @classmethod
    def from_modes(cls, layout: SpectrumLayout, modes: dict) -> "SpectralField":
        """Build a field from {wavevector tuple: complex 3-vector}.

        Every key must be a stored canonical mode; unspecified modes are zero.
        """
        values = np.zeros((layout.size, 3), dtype=np.complex128)
        for k, v in modes.items():
            if not layout.contains(k):
                raise DomainError(f"mode {tuple(k)} is not a stored mode of {layout!r}")
            values[layout.mode_index(k)] = np.asarray(v, dtype=np.complex128)
        return cls(layout, values, project=True, copy=False)

    @classmethod
    def single_mode(cls, layout: SpectrumLayout, k, amplitude: float) -> "SpectralField":
        """One conjugate pair +-k carrying total energy amplitude^2.

        The direction is the projection of a fixed axis onto the plane
        normal to k, so the construction is deterministic.
        """
        if not layout.contains(k):
            raise DomainError(f"mode {tuple(k)} is not a stored mode of {layout!r}")
        kv = np.asarray(k, dtype=np.int64)
        direction = None
        for axis in np.eye(3):
            cand = project(kv, axis)
            norm = np.linalg.norm(cand)
            if norm > 0.5:  # axis not (nearly) parallel to k
                direction = cand / norm
                break
        values = np.zeros((layout.size, 3), dtype=np.complex128)
        values[layout.mode_index(kv)] = float(amplitude) * direction
        return cls(layout, values, project=True, copy=False)

    @classmethod
    def random_shell(cls, layout: SpectrumLayout, energy: float, seed: int) -> "SpectralField":
        """Random admissible field with the requested total energy.

        Complex Gaussian amplitudes with a 1/(1+||k||^2) spectral envelope,
        projected to be incompressible, then rescaled so that
        sum_{k in J_N} ||Y_k||^2 equals `energy` exactly.
        """
        if energy < 0:
            raise DomainError("energy must be nonnegative")
        gen = philox(seed, STREAM_INITIAL)
        draws = gen.standard_normal((layout.size, 3, 2))
        values = (draws[..., 0] + 1j * draws[..., 1]).astype(np.complex128)
        values *= (1.0 / (1.0 + layout.norms_sq.astype(np.float64)))[:, None]
        layout.project_values(values)
        if energy > 0:
            current = float(np.sum(np.abs(values) ** 2))
            if current == 0.0:
                raise ConsistencyError("degenerate random draw, retry with another seed")
            values *= np.sqrt(energy / current)
        else:
            values[:] = 0
        return cls(layout, values, project=False, copy=False)

    # -- accessors ---------------------------------------------------------

    def copy(self) -> "SpectralField":
        return SpectralField(self.layout, self.values, project=False, copy=True)

    def get_mode(self, k) -> np.ndarray:
        """Coefficient at any lattice vector, via the conjugate extension.

        Returns the stored value for k in J_N, its conjugate for -k in J_N,
        and the zero vector outside the truncated shell (including k = 0).
        """
        hit = self.layout.ext_lookup(k)
        if hit is None:
            return np.zeros(3, dtype=np.complex128)
        i, conj = hit
        return np.conj(self.values[i]) if conj else self.values[i].copy()

    def energy(self) -> float:
        """Total energy (1/2) sum_{k in Z^3} ||Y_k||^2 = sum_{k in J_N} ||Y_k||^2."""
        return float(np.sum(np.abs(self.values) ** 2))

    def evaluate_physical(self, x) -> np.ndarray:
        """Velocity at a physical point: sum over the extended shell of
        Y_k exp(i <x,k>).

        The conjugate-symmetric sum is real; the residual imaginary part is
        checked against 1e-10 of the field magnitude and discarded.
        """
        x = np.asarray(x, dtype=np.float64)
        phases = np.exp(1j * (self.layout.vectors_f @ x))
        terms = self.values * phases[:, None]
        total = terms.sum(axis=0) + np.conj(terms).sum(axis=0)
        scale = float(np.sum(np.abs(self.values)))
        residual = float(np.max(np.abs(total.imag))) if total.size else 0.0
        if residual > 1e-10 * (1.0 + 2.0 * scale):
            raise ConsistencyError(
                f"imaginary residual {residual:.3e} in physical-space evaluation "
                f"(field magnitude {scale:.3e})")
        return total.real

    def incompressibility_residual(self) -> float:
        """max_k |<Y_k,k>| / (||Y_k|| ||k||), 0 for empty/zero fields."""
        dots = np.abs(np.einsum("mj,mj->m", self.values, self.layout.vectors_f))
        scale = np.linalg.norm(self.values, axis=1) * np.sqrt(
            self.layout.norms_sq.astype(np.float64))
        mask = scale > 0
        if not np.any(mask):
            return 0.0
        return float(np.max(dots[mask] / scale[mask]))

    # -- snapshot format ----------------------------------------------------

    def save_ndjson(self, path) -> None:
        """Write one line per stored mode: {"k": [...], "re": [...], "im": [...]}."""
        with open(path, "w", encoding="utf-8") as fh:
            for k, v in zip(self.layout.vectors.tolist(), self.values):
                line = {
                    "k": k,
                    "re": [float(c) for c in v.real],
                    "im": [float(c) for c in v.imag],
                }
                fh.write(json.dumps(line, separators=(",", ":")) + "\n")

    @classmethod
    def load_ndjson(cls, path, layout: SpectrumLayout) -> "SpectralField":
        field, report = cls.load_ndjson_checked(path, layout)
        return field

    @classmethod
    def load_ndjson_checked(cls, path, layout: SpectrumLayout):
        """Load a snapshot and report raw incompressibility violations.

        Vectors outside J_N (non-canonical, outside the shell, duplicated)
        are rejected.  Returns (field, report) where report lists the modes
        whose raw data violated <Y_k,k> = 0 beyond the validation tolerance;
        the returned field is projected regardless.
        """
        values = np.zeros((layout.size, 3), dtype=np.complex128)
        seen = set()
        violations = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    rec = json.loads(line)
                    k = tuple(int(c) for c in rec["k"])
                    re = [float(c) for c in rec["re"]]
                    im = [float(c) for c in rec["im"]]
                    if len(re) != 3 or len(im) != 3:
                        raise ValueError("re/im must have 3 entries")
                except (KeyError, TypeError, ValueError) as exc:
                    raise DomainError(f"{path}: line {lineno}: malformed record ({exc})")
                if not layout.contains(k):
                    raise DomainError(
                        f"{path}: line {lineno}: vector {k} is outside J_N "
                        f"(cutoff {layout.cutoff})")
                if k in seen:
                    raise DomainError(f"{path}: line {lineno}: duplicate mode {k}")
                seen.add(k)
                v = np.array(re, dtype=np.float64) + 1j * np.array(im, dtype=np.float64)
                if not np.all(np.isfinite(v.view(np.float64))):
                    raise DomainError(f"{path}: line {lineno}: non-finite coefficient")
                kf = np.asarray(k, dtype=np.float64)
                dot = abs(v @ kf)
                scale = np.linalg.norm(v) * np.linalg.norm(kf)
                if dot > INCOMPRESSIBILITY_TOL * scale:
                    violations.append({"k": list(k), "residual": float(dot / scale)})
                values[layout.mode_index(k)] = v
        field = cls(layout, values, project=True, copy=False)
        return field, violations
