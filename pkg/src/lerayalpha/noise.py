"""Projected complex Brownian increments driving the stochastic dynamics.

One independent C^3-valued standard Brownian motion W'_h is attached to each
canonical half-lattice mode h (six independent real coordinates, each a
standard real Brownian motion).  The increments actually entering the
equations are the projections dW_h = P_h(dW'_h); increments for -h follow by
conjugation.  Raw (pre-projection) draws are kept because the change of
measure shifts them directly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .spectral import STREAM_TRAJECTORY, SpectrumLayout, philox


@dataclass(frozen=True)
class NoiseParams:
    """Noise amplitude profile sigma_h = sigma / (1 + alpha ||h||^2)^p.

    `p` is the smoothing exponent of the filter (default 1).  On the
    truncated shell the profile always has a finite square sum; the 3D
    measure-equivalence theory additionally wants p > 4/3 on the full
    lattice, which the configuration layer warns about.
    """

    sigma: float
    alpha: float
    p: float = 1.0

    def __post_init__(self):
        if self.sigma < 0:
            raise DomainError("sigma must be nonnegative")
        if self.alpha < 0:
            raise DomainError("alpha must be nonnegative")
        if self.p < 1:
            raise DomainError("filter exponent p must be >= 1")

    def sigma_h(self, norms_sq) -> np.ndarray:
        """Per-mode amplitudes for the given squared norms."""
        base = 1.0 + self.alpha * np.asarray(norms_sq, dtype=np.float64)
        return self.sigma / base**self.p

    def profile(self, layout: SpectrumLayout) -> np.ndarray:
        return self.sigma_h(layout.norms_sq)

    def sum_sigma_sq(self, layout: SpectrumLayout) -> float:
        """sum over the extended shell of sigma_h^2 (finite by construction)."""
        return 2.0 * float(np.sum(self.profile(layout) ** 2))

    def key(self):
        return (self.sigma, self.alpha, self.p)


def proj_norm_sq(h, k) -> float:
    """||P_h(k)||^2 for integer wavevectors, exact in the parallel case.

    Computed as (||k||^2 ||h||^2 - <k,h>^2) / ||h||^2 with integer numerator,
    so h parallel to k gives exactly 0.0.
    """
    hv = np.asarray(h, dtype=np.int64)
    kv = np.asarray(k, dtype=np.int64)
    hs = int(hv @ hv)
    if hs == 0:
        raise DomainError("projector undefined for the zero wavevector")
    num = int(kv @ kv) * hs - int(hv @ kv) ** 2
    return num / hs


def _draw_standard(seed: int, stream: int, n_steps: int, n_modes: int) -> np.ndarray:
    """(n_steps, M, 3) complex of unit-variance draws; the seeding contract
    shared by single-trajectory and batched ensemble runs."""
    gen = philox(seed, stream)
    d = gen.standard_normal((n_steps, n_modes, 3, 2))
    return np.ascontiguousarray(d[..., 0] + 1j * d[..., 1])


class NoiseIncrement:
    """Increments over one step: raw draws plus their projections.

    `raw` holds dW'_h with independent real coordinates of variance dt;
    `projected` is P_h applied componentwise, which is what the dynamics
    consume.  Lookup of -h (conjugation) is handled by `get`.
    """

    __slots__ = ("layout", "raw", "_projected")

    def __init__(self, layout: SpectrumLayout, raw: np.ndarray):
        if raw.shape != (layout.size, 3):
            raise DomainError(f"raw increments must have shape ({layout.size}, 3)")
        self.layout = layout
        self.raw = raw
        self._projected = None

    @property
    def projected(self) -> np.ndarray:
        if self._projected is None:
            arr = self.raw.copy()
            self.layout.project_values(arr)
            self._projected = arr
        return self._projected

    def get(self, h) -> np.ndarray:
        """Projected increment for any h in the conjugate-extended shell."""
        hit = self.layout.ext_lookup(h)
        if hit is None:
            return np.zeros(3, dtype=np.complex128)
        i, conj = hit
        return np.conj(self.projected[i]) if conj else self.projected[i].copy()


def sample_increment(rng: np.random.Generator, dt: float,
                     layout: SpectrumLayout) -> NoiseIncrement:
    """Draw one set of Brownian increments over a step of length dt.

    For each stored mode, six independent real Gaussians of variance dt
    (real and imaginary parts of the three components), then the projection
    P_h.  Increments for distinct modes are independent.
    """
    if dt <= 0:
        raise DomainError("dt must be positive")
    d = rng.standard_normal((layout.size, 3, 2))
    raw = (d[..., 0] + 1j * d[..., 1]) * np.sqrt(dt)
    return NoiseIncrement(layout, raw)


def scalar_increment(noise: NoiseIncrement, h, k) -> complex:
    """<dW_h, k> with k a real lattice vector: the scalar Brownian increment
    attached to the pair (h, k).

    Uses the conjugate extension for h outside the stored half-lattice and
    returns 0 for h outside the extended shell (the term is absent from the
    truncated sums).  When h is parallel to k the value is exactly zero.
    """
    kv = np.asarray(k, dtype=np.int64)
    if int(kv @ kv) == 0:
        raise DomainError("k must be nonzero")
    hit = noise.layout.ext_lookup(h)
    if hit is None:
        return 0.0 + 0.0j
    if proj_norm_sq(h, kv) == 0.0:
        return 0.0 + 0.0j
    i, conj = hit
    w = np.conj(noise.projected[i]) if conj else noise.projected[i]
    return complex(w @ kv.astype(np.float64))


class NoiseTape:
    """Pre-drawn raw increments for a whole trajectory.

    Shape (n_steps, M, 3) complex with real-coordinate variance dt.  A tape
    fixes the Brownian path, so the same tape can be replayed through
    different schemes, and coarsening by an integer factor yields the
    increments of the same path on a coarser grid.
    """

    __slots__ = ("layout", "dt", "raw")

    def __init__(self, layout: SpectrumLayout, dt: float, raw: np.ndarray):
        if dt <= 0:
            raise DomainError("dt must be positive")
        if raw.ndim != 3 or raw.shape[1:] != (layout.size, 3):
            raise DomainError(f"raw tape must have shape (n, {layout.size}, 3)")
        self.layout = layout
        self.dt = float(dt)
        self.raw = raw

    @classmethod
    def sample(cls, layout: SpectrumLayout, n_steps: int, dt: float, seed: int,
               stream: int = STREAM_TRAJECTORY) -> "NoiseTape":
        if dt <= 0:
            raise DomainError("dt must be positive")
        raw = _draw_standard(seed, stream, n_steps, layout.size) * np.sqrt(dt)
        return cls(layout, dt, raw)

    @property
    def n_steps(self) -> int:
        return self.raw.shape[0]

    def increment(self, step: int) -> NoiseIncrement:
        return NoiseIncrement(self.layout, self.raw[step])

    def projected_all(self) -> np.ndarray:
        arr = self.raw.copy()
        self.layout.project_values(arr)
        return arr

    def coarsen(self, factor: int) -> "NoiseTape":
        """Same Brownian path on a grid coarser by an integer factor."""
        factor = int(factor)
        if factor < 1 or self.n_steps % factor:
            raise DomainError(f"factor {factor} does not divide {self.n_steps} steps")
        raw = self.raw.reshape(self.n_steps // factor, factor, -1, 3).sum(axis=1)
        return NoiseTape(self.layout, self.dt * factor, raw)

    def dump_ndjson(self, path) -> None:
        """One line per (step, mode): the six raw real coordinates."""
        with open(path, "w", encoding="utf-8") as fh:
            meta = {"meta": {"cutoff": self.layout.cutoff, "dt": self.dt,
                             "steps": self.n_steps}}
            fh.write(json.dumps(meta, separators=(",", ":")) + "\n")
            for s in range(self.n_steps):
                for k, w in zip(self.layout.vectors.tolist(), self.raw[s]):
                    rec = {"step": s, "h": k,
                           "w": [w[0].real, w[0].imag, w[1].real, w[1].imag,
                                 w[2].real, w[2].imag]}
                    fh.write(json.dumps(rec, separators=(",", ":")) + "\n")

    @classmethod
    def load_ndjson(cls, path) -> "NoiseTape":
        with open(path, "r", encoding="utf-8") as fh:
            header = json.loads(fh.readline())
            try:
                meta = header["meta"]
                layout = SpectrumLayout(int(meta["cutoff"]))
                dt = float(meta["dt"])
                n_steps = int(meta["steps"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DomainError(f"{path}: malformed tape header ({exc})")
            raw = np.zeros((n_steps, layout.size, 3), dtype=np.complex128)
            for lineno, line in enumerate(fh, start=2):
                line = line.strip()
                if not line:
                    continue
                rec = json.loads(line)
                try:
                    s = int(rec["step"])
                    i = layout.mode_index(rec["h"])
                    w = [float(x) for x in rec["w"]]
                except (KeyError, TypeError, ValueError) as exc:
                    raise DomainError(f"{path}: line {lineno}: malformed record ({exc})")
                raw[s, i] = [complex(w[0], w[1]), complex(w[2], w[3]), complex(w[4], w[5])]
        return cls(layout, dt, raw)
