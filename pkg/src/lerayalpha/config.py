"""Flat key=value run configuration and observable specs.

The parameter space is small, so the configuration format is line-oriented
text with one `key = value` pair per line, full-line comments starting with
`#`, and no nesting.  Unknown keys are rejected with the offending line
number.  `T = 0` is accepted and means "no stepping, snapshot only".
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, DomainError
from .spectral import SpectralField, SpectrumLayout

# 3D measure-equivalence theory wants p > 4/3 on the untruncated lattice
# (2D already admits p > 1/2); smaller exponents still run fine on the
# truncated shell, so they only warn.
P_WARN_THRESHOLD_3D = 4.0 / 3.0


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "1", "yes", "on"):
        return True
    if t in ("false", "0", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


@dataclass
class SimConfig:
    """Validated run parameters; see `parse_config` for the file format."""

    cutoff: int
    alpha: float = 1.0
    sigma: float = 1.0
    p: float = 1.0
    dt: float = 1e-3
    T: float = 0.1
    scheme: str = "em"
    linear_only: bool = False
    seed: int = 0
    ensemble: int = 1
    record_every: int = 1
    workers: int = 1
    out: str = "."
    ic: str = "random_shell:1.0"
    observable: str = "re:1,0,0:2"
    record_modes: bool = False
    noise_tape: str = ""

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.cutoff < 2:
            raise ConfigError(f"N must be >= 2, got {self.cutoff}")
        if self.alpha < 0:
            raise ConfigError("alpha must be nonnegative")
        if self.sigma < 0:
            raise ConfigError("sigma must be nonnegative")
        if self.p < 1:
            raise ConfigError("p must be >= 1")
        if self.dt <= 0:
            raise ConfigError("dt must be positive")
        if self.T < 0:
            raise ConfigError("T must be nonnegative")
        if self.T > 0 and self.dt > self.T:
            raise ConfigError(f"dt = {self.dt} exceeds the horizon T = {self.T}")
        if self.T > 0:
            n = round(self.T / self.dt)
            if n < 1 or abs(n * self.dt - self.T) > 1e-9 * max(self.T, self.dt):
                raise ConfigError("T must be an integer multiple of dt")
        if self.scheme not in ("rk4", "em", "heun"):
            raise ConfigError(f"unknown scheme {self.scheme!r} (rk4 | em | heun)")
        if self.scheme == "rk4" and self.sigma != 0:
            raise ConfigError("scheme rk4 is deterministic; set sigma = 0")
        if not 0 <= self.seed < 2 ** 64:
            raise ConfigError("seed must fit in 64 bits")
        if self.ensemble < 1:
            raise ConfigError("ensemble must be >= 1")
        if self.record_every < 1:
            raise ConfigError("record_every must be >= 1")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        if self.noise_tape and self.ensemble != 1:
            raise ConfigError("noise_tape dumps are only supported for ensemble = 1")
        if self.p <= P_WARN_THRESHOLD_3D:
            warnings.warn(
                f"filter exponent p = {self.p:g} <= 4/3: the 3D measure-equivalence "
                "theory covers p > 4/3 on the untruncated lattice (2D admits p > 1/2); "
                "the truncated simulation itself is unaffected",
                UserWarning, stacklevel=2)

    @property
    def n_steps(self) -> int:
        return int(round(self.T / self.dt)) if self.T > 0 else 0

    def layout(self) -> SpectrumLayout:
        return SpectrumLayout(self.cutoff)

    def with_overrides(self, **kwargs) -> "SimConfig":
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)
            return replace(self, **kwargs)

    def as_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out["N" if f.name == "cutoff" else f.name] = v
        return out


_CONVERTERS = {
    "N": ("cutoff", int),
    "alpha": ("alpha", float),
    "sigma": ("sigma", float),
    "p": ("p", float),
    "dt": ("dt", float),
    "T": ("T", float),
    "scheme": ("scheme", lambda s: s.strip().lower()),
    "linear_only": ("linear_only", _parse_bool),
    "seed": ("seed", int),
    "ensemble": ("ensemble", int),
    "record_every": ("record_every", int),
    "workers": ("workers", int),
    "out": ("out", str),
    "ic": ("ic", str),
    "observable": ("observable", str),
    "record_modes": ("record_modes", _parse_bool),
    "noise_tape": ("noise_tape", str),
}

REQUIRED_KEYS = ("N",)


def parse_config(text: str) -> SimConfig:
    """Parse flat `key = value` text into a validated SimConfig.

    Raises ConfigError with the line number for malformed lines, unknown or
    duplicated keys, and bad values; semantic violations (dt > T, ...) are
    reported without a line number.
    """
    values = {}
    seen = {}
    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {rawline!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in _CONVERTERS:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"line {lineno}: duplicate key {key!r} "
                              f"(first set on line {seen[key]})")
        seen[key] = lineno
        attr, conv = _CONVERTERS[key]
        try:
            values[attr] = conv(value)
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"line {lineno}: invalid value for {key!r}: {exc}")
    for key in REQUIRED_KEYS:
        if _CONVERTERS[key][0] not in values:
            raise ConfigError(f"missing required key {key!r}")
    return SimConfig(**values)


def load_config(path) -> SimConfig:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_config(fh.read())


def make_initial(config: SimConfig, layout: SpectrumLayout | None = None) -> SpectralField:
    """Build the initial state from the configured spec.

    Specs: `random_shell:ENERGY[:SEED]` (seed defaults to the run seed),
    `single_mode:K1,K2,K3:AMPLITUDE`, or `file:PATH` (snapshot NDJSON).
    """
    layout = layout or config.layout()
    spec = config.ic.strip()
    kind, _, rest = spec.partition(":")
    try:
        if kind == "random_shell":
            parts = rest.split(":")
            if len(parts) not in (1, 2) or not parts[0]:
                raise ValueError("expected random_shell:ENERGY[:SEED]")
            energy = float(parts[0])
            seed = int(parts[1]) if len(parts) == 2 else config.seed
            return SpectralField.random_shell(layout, energy, seed)
        if kind == "single_mode":
            kpart, _, amp = rest.partition(":")
            k = tuple(int(c) for c in kpart.split(","))
            if len(k) != 3 or not amp:
                raise ValueError("expected single_mode:K1,K2,K3:AMPLITUDE")
            return SpectralField.single_mode(layout, k, float(amp))
        if kind == "file":
            if not rest:
                raise ValueError("expected file:PATH")
            return SpectralField.load_ndjson(rest, layout)
    except (ValueError, DomainError) as exc:
        raise ConfigError(f"invalid initial-condition spec {spec!r}: {exc}")
    raise ConfigError(f"unknown initial-condition kind {kind!r} "
                      "(random_shell | single_mode | file)")


def parse_observable(spec: str):
    """Turn an observable spec into a callable over an ensemble result.

    Specs: `one` (constant 1, the normalization check), `energy` (terminal
    energy), `re:K1,K2,K3:COMP` / `im:K1,K2,K3:COMP` (real or imaginary part
    of component COMP in {1,2,3} of the terminal coefficient at wavevector K).
    """
    spec = spec.strip()
    if spec == "one":
        def one(ensemble):
            return np.ones(ensemble.n_paths)
        one.__name__ = "one"
        return one
    if spec == "energy":
        def energy(ensemble):
            vals = ensemble.final_values
            return np.einsum("bmj,bmj->b", np.abs(vals), np.abs(vals))
        energy.__name__ = "energy"
        return energy
    part, _, comp = spec.rpartition(":")
    kind, _, kpart = part.partition(":")
    if kind in ("re", "im") and kpart and comp:
        try:
            k = tuple(int(c) for c in kpart.split(","))
            j = int(comp)
            if len(k) != 3 or j not in (1, 2, 3):
                raise ValueError
        except ValueError:
            raise ConfigError(f"bad observable spec {spec!r}")

        def mode_part(ensemble, _k=k, _j=j - 1, _kind=kind):
            layout = ensemble.layout
            if not layout.contains(_k):
                raise ConfigError(f"observable wavevector {_k} is not a stored mode")
            col = ensemble.final_values[:, layout.mode_index(_k), _j]
            return col.real if _kind == "re" else col.imag
        mode_part.__name__ = spec
        return mode_part
    raise ConfigError(f"bad observable spec {spec!r} "
                      "(one | energy | re:K1,K2,K3:COMP | im:K1,K2,K3:COMP)")
