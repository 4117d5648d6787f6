import numpy as np
import pytest

from lerayalpha import SpectralField, SpectrumLayout, project


@pytest.fixture
def layout2():
    return SpectrumLayout(2)


@pytest.fixture
def layout3():
    return SpectrumLayout(3)


@pytest.fixture
def layout4():
    return SpectrumLayout(4)


def random_field(layout, energy=1.0, seed=0):
    return SpectralField.random_shell(layout, energy, seed)


def brute_nonlinear(field, alpha, p=1.0):
    """Full-lattice convolution oracle: a plain double loop over the cube
    using only get_mode and the scalar projector, independent of the
    interaction-table machinery."""
    lay = field.layout
    n = lay.cutoff
    rng = range(-(n - 1), n)
    out = np.zeros((lay.size, 3), dtype=np.complex128)
    for i, k in enumerate(lay.vectors.tolist()):
        kk = np.asarray(k, dtype=np.float64)
        acc = np.zeros(3, dtype=np.complex128)
        for h1 in rng:
            for h2 in rng:
                for h3 in rng:
                    yh = field.get_mode((h1, h2, h3))
                    if not yh.any():
                        continue
                    ykh = field.get_mode((k[0] - h1, k[1] - h2, k[2] - h3))
                    if not ykh.any():
                        continue
                    hns = h1 * h1 + h2 * h2 + h3 * h3
                    w = 1.0 / (1.0 + alpha * hns) ** p
                    acc += -1j * w * (yh @ kk) * project(k, ykh)
        out[i] = acc
    return out


def convective_energy_rate(field, drift):
    """Full-lattice energy derivative sum_k Re<B_k, Y_k> (conjugate pairing)."""
    half = np.sum(np.einsum("mj,mj->m", drift.values, np.conj(field.values)))
    return 2.0 * float(half.real)
