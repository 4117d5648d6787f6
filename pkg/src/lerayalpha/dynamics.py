"""Right-hand-side assembly: convective drift, stochastic diffusion, and the
Ito correction.

All three sums run over the symmetric interaction set

    Gamma_N^k = {h : 0 < ||h|| < N, 0 < ||k-h|| < N},

the same truncation for every term, which is what makes the discrete energy
cancellation of the convective term exact and keeps the Monte-Carlo and
covariance-ODE truncations identical.  The convolutions are direct sums over
a precomputed (k, h) pair table (no FFT): at desk scale this is fast, and the
fixed term order makes every evaluation bit-reproducible.

Value arrays have shape (..., M, 3) complex with leading batch axes allowed;
index -2 runs over the stored half-lattice modes.
"""

from __future__ import annotations

import numpy as np

from .noise import NoiseIncrement, NoiseParams
from .spectral import SpectralField, SpectrumLayout


class InteractionTable:
    """Flattened Gamma_N^k structure shared by all right-hand sides.

    Terms are enumerated in a fixed order (stored mode index, then extended
    shell index of h) and sorted segments allow one `np.add.reduceat` per
    evaluation.  For each term t:

        out_idx[t]   index of the output mode k in the half-lattice
        h_ext[t]     index of h in the extended shell [J_N ; -J_N]
        khm_ext[t]   index of k - h in the extended shell
        k_vec[t]     k as a float 3-vector
        h_ns[t]      ||h||^2
        phk_sq[t]    ||P_h(k)||^2, exact zero for h parallel to k
    """

    def __init__(self, layout: SpectrumLayout):
        self.layout = layout
        n = layout.cutoff
        m = layout.size
        vec = layout.vectors
        ext = np.concatenate([vec, -vec], axis=0)
        ext_ns = np.concatenate([layout.norms_sq, layout.norms_sq])

        # khm[i, e] = k_i - h_e; keep terms with k-h inside the open shell.
        khm = vec[:, None, :] - ext[None, :, :]
        khm_ns = np.einsum("iej,iej->ie", khm, khm)
        mask = (khm_ns > 0) & (khm_ns < n * n)
        out_idx, h_ext = np.nonzero(mask)  # row-major: sorted by out_idx

        # Integer code -> extended-shell index, for the k-h lookup.
        span = 4 * n + 1
        off = 2 * n
        codes = (ext[:, 0] + off) * span * span + (ext[:, 1] + off) * span + (ext[:, 2] + off)
        lut = np.full(span ** 3, -1, dtype=np.int64)
        lut[codes] = np.arange(ext.shape[0])
        kh = khm[mask]
        kh_codes = (kh[:, 0] + off) * span * span + (kh[:, 1] + off) * span + (kh[:, 2] + off)
        khm_ext = lut[kh_codes]

        kv = vec[out_idx]
        hv = ext[h_ext]
        hs = ext_ns[h_ext]
        # ||P_h(k)||^2 = (||k||^2 ||h||^2 - <k,h>^2) / ||h||^2, integer numerator.
        num = layout.norms_sq[out_idx] * hs - np.einsum("tj,tj->t", kv, hv) ** 2
        self.out_idx = out_idx.astype(np.int64)
        self.h_ext = h_ext.astype(np.int64)
        self.khm_ext = khm_ext
        self.khm_mode = khm_ext % m  # half-lattice slot of k-h (A_{-v} = A_v lookups)
        self.k_vec = kv.astype(np.float64)
        # complex copy: keeps the hot einsums on the fast same-dtype path
        self.k_vec_c = kv.astype(np.complex128)
        self.h_ns = hs.astype(np.float64)
        self.phk_sq = num.astype(np.float64) / hs.astype(np.float64)
        self.n_terms = out_idx.shape[0]

        self.seg_modes, self.seg_starts = np.unique(self.out_idx, return_index=True)
        self.n_modes = m
        self._weights = {}
        self._corrections = {}
        self._corrections_c = {}

    def convective_weights(self, alpha: float, p: float = 1.0) -> np.ndarray:
        """Per-term filter weights 1 / (1 + alpha ||h||^2)^p."""
        key = (float(alpha), float(p))
        w = self._weights.get(key)
        if w is None:
            w = 1.0 / (1.0 + key[0] * self.h_ns) ** key[1]
            self._weights[key] = w
        return w

    def correction_matrices(self, params: NoiseParams) -> np.ndarray:
        """(M,3,3) stack C_k = sum_{h in Gamma_N^k} sigma_h^2 ||P_h(k)||^2 P_k P_{k-h}.

        The Ito correction drift is -C_k Y_k; the same matrices drive the
        covariance evolution.
        """
        c = self._corrections.get(params.key())
        if c is None:
            proj = self.layout.projectors
            pk = proj[self.out_idx]
            pkh = proj[self.khm_ext % self.n_modes]  # P_{-v} = P_v
            coef = params.sigma_h(self.h_ns) ** 2 * self.phk_sq
            mats = coef[:, None, None] * np.einsum("tij,tjk->tik", pk, pkh)
            c = _segment_sum_matrices(mats, self)
            self._corrections[params.key()] = c
        return c

    def correction_matrices_c(self, params: NoiseParams) -> np.ndarray:
        """Complex copy of the correction matrices for complex-state products."""
        c = self._corrections_c.get(params.key())
        if c is None:
            c = self.correction_matrices(params).astype(np.complex128)
            self._corrections_c[params.key()] = c
        return c


def interaction_table(layout: SpectrumLayout) -> InteractionTable:
    """The layout's interaction table, built once and memoized."""
    if layout._interactions is None:
        layout._interactions = InteractionTable(layout)
    return layout._interactions


def _ext_values(values: np.ndarray) -> np.ndarray:
    """Conjugate extension along the mode axis: [Y ; conj(Y)]."""
    return np.concatenate([values, np.conj(values)], axis=-2)


def _segment_sum(contrib: np.ndarray, table: InteractionTable) -> np.ndarray:
    """Sum per-term 3-vectors (..., T, 3) into per-mode slots (..., M, 3)."""
    out = np.zeros(contrib.shape[:-2] + (table.n_modes, 3), dtype=contrib.dtype)
    if table.n_terms:
        sums = np.add.reduceat(contrib, table.seg_starts, axis=-2)
        out[..., table.seg_modes, :] = sums
    return out


def _segment_sum_matrices(contrib: np.ndarray, table: InteractionTable) -> np.ndarray:
    """Sum per-term 3x3 matrices (T, 3, 3) into (M, 3, 3)."""
    out = np.zeros((table.n_modes, 3, 3), dtype=contrib.dtype)
    if table.n_terms:
        sums = np.add.reduceat(contrib, table.seg_starts, axis=0)
        out[table.seg_modes] = sums
    return out


def nonlinear_rhs(values: np.ndarray, table: InteractionTable, alpha: float,
                  p: float = 1.0) -> np.ndarray:
    """Convective drift on raw value arrays.

    For each stored k:
        -i sum_{h in Gamma_N^k} <Y_h, k> / (1 + alpha ||h||^2)^p * P_k(Y_{k-h})
    with conjugate-extended lookups and the result projected by P_k.
    """
    ext = _ext_values(values)
    yh = ext[..., table.h_ext, :]
    ykh = ext[..., table.khm_ext, :]
    s = np.einsum("...tj,tj->...t", yh, table.k_vec_c)
    coef = (-1j) * table.convective_weights(alpha, p) * s
    out = _segment_sum(coef[..., None] * ykh, table)
    table.layout.project_values(out)
    return out


def diffusion_rhs(values: np.ndarray, dw_projected: np.ndarray,
                  table: InteractionTable, params: NoiseParams) -> np.ndarray:
    """Stochastic increment on raw value arrays.

    For each stored k:
        -i sum_{h in Gamma_N^k} sigma_h <dW_h, k> P_k(Y_{k-h}),
    bilinear in (Y, dW).  `dw_projected` holds P_h(dW'_h) for the stored
    half-lattice modes; lookups at -h conjugate them.
    """
    ext_w = _ext_values(dw_projected)
    wh = ext_w[..., table.h_ext, :]
    s = np.einsum("...tj,tj->...t", wh, table.k_vec_c)
    sig = params.sigma_h(table.h_ns)
    ykh = _ext_values(values)[..., table.khm_ext, :]
    out = _segment_sum(((-1j) * sig * s)[..., None] * ykh, table)
    table.layout.project_values(out)
    return out


def ito_rhs(values: np.ndarray, correction: np.ndarray) -> np.ndarray:
    """Ito correction drift -C_k Y_k (diagonal in k, linear in Y)."""
    return -np.einsum("mij,...mj->...mi", correction, values)


# -- field-level operations ------------------------------------------------


def nonlinear_drift(field: SpectralField, alpha: float, p: float = 1.0) -> SpectralField:
    """Convective drift of the smoothed-advection model.

    The advecting velocity is the filtered field u_h = Y_h / (1+alpha||h||^2)^p;
    p=1 is the standard inverse-Helmholtz filter.  The output satisfies
    <drift_k, k> = 0 for every mode and is energy-neutral under the symmetric
    truncation.
    """
    if alpha < 0:
        raise ValueError("alpha must be nonnegative")
    table = interaction_table(field.layout)
    return SpectralField(field.layout, nonlinear_rhs(field.values, table, alpha, p),
                         project=False, copy=False)


def diffusion_increment(field: SpectralField, dw: NoiseIncrement,
                        params: NoiseParams) -> SpectralField:
    """Multiplicative-noise increment for one step of Brownian increments."""
    if dw.layout != field.layout:
        raise ValueError("noise increment and field live on different layouts")
    table = interaction_table(field.layout)
    out = diffusion_rhs(field.values, dw.projected, table, params)
    return SpectralField(field.layout, out, project=False, copy=False)


def ito_correction(field: SpectralField, params: NoiseParams) -> SpectralField:
    """Drift appearing when the Stratonovich system is written in Ito form.

    -sum_{h in Gamma_N^k} sigma_h^2 ||P_h(k)||^2 P_k(P_{k-h}(Y_k)): linear in
    Y and diagonal in k.  Terms with h parallel to k vanish identically.
    """
    table = interaction_table(field.layout)
    out = ito_rhs(field.values, table.correction_matrices(params))
    return SpectralField(field.layout, out, project=False, copy=False)
