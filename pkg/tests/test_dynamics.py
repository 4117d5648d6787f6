import numpy as np
import pytest

from lerayalpha import (NoiseParams, SpectralField, SpectrumLayout, diffusion_increment,
                        interaction_table, ito_correction, nonlinear_drift, philox,
                        proj_norm_sq, project, projector_matrix, sample_increment)
from lerayalpha.dynamics import nonlinear_rhs
from lerayalpha.noise import NoiseIncrement

from conftest import brute_nonlinear, convective_energy_rate, random_field


def gamma_set(layout, k):
    """Independent enumeration of the interaction set for one output mode."""
    n = layout.cutoff
    out = []
    rng = range(-(n - 1), n)
    for h1 in rng:
        for h2 in rng:
            for h3 in rng:
                hns = h1 * h1 + h2 * h2 + h3 * h3
                d = (k[0] - h1, k[1] - h2, k[2] - h3)
                dns = d[0] ** 2 + d[1] ** 2 + d[2] ** 2
                if 0 < hns < n * n and 0 < dns < n * n:
                    out.append((h1, h2, h3))
    return out


class TestNonlinearDrift:
    def test_zero_field(self, layout3):
        d = nonlinear_drift(SpectralField.zeros(layout3), alpha=1.0)
        assert not d.values.any()

    def test_single_axis_pair_is_steady(self, layout3):
        f = SpectralField.from_modes(layout3, {(1, 0, 0): [0, 0.3 + 0.1j, -0.2]})
        d = nonlinear_drift(f, alpha=1.0)
        assert not d.values.any()  # axis projection is exact, drift vanishes bitwise

    def test_single_generic_pair_is_steady(self, layout3):
        f = SpectralField.from_modes(layout3, {(1, 1, 0): [0.1, -0.1, 0.25j]})
        d = nonlinear_drift(f, alpha=1.0)
        assert np.max(np.abs(d.values)) <= 1e-15

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_matches_full_lattice_brute_force(self, layout3, seed):
        f = random_field(layout3, energy=1.0, seed=seed)
        d = nonlinear_drift(f, alpha=1.0)
        oracle = brute_nonlinear(f, alpha=1.0)
        scale = np.max(np.abs(oracle))
        assert np.max(np.abs(d.values - oracle)) <= 1e-13 * scale

    def test_two_mode_field_against_oracle(self, layout3):
        f = SpectralField.from_modes(layout3, {
            (1, 0, 0): [0, 0.2 + 0.1j, -0.3],
            (0, 1, 0): [0.5j, 0, 0.1 - 0.2j],
        })
        d = nonlinear_drift(f, alpha=1.0)
        oracle = brute_nonlinear(f, alpha=1.0)
        assert np.max(np.abs(d.values - oracle)) <= 1e-13 * np.max(np.abs(oracle))

    def test_filter_exponent(self, layout3):
        f = random_field(layout3, energy=1.0, seed=4)
        d = nonlinear_drift(f, alpha=0.7, p=2.0)
        oracle = brute_nonlinear(f, alpha=0.7, p=2.0)
        assert np.max(np.abs(d.values - oracle)) <= 1e-13 * np.max(np.abs(oracle))

    def test_output_incompressible(self, layout4):
        f = random_field(layout4, energy=2.0, seed=9)
        d = nonlinear_drift(f, alpha=1.0)
        assert d.incompressibility_residual() <= 1e-13

    @pytest.mark.parametrize("cutoff,seed", [(2, 0), (3, 1), (4, 2), (4, 3)])
    def test_energy_cancellation(self, cutoff, seed):
        lay = SpectrumLayout(cutoff)
        f = random_field(lay, energy=1.7, seed=seed)
        d = nonlinear_drift(f, alpha=1.0)
        rate = convective_energy_rate(f, d)
        bound = 1e-12 * f.energy() ** 1.5 * lay.cutoff
        assert abs(rate) <= bound

    def test_alpha_zero_accepted(self, layout2):
        f = random_field(layout2, energy=1.0, seed=5)
        d = nonlinear_drift(f, alpha=0.0)
        rate = convective_energy_rate(f, d)
        assert abs(rate) <= 1e-12 * f.energy() ** 1.5 * 2


class TestDiffusionIncrement:
    def test_zero_cases(self, layout3):
        params = NoiseParams(1.0, 1.0)
        zero = SpectralField.zeros(layout3)
        inc = sample_increment(philox(3), 0.01, layout3)
        assert not diffusion_increment(zero, inc, params).values.any()
        zinc = NoiseIncrement(layout3, np.zeros((layout3.size, 3), complex))
        f = random_field(layout3, 1.0, seed=1)
        assert not diffusion_increment(f, zinc, params).values.any()

    def test_single_term_hand_expansion(self, layout3):
        params = NoiseParams(sigma=0.8, alpha=0.5)
        m1 = (0, 1, 1)
        f = SpectralField.from_modes(layout3, {m1: project(m1, [0.4, -0.1j, 0.2])})
        raw = np.zeros((layout3.size, 3), dtype=np.complex128)
        raw[layout3.mode_index((1, 0, 0))] = [0.3 - 0.2j, 0.5, -0.1 + 0.4j]
        inc = NoiseIncrement(layout3, raw)
        out = diffusion_increment(f, inc, params)
        # for k = m1 + h only the single term h = (1,0,0) contributes
        k = (1, 1, 1)
        h = (1, 0, 0)
        sigma_h = 0.8 / (1.0 + 0.5 * 1.0)
        dw = inc.get(h)
        expected = -1j * sigma_h * (dw @ np.asarray(k, float)) * project(k, f.get_mode(m1))
        got = out.values[layout3.mode_index(k)]
        assert np.max(np.abs(got - expected)) <= 1e-15 * max(1.0, np.max(np.abs(expected)))

    def test_bilinearity_exact_for_power_of_two_scalings(self, layout2):
        params = NoiseParams(1.0, 1.0)
        f = random_field(layout2, 1.0, seed=6)
        inc = sample_increment(philox(8), 0.02, layout2)
        base = diffusion_increment(f, inc, params).values
        f2 = SpectralField(layout2, 2.0 * f.values, project=False)
        inc4 = NoiseIncrement(layout2, 4.0 * inc.raw)
        scaled = diffusion_increment(f2, inc4, params).values
        assert np.array_equal(scaled, 8.0 * base)

    def test_output_incompressible(self, layout3):
        params = NoiseParams(1.0, 1.0)
        f = random_field(layout3, 1.0, seed=2)
        inc = sample_increment(philox(1), 0.01, layout3)
        out = diffusion_increment(f, inc, params)
        assert out.incompressibility_residual() <= 1e-13


class TestItoCorrection:
    def test_zero_field(self, layout3):
        assert not ito_correction(SpectralField.zeros(layout3), NoiseParams(1.0, 1.0)).values.any()

    def test_single_mode_matrix_oracle(self, layout2):
        params = NoiseParams(sigma=1.3, alpha=0.9)
        k = (1, 1, 0)
        f = SpectralField.from_modes(layout2, {k: project(k, [0.2, 0.4, -0.6 + 0.3j])})
        out = ito_correction(f, params)
        acc = np.zeros(3, dtype=np.complex128)
        yk = f.get_mode(k)
        pk = projector_matrix(k)
        for h in gamma_set(layout2, k):
            hns = sum(c * c for c in h)
            sig = 1.3 / (1.0 + 0.9 * hns)
            kmh = (k[0] - h[0], k[1] - h[1], k[2] - h[2])
            acc += -sig ** 2 * proj_norm_sq(h, k) * (pk @ (projector_matrix(kmh) @ yk))
        got = out.values[layout2.mode_index(k)]
        assert np.max(np.abs(got - acc)) <= 1e-14 * max(np.max(np.abs(acc)), 1e-30)

    def test_diagonal_in_k(self, layout2):
        # the correction at mode k depends only on Y_k
        params = NoiseParams(1.0, 1.0)
        k = (0, 1, 1)
        single = SpectralField.from_modes(layout2, {k: project(k, [0.1, 0.2, 0.3])})
        mixed_vals = random_field(layout2, 1.0, seed=3).values.copy()
        mixed_vals[layout2.mode_index(k)] = single.values[layout2.mode_index(k)]
        mixed = SpectralField(layout2, mixed_vals, project=False)
        i = layout2.mode_index(k)
        a = ito_correction(single, params).values[i]
        b = ito_correction(mixed, params).values[i]
        assert np.array_equal(a, b)

    def test_linear_in_state(self, layout2):
        params = NoiseParams(1.0, 1.0)
        f = random_field(layout2, 1.0, seed=8)
        doubled = SpectralField(layout2, 2.0 * f.values, project=False)
        assert np.array_equal(ito_correction(doubled, params).values,
                              2.0 * ito_correction(f, params).values)

    def test_parallel_terms_have_exactly_zero_weight(self):
        # modes k = 2h exist for N=3; the h-parallel summand carries the
        # coefficient ||P_h(k)||^2, which is exactly 0.0 there
        lay = SpectrumLayout(3)
        table = interaction_table(lay)
        k = (2, 0, 0)
        sel = table.out_idx == lay.mode_index(k)
        par = sel & (table.phk_sq == 0.0)
        assert par.sum() > 0  # h = +-(1,0,0) parallel to k sit in Gamma
        h_par = np.concatenate([lay.vectors, -lay.vectors])[table.h_ext[par]]
        assert all(hv[1] == 0 and hv[2] == 0 for hv in h_par.tolist())

    def test_ito_correction_is_half_squared_diffusion(self, layout2):
        # E[G(dW) G(dW) Y] = 2 dt * correction drift(Y): the generator-level
        # identity behind the Stratonovich/Ito equivalence, checked by MC
        from lerayalpha.dynamics import diffusion_rhs
        from lerayalpha.noise import _draw_standard

        params = NoiseParams(1.0, 1.0)
        f = random_field(layout2, 1.0, seed=11)
        table = interaction_table(layout2)
        n, chunk = 40000, 5000
        acc = np.zeros_like(f.values)
        for c in range(n // chunk):
            raw = _draw_standard(202 + c, 0, chunk, layout2.size)  # dt = 1 draws
            dwp = raw.copy()
            layout2.project_values(dwp)
            y = np.repeat(f.values[None], chunk, 0)
            g2 = diffusion_rhs(diffusion_rhs(y, dwp, table, params), dwp, table, params)
            acc += g2.sum(axis=0)
        emp = acc / n
        target = -2.0 * np.einsum("mij,mj->mi", table.correction_matrices(params),
                                  f.values)
        scale = np.max(np.abs(target))
        assert np.max(np.abs(emp - target)) <= 0.02 * scale


class TestStratonovichConsistency:
    def test_theorem_equivalence_discriminates(self, layout2):
        """With the correction, EM tracks Heun on a shared tape (gap shrinks
        with dt); without it the schemes converge to different processes and
        the gap saturates."""
        from lerayalpha.dynamics import diffusion_rhs, ito_rhs
        from lerayalpha.integrators import _heun_core
        from lerayalpha.noise import _draw_standard

        params = NoiseParams(1.0, 1.0)
        table = interaction_table(layout2)
        corr = table.correction_matrices_c(params)
        y0 = random_field(layout2, 1.0, seed=12).values
        horizon = 0.1
        paths = 60
        fine = 64
        base = np.stack([_draw_standard(500 + i, 0, fine, layout2.size)
                         for i in range(paths)]) * np.sqrt(horizon / fine)

        def terminal_gap(factor, with_correction):
            raw = base.reshape(paths, fine // factor, factor, layout2.size, 3).sum(axis=2)
            dt = horizon / fine * factor
            ve = np.repeat(y0[None], paths, 0)
            vh = ve.copy()
            for s in range(fine // factor):
                dwp = raw[:, s].copy()
                layout2.project_values(dwp)
                drift = ito_rhs(ve, corr) if with_correction else 0.0
                ve = ve + dt * drift + diffusion_rhs(ve, dwp, table, params)
                layout2.project_values(ve)
                vh = _heun_core(vh, dwp, dt, table, params, True)
            return float(np.sqrt(np.einsum("bmj,bmj->b", np.abs(ve - vh),
                                           np.abs(ve - vh))).mean())

        g_coarse = terminal_gap(8, True)
        g_fine = terminal_gap(1, True)
        assert g_fine < 0.55 * g_coarse  # decays under refinement
        bad_coarse = terminal_gap(8, False)
        bad_fine = terminal_gap(1, False)
        assert bad_fine > 0.8 * bad_coarse  # no-correction gap saturates
        assert bad_fine > 3.0 * g_fine
