import numpy as np
import pytest

import lerayalpha.integrators as integrators
from lerayalpha import (ConsistencyError, DomainError, NoiseParams, NoiseTape,
                        SpectralField, SpectrumLayout, det_rk4_step, em_step,
                        heun_step, interaction_table, philox, run_ensemble,
                        run_trajectory, sample_increment)
from lerayalpha.config import SimConfig
from lerayalpha.dynamics import diffusion_rhs, ito_rhs, nonlinear_rhs

from conftest import random_field


def make_config(**kwargs):
    base = dict(cutoff=2, alpha=1.0, sigma=1.0, p=1.0, dt=1e-3, T=0.1,
                scheme="em", linear_only=True, seed=0, ensemble=1,
                record_every=10)
    base.update(kwargs)
    return SimConfig(**base)


class TestSingleSteps:
    def test_rk4_zero_field_fixed(self, layout3):
        f = SpectralField.zeros(layout3)
        out = det_rk4_step(f, 1e-2, alpha=1.0)
        assert not out.values.any()

    def test_rk4_single_pair_steady(self, layout3):
        f = SpectralField.from_modes(layout3, {(1, 0, 0): [0, 0.4, -0.1 + 0.2j]})
        out = det_rk4_step(f, 1e-2, alpha=1.0)
        assert np.max(np.abs(out.values - f.values)) <= 1e-15

    def test_rk4_requires_positive_dt(self, layout2):
        with pytest.raises(DomainError):
            det_rk4_step(SpectralField.zeros(layout2), 0.0, alpha=1.0)

    def test_rk4_aborts_on_blowup(self, layout2):
        f = SpectralField(layout2, 1e150 * random_field(layout2, 1.0, 0).values,
                          project=False)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(ConsistencyError):
                det_rk4_step(f, 1e3, alpha=0.0)

    def test_em_sigma_zero_linear_is_identity(self, layout2):
        # every additive term vanishes exactly; only the structural
        # re-projection after the update may touch the last bit
        params = NoiseParams(0.0, 1.0)
        f = random_field(layout2, 1.0, seed=1)
        inc = sample_increment(philox(0), 1e-3, layout2)
        out = em_step(f, 1e-3, inc, params, linear_only=True)
        assert np.max(np.abs(out.values - f.values)) <= 1e-16

    def test_em_sigma_zero_is_explicit_euler(self, layout2):
        params = NoiseParams(0.0, 1.0)
        f = random_field(layout2, 1.0, seed=1)
        inc = sample_increment(philox(0), 1e-3, layout2)
        out = em_step(f, 1e-3, inc, params, linear_only=False)
        table = interaction_table(layout2)
        manual = f.values + 1e-3 * nonlinear_rhs(f.values, table, 1.0, 1.0)
        layout2.project_values(manual)
        assert np.max(np.abs(out.values - manual)) <= 1e-15

    def test_em_matches_ito_composition(self, layout2):
        params = NoiseParams(1.0, 1.0)
        f = random_field(layout2, 1.0, seed=2)
        inc = sample_increment(philox(5), 1e-3, layout2)
        out = em_step(f, 1e-3, inc, params, linear_only=False)
        table = interaction_table(layout2)
        manual = (f.values
                  + 1e-3 * nonlinear_rhs(f.values, table, 1.0, 1.0)
                  + 1e-3 * ito_rhs(f.values, table.correction_matrices_c(params))
                  + diffusion_rhs(f.values, inc.projected, table, params))
        layout2.project_values(manual)
        scale = np.max(np.abs(manual))
        assert np.max(np.abs(out.values - manual)) <= 1e-14 * scale

    def test_heun_sigma_zero_is_classical_heun(self, layout2):
        params = NoiseParams(0.0, 1.0)
        f = random_field(layout2, 1.0, seed=3)
        inc = sample_increment(philox(0), 1e-2, layout2)
        out = heun_step(f, 1e-2, inc, params, linear_only=False)
        table = interaction_table(layout2)
        f1 = nonlinear_rhs(f.values, table, 1.0, 1.0)
        pred = f.values + 1e-2 * f1
        f2 = nonlinear_rhs(pred, table, 1.0, 1.0)
        manual = f.values + 0.5e-2 * (f1 + f2)
        layout2.project_values(manual)
        scale = np.max(np.abs(manual))
        assert np.max(np.abs(out.values - manual)) <= 1e-14 * scale

    def test_heun_never_adds_correction(self, layout2):
        # a single linear Heun step from a frozen state has zero expected
        # drift; the Ito step from the same state drifts by -C y dt
        params = NoiseParams(1.0, 1.0)
        f = random_field(layout2, 1.0, seed=4)
        n = 40000
        table = interaction_table(layout2)
        acc_h = np.zeros_like(f.values)
        acc_e = np.zeros_like(f.values)
        from lerayalpha.integrators import _em_core, _heun_core
        from lerayalpha.noise import _draw_standard
        dt = 0.1  # large step: the O(dt) mean drift dominates the MC noise
        corr = table.correction_matrices_c(params)
        for c in range(8):
            raw = _draw_standard(900 + c, 0, n // 8, layout2.size) * np.sqrt(dt)
            dwp = raw.copy()
            layout2.project_values(dwp)
            y = np.repeat(f.values[None], n // 8, 0)
            acc_h += _heun_core(y, dwp, dt, table, params, True).sum(axis=0)
            acc_e += _em_core(y, dwp, dt, table, params, True, corr).sum(axis=0)
        drift_h = acc_h / n - f.values
        drift_e = acc_e / n - f.values
        expected = dt * ito_rhs(f.values, corr)
        scale = np.max(np.abs(expected))
        # both schemes share the mean one-step drift -C y dt (up to O(dt^2))
        assert np.max(np.abs(drift_e - expected)) <= 0.06 * scale
        assert np.max(np.abs(drift_h - expected)) <= 0.06 * scale


class TestStrongConvergence:
    def test_em_self_convergence_order(self, layout2):
        params = NoiseParams(1.0, 1.0)
        y0 = random_field(layout2, 1.0, seed=5).values
        table = interaction_table(layout2)
        corr = table.correction_matrices_c(params)
        from lerayalpha.integrators import _em_core
        from lerayalpha.noise import _draw_standard
        horizon, fine, paths = 0.1, 64, 80
        base = np.stack([_draw_standard(40 + i, 0, fine, layout2.size)
                         for i in range(paths)]) * np.sqrt(horizon / fine)

        def run(factor):
            raw = base.reshape(paths, fine // factor, factor, layout2.size, 3).sum(axis=2)
            dt = horizon / fine * factor
            v = np.repeat(y0[None], paths, 0)
            for s in range(fine // factor):
                dwp = raw[:, s].copy()
                layout2.project_values(dwp)
                v = _em_core(v, dwp, dt, table, params, False, corr)
            return v

        sol = {f: run(f) for f in (8, 4, 2, 1)}
        errs, dts = [], []
        for f_coarse, f_fine in ((8, 4), (4, 2), (2, 1)):
            gap = sol[f_coarse] - sol[f_fine]
            errs.append(np.sqrt(np.einsum("bmj,bmj->b", np.abs(gap), np.abs(gap))).mean())
            dts.append(horizon / fine * f_coarse)
        slope = np.polyfit(np.log(dts), np.log(errs), 1)[0]
        assert slope >= 0.45


class TestTrajectories:
    def test_zero_horizon_snapshot(self, layout2):
        config = make_config(T=0.0)
        y0 = random_field(layout2, 1.0, seed=7)
        rec = run_trajectory(config, y0)
        assert rec.times.tolist() == [0.0]
        assert np.array_equal(rec.final_values, y0.values)
        assert rec.energies[0] == pytest.approx(1.0, abs=1e-12)

    def test_deterministic_rerun_identical(self, layout4):
        config = make_config(cutoff=4, scheme="rk4", sigma=0.0, linear_only=False,
                             T=0.02, dt=1e-3)
        y0 = random_field(layout4, 1.0, seed=8)
        a = run_trajectory(config, y0)
        b = run_trajectory(config, y0)
        assert np.array_equal(a.final_values, b.final_values)
        assert np.array_equal(a.energies, b.energies)

    def test_stochastic_rerun_identical(self, layout2):
        config = make_config(seed=1234)
        y0 = random_field(layout2, 1.0, seed=9)
        a = run_trajectory(config, y0)
        b = run_trajectory(config, y0)
        assert np.array_equal(a.final_values, b.final_values)
        assert np.array_equal(a.log_mart, b.log_mart)

    def test_record_cadence_and_energy(self, layout2):
        config = make_config(record_every=25, T=0.1, dt=1e-3)
        y0 = random_field(layout2, 1.0, seed=10)
        rec = run_trajectory(config, y0)
        assert np.allclose(rec.times, [0.0, 0.025, 0.05, 0.075, 0.1])
        assert rec.energies[0] == pytest.approx(1.0, abs=1e-12)
        assert rec.energy_violations == 0

    def test_snapshots_recorded(self, layout2):
        config = make_config(record_modes=True, record_every=50)
        y0 = random_field(layout2, 1.0, seed=11)
        rec = run_trajectory(config, y0)
        assert rec.snapshots.shape == (3, layout2.size, 3)
        assert np.array_equal(rec.snapshots[0], y0.values)
        assert np.array_equal(rec.snapshots[-1], rec.final_values)

    def test_tape_replay_matches_sampling(self, layout2):
        config = make_config(seed=77, T=0.05)
        y0 = random_field(layout2, 1.0, seed=12)
        sampled = run_trajectory(config, y0)
        tape = NoiseTape.sample(layout2, config.n_steps, config.dt, seed=77)
        replayed = run_trajectory(config, y0, tape=tape)
        assert np.array_equal(sampled.final_values, replayed.final_values)

    def test_nonfinite_initial_rejected(self, layout2):
        vals = np.full((layout2.size, 3), np.inf + 0j)
        bad = SpectralField(layout2, vals, project=False)
        with pytest.raises(DomainError):
            run_trajectory(make_config(), bad)

    def test_blowup_aborts_with_step(self, layout2):
        config = make_config(scheme="rk4", sigma=0.0, linear_only=False,
                             dt=50.0, T=500.0)
        y0 = random_field(layout2, 1e8, seed=13)
        with np.errstate(over="ignore", invalid="ignore"):
            with pytest.raises(ConsistencyError, match="step"):
                run_trajectory(config, y0)


class TestEnsembles:
    def test_single_trajectory_equals_ensemble_head(self, layout2):
        config = make_config(seed=42, ensemble=3)
        y0 = random_field(layout2, 1.0, seed=14)
        ens = run_ensemble(config, y0)
        rec = run_trajectory(config, y0)
        assert np.array_equal(ens.final_values[0], rec.final_values)
        assert ens.seeds[0] == config.seed

    def test_worker_count_invariance(self, layout2):
        config = make_config(seed=4, ensemble=257)
        y0 = random_field(layout2, 1.0, seed=15)
        a = run_ensemble(config, y0)
        b = run_ensemble(config.with_overrides(workers=4), y0)
        assert np.array_equal(a.final_values, b.final_values)
        assert np.array_equal(a.energies, b.energies)
        assert np.array_equal(a.log_mart, b.log_mart)

    def test_chunking_invariance(self, layout2, monkeypatch):
        config = make_config(seed=5, ensemble=40, T=0.02)
        y0 = random_field(layout2, 1.0, seed=16)
        whole = run_ensemble(config, y0)
        monkeypatch.setattr(integrators, "_GATHER_BUDGET", 200_000)  # tiny chunks
        split = run_ensemble(config, y0)
        assert np.array_equal(whole.final_values, split.final_values)
        assert np.array_equal(whole.quad_var, split.quad_var)

    def test_ensemble_mean_matches_discrete_moment_map(self, layout2):
        # the Ito-form linear system damps first moments: the exact discrete
        # mean after n EM steps is (I - C dt)^n y0, mode by mode
        config = make_config(seed=6, ensemble=4000, T=0.05, record_every=50)
        y0 = SpectralField.single_mode(layout2, (1, 0, 0), 1.0)
        ens = run_ensemble(config, y0)
        table = interaction_table(layout2)
        params = NoiseParams(config.sigma, config.alpha, config.p)
        c = table.correction_matrices(params)
        step_map = np.eye(3)[None] - config.dt * c
        mean_pred = y0.values.copy()
        for _ in range(config.n_steps):
            mean_pred = np.einsum("mij,mj->mi", step_map, mean_pred)
        emp = ens.final_values.mean(axis=0)
        se = ens.final_values.std(axis=0) / np.sqrt(ens.n_paths)
        z = np.abs(emp - mean_pred) / np.maximum(np.abs(se), 1e-12)
        assert float(z.max()) < 4.0

    def test_girsanov_tracked_only_for_linear_noise(self, layout2):
        y0 = random_field(layout2, 1.0, seed=17)
        with_noise = run_ensemble(make_config(ensemble=2), y0)
        assert with_noise.log_mart is not None
        deterministic = run_ensemble(
            make_config(scheme="rk4", sigma=0.0, linear_only=False, ensemble=2), y0)
        assert deterministic.log_mart is None
        with pytest.raises(DomainError):
            deterministic.densities()

    def test_snapshot_lookup(self, layout2):
        config = make_config(ensemble=4, record_every=100)
        y0 = random_field(layout2, 1.0, seed=18)
        ens = run_ensemble(config, y0)
        snap0 = ens.snapshot_at(0.0)
        assert np.array_equal(snap0[2], y0.values)
        assert np.array_equal(ens.snapshot_at(0.1), ens.final_values)
        with pytest.raises(ConsistencyError):
            ens.snapshot_at(0.05)

    def test_heun_linear_energy_smoke(self, layout2):
        config = make_config(scheme="heun", ensemble=30, T=0.2, record_every=20)
        y0 = random_field(layout2, 1.0, seed=19)
        ens = run_ensemble(config, y0)
        dev1 = np.abs(ens.energies - 1.0).max()
        half = run_ensemble(config.with_overrides(dt=5e-4), y0)
        dev2 = np.abs(half.energies - 1.0).max()
        assert dev1 < 1e-2
        assert dev1 / dev2 >= 1.4

    def test_fingerprints(self, layout2):
        y0 = random_field(layout2, 1.0, seed=20)
        a = run_ensemble(make_config(ensemble=2), y0)
        b = run_ensemble(make_config(ensemble=2, linear_only=False), y0)
        c = run_ensemble(make_config(ensemble=2, alpha=0.5), y0)
        assert a.compatible_with(b)
        assert not a.compatible_with(c)
