import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nnstokes.constitutive import SHIPPED_MODELS
from nnstokes.experiments import contraction_factor
from nnstokes.grid import (BoundaryTrace, MacGrid, StaggeredTensor, StaggeredVelocity,
                           discrete_divergence, forcing_from_solution, manufactured_solution)
from nnstokes.stokes import (IncompatibleDataError, SolverConfig, SolverError,
                             auto_damping, check_compatibility, energy_balance,
                             jacobian_spectrum, linear_estimate_ratio, make_compatible,
                             monotonicity_pairing, nonlinear_estimate_ratio, picard_step,
                             smallest_ritz_value, solve_linear_stokes, solve_nonlinear,
                             stokes_system, trace_norm, weak_residual)

CARREAU = SHIPPED_MODELS["carreau"]
NEWTONIAN = SHIPPED_MODELS["newtonian"]
STREAM = manufactured_solution("stream")


def l2(vel, ref):
    d = vel - ref
    return np.sqrt(np.sum(d.u ** 2) + np.sum(d.v ** 2)) * vel.grid.h


def mms_errors(model, grids, cfg=None):
    out = []
    for n in grids:
        g = MacGrid(n)
        f = forcing_from_solution(model, STREAM, g)
        if model is NEWTONIAN:
            sol = solve_linear_stokes(f, cfg=cfg, viscosity=2.0)
        else:
            sol = solve_nonlinear(f, model, cfg)
        out.append((l2(sol.velocity, STREAM.sample_velocity(g)),
                    np.sqrt(np.mean((sol.pressure - STREAM.sample_pressure(g)) ** 2)), sol))
    return out


class TestSolverConfig:
    @pytest.mark.parametrize("kw", [{"tol": 0.0}, {"max_iter": 0}, {"damping": 1.5},
                                    {"backend": "gmres"}, {"min_damping": 0.0}])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)

    def test_overrides(self):
        assert SolverConfig().with_overrides(tol=1e-6).tol == 1e-6


class TestLinear:
    def test_zero_data(self):
        sol = solve_linear_stokes(None, grid=MacGrid(8))
        assert np.all(sol.velocity.to_vector() == 0) and np.all(sol.pressure == 0)

    def test_mms_second_order(self):
        rows = mms_errors(NEWTONIAN, (16, 32, 64))
        ev = np.array([r[0] for r in rows])
        ep = np.array([r[1] for r in rows])
        assert np.all(np.log2(ev[:-1] / ev[1:]) > 1.9)
        assert np.all(np.log2(ep[:-1] / ep[1:]) > 1.0)
        # frozen baseline at n = 16
        assert ev[0] == pytest.approx(2.463e-4, rel=2e-3)

    def test_exact_divergence_and_zero_mean(self):
        sol = mms_errors(NEWTONIAN, (16,))[0][2]
        assert np.max(np.abs(discrete_divergence(sol.velocity).values)) <= 1e-10
        assert abs(sol.pressure.mean()) <= 1e-12
        assert sol.residual["momentum"] <= 1e-10

    def test_backends_agree(self):
        g = MacGrid(16)
        f = forcing_from_solution(NEWTONIAN, STREAM, g)
        a = solve_linear_stokes(f, cfg=SolverConfig(backend="direct"), viscosity=2.0)
        b = solve_linear_stokes(f, cfg=SolverConfig(backend="schur"), viscosity=2.0)
        assert l2(a.velocity, b.velocity) <= 1e-10
        np.testing.assert_allclose(a.pressure, b.pressure, atol=1e-9)

    def test_incompatible_rejected(self):
        g = MacGrid(8)
        with pytest.raises(IncompatibleDataError):
            solve_linear_stokes(None, d=np.ones(g.shape), grid=g)

    def test_constant_divergence_with_flux(self):
        mms = manufactured_solution("expansion")
        g = MacGrid(16)
        trace = mms.trace(g)
        d = mms.sample_divergence(g)
        assert abs(check_compatibility(g, d, trace)) <= 1e-12
        sol = solve_linear_stokes(forcing_from_solution(None, mms, g), d=d, g=trace)
        assert l2(sol.velocity, mms.sample_velocity(g)) <= 1e-10

    def test_make_compatible(self):
        g = MacGrid(8)
        d = make_compatible(g, np.random.default_rng(0).normal(size=g.shape), None)
        assert abs(check_compatibility(g, d, None)) <= 1e-12

    def test_matrix_symmetric(self):
        M = stokes_system(MacGrid(6), 1.0).matrix(pinned=False)
        assert abs(M - M.T).max() <= 1e-12

    @pytest.mark.parametrize("n", [4, 6])
    def test_positive_ritz_value(self, n):
        assert smallest_ritz_value(MacGrid(n)) > 0


class TestEstimateRatio:
    def test_zero(self):
        sol = solve_linear_stokes(None, grid=MacGrid(8))
        assert linear_estimate_ratio(sol, None) == 0.0

    def test_scale_invariant(self):
        g = MacGrid(16)
        f = forcing_from_solution(NEWTONIAN, STREAM, g)
        r1 = linear_estimate_ratio(solve_linear_stokes(f), f)
        f3 = f.scaled(3.0)
        r3 = linear_estimate_ratio(solve_linear_stokes(f3), f3)
        assert r3 == pytest.approx(r1, rel=1e-10)

    def test_trace_norm_zero(self):
        assert trace_norm(MacGrid(8), BoundaryTrace.zero(MacGrid(8)), None, 2.0) == 0.0

    def test_trace_norm_positive(self):
        g = MacGrid(16)
        assert trace_norm(g, manufactured_solution("expansion").trace(g), None, 2.0) > 0


class TestNonlinear:
    def test_spectrum_and_damping(self):
        lo, hi = jacobian_spectrum(CARREAU)
        assert lo == pytest.approx(1.0, abs=1e-3) and hi == pytest.approx(2.0, rel=1e-6)
        assert auto_damping(CARREAU) == pytest.approx(2 / 3, abs=1e-3)
        assert auto_damping(NEWTONIAN) == 1.0

    def test_newtonian_one_step(self):
        g = MacGrid(16)
        f = forcing_from_solution(NEWTONIAN, STREAM, g)
        sol = solve_nonlinear(f, NEWTONIAN, SolverConfig(tol=1e-12))
        lin = solve_linear_stokes(f, viscosity=2.0)
        assert sol.iterations <= 2
        assert l2(sol.velocity, lin.velocity) <= 1e-12

    def test_zero_forcing_fixed_point(self):
        g = MacGrid(8)
        sol = solve_nonlinear(StaggeredTensor.zeros(g), CARREAU)
        assert sol.converged and np.all(sol.velocity.to_vector() == 0)

    def test_mms_and_contraction(self):
        rows = mms_errors(CARREAU, (16, 32))
        ev = [r[0] for r in rows]
        assert np.log2(ev[0] / ev[1]) > 1.0
        sol = rows[1][2]
        assert sol.converged and sol.residual["divergence"] <= 1e-10
        # frozen contraction factor at n = 32
        assert contraction_factor(sol.trace) == pytest.approx(0.3318, abs=0.02)

    def test_independent_of_initial_guess(self):
        g = MacGrid(16)
        f = forcing_from_solution(CARREAU, STREAM, g)
        cfg = SolverConfig(tol=1e-11)
        a = solve_nonlinear(f, CARREAU, cfg)
        rng = np.random.default_rng(0)
        start = StaggeredVelocity(g, rng.normal(size=(17, 16)), rng.normal(size=(16, 17)))
        b = solve_nonlinear(f, CARREAU, cfg, initial=start)
        assert a.converged and b.converged
        assert l2(a.velocity, b.velocity) <= 1e-8

    def test_fixed_point_consistency(self):
        g = MacGrid(16)
        f = forcing_from_solution(CARREAU, STREAM, g)
        sol = solve_nonlinear(f, CARREAU, SolverConfig(tol=1e-12))
        nxt, _ = picard_step(sol.velocity, f, CARREAU, damping=1.0)
        assert l2(nxt, sol.velocity) <= 1e-10
        assert weak_residual(sol.velocity, sol.pressure, g.ops.load_vector(f), None,
                             CARREAU)["momentum"] <= 1e-8

    def test_energy_identity(self):
        g = MacGrid(16)
        f = forcing_from_solution(CARREAU, STREAM, g)
        sol = solve_nonlinear(f, CARREAU, SolverConfig(tol=1e-12))
        lhs, rhs = energy_balance(sol, f, CARREAU)
        assert lhs == pytest.approx(rhs, rel=1e-8)

    def test_unconverged_refused(self):
        g = MacGrid(16)
        f = forcing_from_solution(CARREAU, STREAM, g)
        sol = solve_nonlinear(f, CARREAU, SolverConfig(tol=1e-14, max_iter=2))
        assert not sol.converged
        with pytest.raises(SolverError):
            nonlinear_estimate_ratio(sol, f)

    def test_capped_model_stalls_without_raising(self):
        capped = SHIPPED_MODELS["capped"]
        g = MacGrid(8)
        f = forcing_from_solution(capped, STREAM, g)
        sol = solve_nonlinear(f, capped, SolverConfig(max_iter=5))
        assert sol.iterations <= 5

    @settings(max_examples=20, deadline=None)
    @given(st.sampled_from(list(SHIPPED_MODELS.values())), st.integers(0, 2 ** 31))
    def test_monotone_pairing(self, model, seed):
        g = MacGrid(6)
        rng = np.random.default_rng(seed)
        a = StaggeredVelocity(g, rng.normal(size=(7, 6)), rng.normal(size=(6, 7)))
        b = StaggeredVelocity(g, rng.normal(size=(7, 6)), rng.normal(size=(6, 7)))
        assert monotonicity_pairing(model, a, b) >= -1e-12

    def test_estimate_ratio_positive(self):
        g = MacGrid(16)
        f = forcing_from_solution(CARREAU, STREAM, g)
        sol = solve_nonlinear(f, CARREAU)
        assert 0 < nonlinear_estimate_ratio(sol, f) < 10


class TestSave:
    def test_save(self, tmp_path):
        sol = solve_linear_stokes(forcing_from_solution(NEWTONIAN, STREAM, MacGrid(8)), viscosity=2.0)
        d = sol.save(tmp_path / "sol")
        assert {p.name for p in d.iterdir()} == {"u.nnsf", "v.nnsf", "p.nnsf", "manifest.json"}
        man = json.loads((d / "manifest.json").read_text())
        assert man["grid"]["nx"] == 8 and man["converged"]
