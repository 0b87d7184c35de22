"""Time integrator tests: scheme contracts, stop rule, run bookkeeping.

Closed-form oracles: on the flat torus the flow reduces to the scalar ODE
u' + u = -2t with solution u(t) = 2(1 - t - e^-t), space-constant, which
pins both schemes' order (backward Euler first, RK4 to roundoff).  On the
divisorial scenario the checks are structural: the numerical singular time
must bracket log 2 from above by at most the crossing-bisection resolution,
ledger pairings must track the moving class, and the renormalization volume
identity must hold to quadrature accuracy at every valid step.
"""

import dataclasses
import json
import math

import numpy as np
import pytest

from krflow.ansatz import build_scenario, sigmoid
from krflow.flow import (
    FlowConfig,
    FlowState,
    expected_pairings,
    gauge_change,
    initial_state,
    rescale_time,
    rescale_weight,
    rescaled_run,
    resolve_t_end,
    run_flow,
    step,
    volume_identity_residual,
)
from krflow.picard import DivisorClass, catalog
from krflow.profiles import Profile, RhoGrid

T_DIV = math.log(2.0)


def torus_exact(t: float) -> float:
    return 2.0 * (1.0 - t - math.exp(-t))


@pytest.fixture(scope="module")
def divisorial():
    surface = catalog("F1")
    return build_scenario(surface, DivisorClass(("4", "-1")), RhoGrid(15.0, 512))


@pytest.fixture(scope="module")
def torus():
    surface = catalog("T2")
    return build_scenario(surface, DivisorClass(("1",)), RhoGrid(15.0, 64))


@pytest.fixture(scope="module")
def run_div(divisorial):
    # full run into degeneration; shared by the structural tests below
    return run_flow(divisorial, FlowConfig(snapshot_dt=0.02))


class TestFlowConfig:
    def test_rejects_unknown_scheme(self):
        with pytest.raises(ValueError, match="scheme"):
            FlowConfig(scheme="crank_nicolson")

    def test_rejects_bad_dt_ordering(self):
        with pytest.raises(ValueError, match="dt_min"):
            FlowConfig(dt_min=1e-3, dt_init=1e-4)

    def test_rejects_shrinking_growth(self):
        with pytest.raises(ValueError, match="growth"):
            FlowConfig(growth=0.5)

    def test_rejects_nonpositive_floor(self):
        with pytest.raises(ValueError):
            FlowConfig(positivity_floor=0.0)


class TestInitialState:
    def test_starts_at_zero_potential(self, divisorial):
        state = initial_state(divisorial)
        assert state.t == 0.0
        assert state.step_count == 0
        assert not state.degenerate
        assert np.all(state.u.values == 0.0)

    def test_rate_equals_source_exactly(self, divisorial):
        # det ratio is identically one at t = 0, so v = f bitwise
        state = initial_state(divisorial)
        assert np.array_equal(state.v.values, divisorial.source.values)

    def test_volume_residual_at_truncation_floor(self, divisorial):
        state = initial_state(divisorial)
        assert state.phi_residual <= 1e-6


class TestStep:
    def test_single_step_meets_residual_contract(self, divisorial):
        cfg = FlowConfig()
        state0 = initial_state(divisorial)
        dt = 1e-3
        state1 = step(state0, cfg, divisorial, dt=dt)
        u1 = state1.u.values
        base, fiber = divisorial.coefficients(state1.t, u1)
        rhs = (np.log(base * fiber / divisorial.reference.det())
               - u1 + divisorial.source.values)
        res = u1 - state0.u.values - dt * rhs
        assert np.max(np.abs(res[1:-1])) <= cfg.newton_tol
        slope = divisorial.grid.d1(u1)
        assert abs(slope[0]) <= cfg.newton_tol
        assert abs(slope[-1]) <= cfg.newton_tol

    def test_step_advances_bookkeeping(self, divisorial):
        state0 = initial_state(divisorial)
        state1 = step(state0, FlowConfig(), divisorial, dt=1e-3)
        assert state1.t == pytest.approx(1e-3, abs=0)
        assert state1.step_count == 1
        assert not state1.degenerate

    def test_frozen_state_rejects_stepping(self, divisorial):
        frozen = dataclasses.replace(initial_state(divisorial), degenerate=True)
        with pytest.raises(ValueError, match="degenerate"):
            step(frozen, FlowConfig(), divisorial)

    def test_oversized_dt_is_halved_to_convergence(self, divisorial):
        # a huge dt cannot meet the Newton residual contract; the step must
        # come back with a shorter accepted advance, not an error
        state0 = initial_state(divisorial)
        state1 = step(state0, FlowConfig(), divisorial, dt=0.5)
        assert 0.0 < state1.t < 0.5
        assert not state1.degenerate


class TestBackwardEulerAccuracy:
    def test_first_order_convergence_on_torus(self, torus):
        errs = []
        for dt in (2e-3, 1e-3):
            cfg = FlowConfig(dt_init=dt, dt_max=dt, growth=1.0,
                             t_end=0.2, snapshot_dt=0.0)
            run = run_flow(torus, cfg)
            errs.append(np.max(np.abs(run.final.u.values - torus_exact(0.2))))
        assert errs[0] <= 4e-4
        assert 1.85 <= errs[0] / errs[1] <= 2.15

    def test_space_constancy_preserved(self, torus):
        cfg = FlowConfig(t_end=0.2, snapshot_dt=0.0)
        run = run_flow(torus, cfg)
        assert np.ptp(run.final.u.values) <= 1e-12


class TestExplicitRK4:
    def test_matches_closed_form_to_roundoff(self, torus):
        cfg = FlowConfig(scheme="explicit_rk4", dt_init=1e-4, dt_max=1e-4,
                         growth=1.0, t_end=1.0, snapshot_dt=0.0)
        run = run_flow(torus, cfg)
        assert np.max(np.abs(run.final.u.values - torus_exact(1.0))) <= 1e-12
        assert run.final.phi_residual <= 1e-12

    def test_stability_guard_clamps_dt(self, torus):
        cfg = FlowConfig(scheme="explicit_rk4", dt_init=1.0, dt_max=1.0,
                         t_end=0.5, snapshot_dt=0.0)
        run = run_flow(torus, cfg)
        h = torus.grid.spacing
        base0, _ = torus.reference_coefficients(0.0)
        guard = 0.25 * h * h * float(np.min(base0))
        assert run.ledger.steps[0]["dt"] <= guard * (1.0 + 1e-12)


class TestDivisorialRun:
    def test_terminates_degenerate(self, run_div):
        assert run_div.ledger.termination["reason"] == "degenerate_margin"
        assert run_div.final.degenerate
        assert run_div.t_numeric == run_div.final.t

    def test_singular_time_brackets_theory(self, run_div):
        # the class stays ample through T = log 2 and the crossing is
        # bisected to dt_min, so T_numeric exceeds T by a whisker
        assert T_DIV < run_div.t_numeric < T_DIV + 1e-4

    def test_positivity_until_stop(self, run_div):
        floor = run_div.config.positivity_floor
        rows = run_div.ledger.steps
        for row in rows[:-1]:
            assert row["margin"] >= floor
            assert row["det_ratio_min"] > 0.0
        assert rows[-1]["margin"] < floor

    def test_ledger_time_is_monotone(self, run_div):
        times = [row["t"] for row in run_div.ledger.steps]
        assert all(b > a for a, b in zip(times, times[1:]))
        assert max(row["dt"] for row in run_div.ledger.steps) \
            <= run_div.config.dt_max * (1.0 + 1e-12)

    def test_pairings_track_moving_class(self, run_div, divisorial):
        sup = 0.0
        for row in run_div.ledger.steps:
            want = expected_pairings(divisorial, row["t"])
            for key, value in want.items():
                sup = max(sup, abs(row[key] - value))
        assert sup <= 1e-5

    def test_volume_identity_on_valid_rows(self, run_div):
        vals = [row["phi_residual"] for row in run_div.ledger.steps[:-1]]
        assert all(v is not None for v in vals)
        assert max(vals) <= 1e-5

    def test_degenerate_row_is_json_safe(self, run_div):
        json.dumps(run_div.ledger.as_dict(), allow_nan=False)
        last = run_div.ledger.steps[-1]
        assert last["v_min"] is None or math.isfinite(last["v_min"])

    def test_snapshot_landing(self, run_div):
        state = run_div.snapshot_at(0.5)
        assert abs(state.t - 0.5) <= 1e-9
        with pytest.raises(KeyError):
            run_div.snapshot_at(0.0123)


class TestVolumeIdentity:
    def test_residual_flat_at_truncation_floor(self, divisorial):
        # the h^2 quadrature error of the momentum integrand collapses to
        # endpoint terms of size e^-R, so refinement holds the residual at
        # the truncation floor instead of shrinking it
        vals = []
        for n in (512, 1024, 2048):
            sc = build_scenario(divisorial.surface, divisorial.ample,
                                RhoGrid(15.0, n))
            vals.append(initial_state(sc).phi_residual)
        assert all(v <= 1e-6 for v in vals)
        assert max(vals) / min(vals) <= 1.2

    def test_midrun_residual_within_budget(self, run_div, divisorial):
        state = run_div.snapshot_at(0.34)  # nearest checkpoint to T/2
        res = volume_identity_residual(state, divisorial)
        assert res <= 2e-6          # spec budget is 1e-3
        assert res == pytest.approx(state.phi_residual, abs=0)


class TestGaugeChange:
    def test_identity_at_time_zero(self, divisorial):
        grid = divisorial.grid
        u = Profile(grid, np.sin(grid.nodes))
        h = Profile(grid, np.cos(grid.nodes))
        assert np.array_equal(gauge_change(u, h, 0.0).values, u.values)

    def test_full_shift_at_late_time(self, divisorial):
        grid = divisorial.grid
        u = Profile(grid, np.sin(grid.nodes))
        h = Profile(grid, np.cos(grid.nodes))
        out = gauge_change(u, h, 50.0)
        assert np.allclose(out.values, u.values + h.values, atol=1e-15)

    def test_run_covariance(self, divisorial):
        # flowing in the shifted gauge (eta - ddc h, f + h) must land on
        # u + a(t) h up to the O(dt) covariance defect of backward Euler
        grid = divisorial.grid
        rng = np.random.default_rng(11)
        w = rng.uniform(0.2, 1.0, size=3)
        c = rng.uniform(-5.0, 5.0, size=3)
        h = sum(wi * sigmoid(grid.nodes - ci) for wi, ci in zip(w, c))
        h = h - float(np.mean(h))
        h = 0.5 * h / float(np.max(np.abs(h)))
        cfg = FlowConfig(dt_max=2e-4, t_end=0.5, snapshot_dt=0.0)
        plain = run_flow(divisorial, cfg)
        shifted = run_flow(divisorial.gauge_shifted(h), cfg)
        want = gauge_change(plain.final.u, Profile(grid, h), 0.5)
        assert np.max(np.abs(shifted.final.u.values - want.values)) <= 1e-4


class TestRescaledRun:
    def test_unit_factor_is_exact(self, divisorial):
        sc = build_scenario(divisorial.surface, divisorial.ample,
                            RhoGrid(15.0, 256))
        cfg = FlowConfig(snapshot_dt=0.0)
        report = rescaled_run(1.0, sc, cfg, s_values=[0.1, 0.3, 0.5])
        # identical problem, identical steps: defect below solver tolerance
        assert max(report.defects) <= cfg.newton_tol
        assert report.rescaled_t_theory == pytest.approx(T_DIV, abs=1e-15)

    def test_doubling_covariance(self, divisorial):
        report = rescaled_run(2.0, divisorial, FlowConfig(snapshot_dt=0.0))
        assert report.defect_sup <= 3e-4
        assert report.rescaled_t_theory == pytest.approx(math.log(3.0),
                                                         abs=1e-12)
        assert abs(report.rescaled_t_numeric - math.log(3.0)) <= 1e-4
        assert abs(report.base_t_numeric - T_DIV) <= 1e-4

    def test_time_change_endpoints(self):
        assert rescale_time(2.0, 0.0) == pytest.approx(0.0, abs=0)
        assert rescale_time(2.0, math.log(3.0)) == pytest.approx(
            math.log(2.0), rel=1e-14)
        assert rescale_weight(2.0, 0.0) == pytest.approx(2.0, abs=0)

    def test_rejects_nonpositive_factor(self, divisorial):
        with pytest.raises(ValueError, match="positive"):
            rescaled_run(-1.0, divisorial, FlowConfig())

    def test_rejects_global_scenario(self, torus):
        with pytest.raises(ValueError, match="finite"):
            rescaled_run(2.0, torus, FlowConfig(t_end=1.0))


class TestResolutionConvergence:
    def test_supdiff_shrinks_under_doubling(self, divisorial):
        # odd node counts share every other node, so the comparison needs
        # no interpolation; fixed dt keeps the time error common
        cfg = FlowConfig(dt_init=5e-5, dt_max=5e-5, growth=1.0,
                         t_end=T_DIV - 0.1, snapshot_dt=0.0)
        finals = {}
        for n in (513, 1025, 2049):
            sc = build_scenario(divisorial.surface, divisorial.ample,
                                RhoGrid(15.0, n))
            finals[n] = run_flow(sc, cfg).final.u.values
        d_coarse = np.max(np.abs(finals[513] - finals[1025][::2]))
        d_fine = np.max(np.abs(finals[1025] - finals[2049][::2]))
        assert d_coarse / d_fine >= 3.0
        assert d_fine <= 1e-4


class TestRunDriver:
    def test_global_scenario_requires_budget(self, torus):
        with pytest.raises(ValueError, match="t_end"):
            resolve_t_end(torus, FlowConfig())

    def test_step_budget_guard(self, divisorial):
        with pytest.raises(RuntimeError, match="budget"):
            run_flow(divisorial, FlowConfig(max_steps=3))

    def test_checkpoint_landing_is_exact(self, torus):
        cfg = FlowConfig(t_end=0.1, snapshot_dt=0.0,
                         extra_checkpoints=(0.033,))
        run = run_flow(torus, cfg)
        assert abs(run.snapshot_at(0.033).t - 0.033) <= 1e-12

    def test_identical_runs_identical_ledgers(self, torus):
        cfg = FlowConfig(t_end=0.1, snapshot_dt=0.0)
        a = json.dumps(run_flow(torus, cfg).ledger.as_dict(), sort_keys=True)
        b = json.dumps(run_flow(torus, cfg).ledger.as_dict(), sort_keys=True)
        assert a == b
