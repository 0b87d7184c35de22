"""Terminal diagnostics tests: locus, decay exponent, pushforward probe.

Oracles here are structural rather than closed-form: the contracted curve
sits at the -R end, so the locus must cluster there and be empty mid-run;
the determinant ratio against the moving reference is exactly 1 at t = 0;
the contracted pairing decays through the ledger to ~0 while the other
basis pairing stays pinned to the class path.  The decay slope itself is
frozen at its measured value (~0.39 at N = 512, resolution-stable): the
comparison bound det(g(T))/det(g0) >= B' e^rho is one-sided, and the flow
decays strictly slower than the bound, so the fit's pass flag (which asks
for slope within 0.2 of the predicted exponent 1) honestly reads False.
"""

import math

import numpy as np
import pytest

from krflow.ansatz import build_scenario
from krflow.certificates import check_metric_equivalence
from krflow.flow import FlowConfig, expected_pairings, run_flow
from krflow.picard import DivisorClass, catalog
from krflow.profiles import RhoGrid
from krflow.singularity import (
    fit_decay,
    locate_S0,
    probe_pushforward,
    terminal_det_ratio,
)

T_DIV = math.log(2.0)


@pytest.fixture(scope="module")
def divisorial():
    return build_scenario(catalog("F1"), DivisorClass(("4", "-1")),
                          RhoGrid(15.0, 512))


@pytest.fixture(scope="module")
def run_div(divisorial):
    return run_flow(divisorial, FlowConfig(snapshot_dt=0.02))


@pytest.fixture(scope="module")
def run_div_fine():
    fine = build_scenario(catalog("F1"), DivisorClass(("4", "-1")),
                          RhoGrid(15.0, 1024))
    return run_flow(fine, FlowConfig(snapshot_dt=0.02))


@pytest.fixture(scope="module")
def fiber():
    return build_scenario(catalog("F1"), DivisorClass(("2", "-1")),
                          RhoGrid(15.0, 512))


@pytest.fixture(scope="module")
def run_fib(fiber):
    return run_flow(fiber, FlowConfig(snapshot_dt=0.02))


class TestLocateS0:
    def test_divisorial_locus_at_contracted_end(self, run_div):
        report = locate_S0(run_div)
        assert report.classification == "near -R end"
        assert 0 in report.nodes
        assert max(report.nodes) < 128   # left quarter of 512
        assert report.det_ratio_min < report.threshold

    def test_mid_run_locus_empty(self, run_div):
        report = locate_S0(run_div, t=0.34)
        assert report.classification == "empty"
        assert report.nodes == ()

    def test_fiber_collapse_is_everywhere(self, run_fib):
        # uniform collapse: every node sits below an absolute 5% of the
        # initial determinant scale
        report = locate_S0(run_fib, threshold=0.05)
        assert report.classification == "everywhere"
        assert len(report.nodes) == 512

    def test_fiber_relative_rule_sees_no_contrast(self, run_fib):
        # the relative default cannot flag a collapse that scales every
        # node together; that is what the absolute threshold is for
        report = locate_S0(run_fib)
        assert report.classification == "empty"

    def test_report_serializes(self, run_div):
        d = locate_S0(run_div).as_dict()
        assert d["classification"] == "near -R end"
        assert all(isinstance(i, int) for i in d["nodes"])

    def test_locus_is_inside_failed_equivalence(self, run_div):
        # every flagged node must fail the two-sided bound certified on
        # the compact window: its coefficient ratio sits below C0
        c0 = check_metric_equivalence(run_div, T_DIV - 0.05)[0].details["C0"]
        scenario = run_div.scenario
        state = run_div.final
        rb = state.g.base.values / scenario.reference.base.values
        rf = state.g.fiber.values / scenario.reference.fiber.values
        for i in locate_S0(run_div).nodes:
            assert min(rb[i], rf[i]) < c0


class TestFitDecay:
    def test_terminal_slope_frozen(self, run_div):
        fit = fit_decay(run_div)
        assert 0.35 <= fit.slope <= 0.45   # measured 0.388 at N = 512
        assert fit.residual <= 0.05        # measured 0.011
        assert fit.predicted_exponent == 1.0
        # the one-sided bound allows slower decay and the flow uses it:
        # slope < predicted - 0.2, so the tightness flag reads False
        assert fit.slope <= 1.0
        assert fit.passed is False

    def test_slope_resolution_stable(self, run_div, run_div_fine):
        a = fit_decay(run_div).slope
        b = fit_decay(run_div_fine).slope
        assert abs(a - b) <= 0.05   # measured 0.017

    def test_mid_run_control_has_no_decay(self, run_div):
        fit = fit_decay(run_div, t=0.34)
        assert -0.1 <= fit.slope <= 0.1
        assert fit.residual <= 0.05

    def test_frozen_node_dropped_with_warning(self, run_div):
        with pytest.warns(RuntimeWarning, match="nonpositive"):
            fit = fit_decay(run_div, window=(-15.0, -6.0))
        assert fit.nodes_used >= 100
        assert math.isfinite(fit.slope)

    def test_window_must_sit_left_of_center(self, run_div):
        with pytest.raises(ValueError, match="window"):
            fit_decay(run_div, window=(-14.0, -4.0))
        with pytest.raises(ValueError, match="window"):
            fit_decay(run_div, window=(-16.0, -6.0))

    def test_rejects_fiber_contraction(self, run_fib):
        with pytest.raises(ValueError, match="divisorial"):
            fit_decay(run_fib)

    def test_serializes_with_verdict(self, run_div):
        d = fit_decay(run_div).as_dict()
        assert d["passed"] is False
        assert d["window"] == [-12.0, -6.0]


class TestProbePushforward:
    def test_ratio_interval_positive_and_bounded(self, run_div):
        probe = probe_pushforward(run_div)
        assert probe.passed
        b0, b1 = probe.bounds
        assert 0.3 <= b0 <= 0.8     # measured 0.5497
        assert 5.0 <= b1 <= 10.0    # measured 7.395
        assert probe.d1_sup <= 5.0
        assert probe.d2_sup <= 1.0
        assert all(T_DIV - 0.25 <= t < T_DIV for t in probe.t_samples)

    def test_interval_resolution_stable(self, run_div, run_div_fine):
        a = probe_pushforward(run_div).bounds
        b = probe_pushforward(run_div_fine).bounds
        assert abs(a[0] - b[0]) / b[0] <= 0.10   # measured 1e-4
        assert abs(a[1] - b[1]) / b[1] <= 0.10   # measured 3e-4

    def test_initial_ratio_is_one(self, run_div):
        probe = probe_pushforward(run_div, t_samples=(0.0,))
        assert probe.bounds[0] == pytest.approx(1.0, abs=1e-12)
        assert probe.bounds[1] == pytest.approx(1.0, abs=1e-12)

    def test_cut_shrinks_difference_quotients(self, run_div):
        inner = probe_pushforward(run_div, rho_cut=2.0)
        assert inner.d2_sup <= probe_pushforward(run_div).d2_sup

    def test_rejects_fiber_contraction(self, run_fib):
        with pytest.raises(ValueError, match="divisorial"):
            probe_pushforward(run_fib)

    def test_rejects_empty_downstream_region(self, run_div):
        with pytest.raises(ValueError, match="rho_cut"):
            probe_pushforward(run_div, rho_cut=20.0)


class TestContractedClass:
    def test_contracted_pairing_decays_to_zero(self, run_div):
        rows = run_div.ledger.steps
        assert abs(rows[-1]["pair_negative_section"]) <= 1e-2
        tail = [r["pair_negative_section"] for r in rows[-10:]]
        assert all(b < a for a, b in zip(tail, tail[1:]))

    def test_uncontracted_pairing_stays_on_path(self, run_div):
        row = run_div.ledger.steps[-1]
        want = expected_pairings(run_div.scenario, row["t"])
        assert abs(row["pair_fiber"] - want["pair_fiber"]) <= 1e-2
        assert row["pair_fiber"] > 0.4

    def test_fiber_coefficient_collapses_uniformly(self, fiber):
        # tighter stop floor lets the run ride b(t) down to ~3e-3, far
        # past the 5% collapse mark
        run = run_flow(fiber, FlowConfig(snapshot_dt=0.02,
                                         positivity_floor=1e-9))
        q_end = float(np.max(run.final.g.fiber.values))
        q_init = float(np.max(fiber.reference.fiber.values))
        assert q_end <= 0.01 * q_init   # measured 0.0056
        assert abs(run.final.t - fiber.singular_time) <= 5e-3

    def test_terminal_ratio_against_fixed_reference(self, run_div):
        ratio = terminal_det_ratio(run_div.scenario, run_div.final)
        assert float(np.max(ratio)) < 0.05   # the class itself shrank
        assert float(np.median(ratio)) > 1e-3
