"""Geometry layer tests: forms, metrics, Ricci, classes, scenarios.

The oracles here are analytic: logistic profiles differentiate in closed
form, endpoint pairings of the reference construction are the exact lattice
numbers by design, and the Ricci class must land on the anticanonical class
whatever positive profile it is computed from.
"""

import math
from fractions import Fraction

import numpy as np
import pytest

from krflow.ansatz import (
    InvariantForm,
    MetricProfile,
    build_scenario,
    class_of,
    det_ratio,
    form_of_potential,
    path_coefficients,
    potential_of_form,
    random_logistic_metric,
    ricci_form,
    sigmoid,
    softplus,
)
from krflow.picard import DivisorClass, catalog
from krflow.profiles import Profile, RhoGrid

F1 = catalog("F1")
T2 = catalog("T2")
A_DIV = DivisorClass([4, -1])
A_FIB = DivisorClass([2, -1])


@pytest.fixture(scope="module")
def grid():
    return RhoGrid(15.0, 2048)


@pytest.fixture(scope="module")
def div_scenario(grid):
    return build_scenario(F1, A_DIV, grid)


@pytest.fixture(scope="module")
def fib_scenario(grid):
    return build_scenario(F1, A_FIB, grid)


@pytest.fixture(scope="module")
def torus_scenario(grid):
    return build_scenario(T2, DivisorClass([1]), grid)


class TestForms:
    def test_softplus_form_matches_analytic_derivatives(self):
        # ddc of log(1 + e^rho): base = sigmoid, fiber = sigmoid'.
        g = RhoGrid(15.0, 1024)
        form = form_of_potential(g, softplus(g.nodes))
        sig = sigmoid(g.nodes)
        assert np.max(np.abs(form.base.values - sig)) < 2e-5
        assert np.max(np.abs(form.fiber.values - sig * (1 - sig))) < 5e-5

    def test_constructed_forms_are_exactly_closed(self):
        g = RhoGrid(15.0, 1024)
        form = form_of_potential(g, np.tanh(g.nodes))
        assert form.closedness_defect() == 0.0

    def test_round_trip_potential(self):
        # Spec-level contract: invert ddc back to the potential to 1e-4.
        g = RhoGrid(15.0, 1024)
        vals = softplus(g.nodes)
        form = form_of_potential(g, vals)
        rec = potential_of_form(form, gauge=float(np.mean(vals)))
        assert np.max(np.abs(rec.values - vals)) < 1e-4

    def test_non_closed_pair_rejected(self):
        g = RhoGrid(15.0, 1024)
        bad = InvariantForm(Profile.of(g, sigmoid), Profile.constant(g, 0.0))
        assert bad.closedness_defect() > 0.1
        with pytest.raises(ValueError):
            potential_of_form(bad)

    def test_exact_form_has_zero_class(self, grid):
        # ddc of a compactly supported bump pairs to zero with both rays.
        bump = np.exp(-0.5 * grid.nodes ** 2)
        coeffs = class_of(form_of_potential(grid, bump), F1)
        assert max(abs(c) for c in coeffs) < 1e-9

    def test_form_arithmetic_stays_closed(self, grid):
        f1 = form_of_potential(grid, softplus(grid.nodes))
        f2 = form_of_potential(grid, np.tanh(grid.nodes))
        combo = f1.scaled(2.0) - f2
        # linearity of D holds to roundoff under float combination
        assert combo.closedness_defect() < 1e-12


class TestMetrics:
    def test_determinant_ratio_matches_analytic(self, grid):
        # Logistic slope against its shift: every factor is closed form.
        rho = grid.nodes
        shift = 1.5

        def metric(offset):
            s = sigmoid(rho - offset)
            return MetricProfile(
                "hirzebruch", 1,
                Profile(grid, rho + 3.0 * softplus(rho - offset)),
                Profile(grid, 1.0 + 3.0 * s),
                Profile(grid, 3.0 * s * (1.0 - s)),
            )

        g_a, g_b = metric(0.0), metric(shift)
        got = det_ratio(g_a, g_b)
        sa, sb = sigmoid(rho), sigmoid(rho - shift)
        expected = ((1 + 3 * sa) * sa * (1 - sa)) / ((1 + 3 * sb) * sb * (1 - sb))
        assert np.max(np.abs(got - expected)) < 1e-6

    def test_determinant_ratio_multiplicative(self, grid):
        g1 = random_logistic_metric(grid, 1, seed=11)
        g2 = random_logistic_metric(grid, 1, seed=12)
        g3 = random_logistic_metric(grid, 1, seed=13)
        lhs = det_ratio(g1, g3)
        rhs = det_ratio(g1, g2) * det_ratio(g2, g3)
        assert np.max(np.abs(lhs / rhs - 1.0)) < 1e-12

    def test_random_metrics_are_positive(self, grid):
        for seed in range(20):
            g = random_logistic_metric(grid, 1, seed=seed)
            assert g.is_positive()

    def test_margin_and_slopes(self, grid):
        g = random_logistic_metric(grid, 1, seed=5)
        assert g.margin() == min(g.base.min, g.fiber.min)
        left, right = g.endpoint_slopes()
        assert right > left > 0


class TestRicci:
    def test_ricci_class_is_anticanonical_reference(self, div_scenario):
        got = class_of(ricci_form(div_scenario.reference), F1)
        assert abs(got[0] - 3.0) < 1e-3
        assert abs(got[1] + 1.0) < 1e-3

    @pytest.mark.parametrize("seed", range(10))
    def test_ricci_class_random_profiles(self, seed):
        # Class of the Ricci form is -K no matter the positive profile:
        # wider grid keeps the mixture tails below the pairing tolerance.
        g = random_logistic_metric(RhoGrid(20.0, 2048), 1, seed=seed)
        got = class_of(ricci_form(g), F1)
        assert abs(got[0] - 3.0) < 1e-3
        assert abs(got[1] + 1.0) < 1e-3

    def test_ricci_is_exactly_closed(self, div_scenario):
        assert ricci_form(div_scenario.reference).closedness_defect() == 0.0

    def test_flat_torus_is_ricci_flat(self, torus_scenario):
        ric = ricci_form(torus_scenario.reference)
        assert np.max(np.abs(ric.base.values)) == 0.0
        assert np.max(np.abs(ric.fiber.values)) == 0.0


class TestScenario:
    def test_reference_class(self, div_scenario):
        got = class_of(div_scenario.reference, F1)
        assert got == pytest.approx([4.0, -1.0], abs=2e-6)

    def test_limit_form_class_and_positivity(self, div_scenario):
        got = class_of(div_scenario.limit_form, F1)
        assert got == pytest.approx([1.0, 0.0], abs=2e-6)
        assert div_scenario.limit_form.is_nonnegative()
        assert div_scenario.limit_form.closedness_defect() == 0.0

    def test_drift_class_is_canonical_minus_ample(self, div_scenario):
        drift = InvariantForm(Profile(div_scenario.grid, div_scenario.drift_base),
                              Profile(div_scenario.grid, div_scenario.drift_fiber))
        got = class_of(drift, F1)
        assert got == pytest.approx([-7.0, 2.0], abs=5e-6)

    def test_source_definition_and_gauge(self, div_scenario):
        sc = div_scenario
        # f solves ddc f = (-g0 - Ric(g0)) - drift with weighted mean zero.
        gap = (-sc.reference.base.values - ricci_form(sc.reference).base.values
               - sc.drift_base)
        defect = np.max(np.abs(sc.grid.d1(sc.source.values) - gap))
        assert defect < 2e-5
        assert abs(sc.source.mean(sc.volume_weight)) < 1e-12

    def test_volume_weight_matches_lattice_volume(self, div_scenario):
        vol = div_scenario.grid.integrate(div_scenario.volume_weight)
        expected = div_scenario.initial_volume()
        assert expected == 7.5
        assert abs(vol - expected) / expected < 1e-6

    def test_reference_family_stays_positive(self, div_scenario):
        sc = div_scenario
        for t in np.linspace(0.0, sc.singular_time - 1e-3, 200):
            base, fiber = sc.reference_coefficients(t)
            assert base.min() > 0
            assert fiber.min() > 0

    def test_moving_class_midpoint(self, div_scenario):
        got = path_coefficients(div_scenario, math.log(2.0))
        assert got == pytest.approx([0.5, 0.0], abs=1e-15)

    def test_cohomological_volume(self, div_scenario):
        # A(T)^2/2 = (H/2)^2/2 = 1/8 at the singular time.
        got = div_scenario.cohomological_volume(math.log(2.0))
        assert got == pytest.approx(0.125, abs=1e-15)

    def test_fiber_scenario_limit_is_semiflat(self, fib_scenario):
        sc = fib_scenario
        assert sc.contraction.kind == "fiber_type"
        np.testing.assert_allclose(sc.limit_form.base.values, 0.5, atol=1e-15)
        assert np.max(np.abs(sc.limit_form.fiber.values)) == 0.0
        left, right = sc.reference.endpoint_slopes()
        assert left == pytest.approx(1.0, abs=1e-6)
        assert right == pytest.approx(2.0, abs=1e-6)

    def test_gauge_shift_is_operator_exact(self, div_scenario):
        sc = div_scenario
        h = np.exp(-0.5 * (sc.grid.nodes - 1.0) ** 2)
        shifted = sc.gauge_shifted(h)
        np.testing.assert_array_equal(
            shifted.drift_base, sc.drift_base - sc.grid.d1(h))
        np.testing.assert_array_equal(
            shifted.drift_fiber, sc.drift_fiber - sc.grid.d2(h))
        np.testing.assert_array_equal(
            shifted.source.values, sc.source.values + h)

    def test_rejects_bad_input(self, grid):
        with pytest.raises(ValueError):
            build_scenario(F1, DivisorClass([1, 0]), grid)   # nef, not ample
        with pytest.raises(ValueError):
            build_scenario(F1, DivisorClass([1]), grid)      # rank mismatch
        with pytest.raises(ValueError):
            build_scenario(catalog("P2"), DivisorClass([1]), grid)
        with pytest.raises(ValueError):
            build_scenario(catalog("F0"), DivisorClass([1, 1]), grid)


class TestTorusScenario:
    def test_flat_data(self, torus_scenario):
        sc = torus_scenario
        assert np.max(np.abs(sc.source.values)) == 0.0
        assert class_of(sc.reference, T2) == pytest.approx([1.0], abs=1e-14)
        assert sc.grid.integrate(sc.volume_weight) == pytest.approx(
            sc.initial_volume(), rel=1e-12)

    def test_reference_family_is_pure_rescaling(self, torus_scenario):
        base, fiber = torus_scenario.reference_coefficients(0.7)
        expected = math.exp(-0.7)
        np.testing.assert_allclose(base, expected, rtol=1e-14)
        np.testing.assert_allclose(fiber, expected, rtol=1e-14)

    def test_global_contraction_info(self, torus_scenario):
        assert torus_scenario.contraction.kind == "global"
        assert torus_scenario.singular_time == math.inf
