import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import THREE, const_system, make_scenario
from ltvobs.errors import DimensionError, SmoothnessError
from ltvobs.ltv_core import (
    MU_TOL,
    LtvSystem,
    MatrixFn,
    central_difference,
    extended_gramian,
    gramian,
    transition_matrix,
)
from ltvobs.observability import (
    build_chain,
    build_counterexample,
    check_C1,
    check_C2,
    counterexample_report,
    m_integral,
    report_json,
)
from ltvobs.range_localization import build_lifted_system, build_M, chain_selection


def hand_n1(t):
    # C A + dC/dt for the projector, simplified by hand
    s2 = np.sin(2 * t)
    return np.array([[0.5 * s2, np.cos(t) ** 2], [-np.sin(t) ** 2, -0.5 * s2]])


class TestChain:
    def test_constant_system_gives_powers(self, rng):
        A = rng.standard_normal((3, 3))
        C = rng.standard_normal((2, 3))
        chain = build_chain(const_system(A, C), 3)
        expected = C
        for k in range(4):
            # same left-to-right product order, so equality is exact
            np.testing.assert_array_equal(chain[k](0.7), expected)
            expected = expected @ A

    def test_first_level_is_output_matrix(self, counterexample, rng):
        chain = build_chain(counterexample, 2)
        for t in rng.uniform(0, 10, 20):
            np.testing.assert_array_equal(chain[0](t), counterexample.C(t))

    def test_counterexample_first_level(self, counterexample, rng):
        chain = build_chain(counterexample, 1)
        for t in rng.uniform(0, 10, 20):
            np.testing.assert_allclose(chain[1](t), hand_n1(t), atol=1e-6)

    @pytest.mark.parametrize("which", ["counterexample", "lifted"])
    def test_recurrence_residual(self, which, counterexample, circular_scenario, rng):
        sys = counterexample if which == "counterexample" else build_lifted_system(circular_scenario)
        chain = build_chain(sys, 2)
        for t in rng.uniform(0, 10, 20):
            for k in range(2):
                dN = central_difference(chain[k], t)
                residual = chain[k + 1](t) - chain[k](t) @ sys.A(t) - dN
                assert np.max(np.abs(residual)) <= 1e-6

    def test_provenance_flags(self, counterexample):
        assert build_chain(counterexample, 2).provenance == ("analytic",) * 3
        C = MatrixFn((1, 2), lambda t: np.array([[np.cos(t), 0.0]]))
        sys = LtvSystem(MatrixFn.const(np.zeros((2, 2))), MatrixFn.const(np.zeros((2, 1))), C)
        chain = build_chain(sys, 1)
        assert chain.provenance == ("analytic", "finite-difference")
        np.testing.assert_allclose(chain[1](0.3), [[-np.sin(0.3), 0.0]], atol=1e-10)

    def test_smoothness_error_without_fallback(self):
        C = MatrixFn((1, 2), lambda t: np.array([[np.cos(t), 0.0]]))
        sys = LtvSystem(MatrixFn.const(np.eye(2)), MatrixFn.const(np.zeros((2, 1))), C)
        with pytest.raises(SmoothnessError):
            build_chain(sys, 1, fallback=False)

    def test_lifted_stack_reproduces_closed_form_m(self, rng):
        sc = make_scenario(THREE)
        chain = build_chain(build_lifted_system(sc), 2, fallback=False)
        stacked, closed = chain.select(chain_selection(sc)), build_M(sc)
        for t in rng.uniform(0, 30, 20):
            np.testing.assert_allclose(stacked(t), closed(t), atol=1e-8)

    def test_bad_selection(self, counterexample):
        with pytest.raises(DimensionError):
            build_chain(counterexample, 1).select([(2, 0)])


class TestC1:
    def test_identity_passes(self):
        rep = check_C1(MatrixFn.const(np.eye(2)), 0.0, 1.0)
        assert rep.attained == pytest.approx(1.0)
        assert rep.passed

    def test_projector_fails(self, counterexample):
        rep = check_C1(counterexample.C, 0.0, 2 * np.pi)
        assert rep.attained <= 1e-12
        assert not rep.passed

    def test_sine_diagonal(self):
        M = MatrixFn((2, 2), lambda t: np.diag([1.0, np.sin(t)]))
        rep = check_C1(M, 0.0, 2 * np.pi)
        # (1/2pi) int_0^{2pi} sin^2 = 1/2
        assert rep.attained == pytest.approx(0.5, abs=1e-10)
        assert rep.passed

    def test_pass_implies_extended_gramian_floor(self, rng):
        checked = 0
        while checked < 10:
            A = rng.standard_normal((3, 3))
            C = rng.standard_normal((1, 3))
            sys = const_system(A, C)
            M = build_chain(sys, 2).stacked()
            if not check_C1(M, 0.0, 1.0).passed:
                continue
            assert extended_gramian(sys, M, 0.0, 1.0, dt=1e-2).min_eig >= MU_TOL
            checked += 1


class TestC2:
    def test_counterexample_spectrum_rejected(self, counterexample):
        rep = check_C2(counterexample, counterexample.C, 0.0, 2 * np.pi)
        assert not rep.passed
        assert rep.diagnostics["a_constant"]
        assert not rep.diagnostics["real_spectrum"]
        np.testing.assert_allclose(sorted(z[1] for z in rep.diagnostics["spectrum"]), [-1.0, 1.0])

    def test_integral_clause_alone_holds_for_counterexample(self, counterexample):
        rep = check_C2(counterexample, counterexample.C, 0.0, 2 * np.pi)
        assert rep.diagnostics["integral_ok"]
        assert rep.attained == pytest.approx(0.5, abs=1e-6)
        np.testing.assert_allclose(m_integral(counterexample.C, 0.0, 2 * np.pi), 0.5 * np.eye(2), atol=1e-12)

    def test_nilpotent_passes(self):
        sys = const_system([[0.0, 1.0], [0.0, 0.0]], np.eye(2))
        rep = check_C2(sys, MatrixFn.const(np.eye(2)), 0.0, 1.0)
        assert rep.passed
        assert rep.diagnostics["a_constant"] and rep.diagnostics["real_spectrum"]

    def test_time_varying_a_rejected(self, circular_scenario):
        sys = build_lifted_system(circular_scenario)
        rep = check_C2(sys, build_M(circular_scenario), 0.0, 2 * np.pi)
        assert not rep.diagnostics["a_constant"]
        assert not rep.passed

    def test_column_mismatch(self, counterexample):
        with pytest.raises(DimensionError):
            check_C2(counterexample, MatrixFn.const(np.eye(3)), 0.0, 1.0)

    def test_pass_implies_extended_gramian_floor(self, rng):
        checked = 0
        while checked < 4:
            # triangular A keeps the spectrum real
            A = np.triu(rng.uniform(-1.0, 1.0, (3, 3)))
            sys = const_system(A, rng.standard_normal((1, 3)))
            M = build_chain(sys, 2).stacked()
            if not check_C2(sys, M, 0.0, 1.0).passed:
                continue
            checked += 1
            for t in np.linspace(0.0, 9.0, 10):
                assert extended_gramian(sys, M, t, 1.0, nodes=51, dt=1e-2).min_eig >= MU_TOL


@settings(max_examples=25, deadline=None)
@given(st.permutations(range(4)), st.floats(0.0, 5.0))
def test_condition_values_ignore_row_order(perm, t):
    base = lambda s: np.array([[1.0, np.sin(s)], [0.0, 1.0], [np.cos(s), 2.0], [0.5, -s]])
    M = MatrixFn((4, 2), base)
    Mp = MatrixFn((4, 2), lambda s: base(s)[list(perm)])
    sys = const_system(np.zeros((2, 2)), np.eye(2))
    assert check_C1(Mp, t, 2.0).attained == pytest.approx(check_C1(M, t, 2.0).attained, rel=1e-13)
    assert check_C2(sys, Mp, t, 2.0).attained == pytest.approx(check_C2(sys, M, t, 2.0).attained, rel=1e-13)


class TestCounterexample:
    def test_output_matrix_at_zero(self, counterexample):
        np.testing.assert_allclose(counterexample.C(0.0), [[0.0, 0.0], [0.0, 1.0]], atol=1e-15)

    def test_projector_annihilates_rotating_vector(self, counterexample, rng):
        for t in rng.uniform(-20, 20, 50):
            y = np.array([np.cos(t), -np.sin(t)])
            assert np.max(np.abs(counterexample.C(t) @ y)) <= 1e-12

    def test_flow_carries_witness_along_rotating_vector(self, counterexample, rng):
        for s in rng.uniform(0, 10, 50):
            phi = transition_matrix(counterexample, 0.0, s, dt=1e-2).matrix
            np.testing.assert_allclose(phi @ [1.0, 0.0], [np.cos(s), -np.sin(s)], atol=1e-6)

    def test_extended_gramian_from_chain(self, counterexample):
        M = build_chain(counterexample, 1).stacked()
        ext = extended_gramian(counterexample, M, 0.0, 2 * np.pi)
        dense = extended_gramian(counterexample, M, 0.0, 2 * np.pi, nodes=801, dt=2.5e-4)
        assert ext.min_eig == pytest.approx(dense.min_eig, abs=1e-10)
        assert ext.min_eig <= 1e-8
        assert gramian(counterexample, 0.0, 2 * np.pi).min_eig <= 1e-8

    def test_report_full_period(self):
        (rec,) = counterexample_report([2 * np.pi])
        assert rec["gramian_min_eig"] <= 1e-8
        assert rec["m_integral_min_eig"] == pytest.approx(0.5, abs=1e-6)

    def test_report_short_window(self):
        (rec,) = counterexample_report([np.pi / 4])
        assert rec["gramian_min_eig"] <= 1e-8

    def test_report_witness_long_window(self):
        (rec,) = counterexample_report([10.0])
        (fine,) = counterexample_report([10.0], nodes=801, dt=2.5e-4)
        for w in (rec["witness"], fine["witness"]):
            assert np.arccos(min(1.0, abs(np.dot(w, [1.0, 0.0])))) <= 1e-3

    def test_separation_across_windows(self):
        for rec in counterexample_report([np.pi, 2.0 * np.pi, 5.0, 10.0, 20.0]):
            assert rec["gramian_min_eig"] <= 1e-8
            assert rec["m_integral_min_eig"] >= MU_TOL

    def test_m_integral_matches_closed_form(self):
        # (1/delta) int_0^delta C = [[1/2 - sin2d/(4d), (1-cos2d)/(4d)], [.., 1/2 + sin2d/(4d)]]
        for rec in counterexample_report([1.0, 3.0, 10.0], nodes=801):
            d = rec["delta"]
            expected = 0.5 * (1.0 - abs(np.sin(d)) / d)
            assert rec["m_integral_min_eig"] == pytest.approx(expected, abs=1e-9)

    def test_json_record_schema(self):
        data = json.loads(report_json(counterexample_report([1.0])))
        assert set(data[0]) == {"delta", "gramian_min_eig", "m_integral_min_eig", "witness"}
        assert len(data[0]["witness"]) == 2

    def test_non_positive_window_rejected(self):
        with pytest.raises(ValueError):
            counterexample_report([1.0, 0.0])
