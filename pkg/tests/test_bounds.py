import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from artifact.bounds import (
    BoundsError,
    SDerivativeSums,
    consistency,
    d_constants,
    e_constants,
    f_constants,
    factorial_decay,
    factorial_majorant,
    gronwall_envelope,
    model_inputs,
    structural_constants,
    walk_counts,
    walk_series,
)
from artifact.lattice import BoundEnvelope, ou_chain


class TestStructuralConstants:
    def test_hand_example(self):
        sc = structural_constants(1, 1, 1.0, 1.0, 0.0, 0.0, 1.0)
        assert sc.A_n == 4.0 and sc.v_n == 4.0

    def test_abelian(self):
        sc = structural_constants(3, 2, 0.0, 5.0, 1.0, 0.0, 0.5, qbar=math.inf, S_row_sum=2.0, S_sup=1.0)
        assert sc.A_n == 3 * 2 / 0.5
        assert sc.C_bar == 0.0 and sc.C_n == 0.0 and sc.T3 == 0.0

    def test_contractive(self):
        sc = structural_constants(2, 1, 0.5, 1.0, 1.0, 100.0, 0.5)
        assert 100.0 * 2 * 1.0 > sc.A_n and sc.v_n < 0

    def test_general_formula(self):
        n, I, c, b, eps = 2, 3, 0.5, 2.0, 0.25
        sc = structural_constants(n, I, c, b, 1.0, 0.0, eps, qbar=0.1, S_row_sum=4.0, S_sup=0.3)
        assert sc.A_n == pytest.approx(2 * n * b * c * I + n * I / eps + 0.5 * n**2 * c**2 * I**2 * (I + 1))
        assert sc.T3 == pytest.approx(2 * n * 0.1 * c * I)
        assert sc.C_bar == pytest.approx(2 * c * 0.3)
        assert sc.C_n == pytest.approx(n**3 * c * I * 4.0 / eps + 0.5 * n**2 * sc.C_bar * (I**2 + 1))

    @pytest.mark.parametrize("eps", [0.0, -0.1, 1.5, math.nan])
    def test_epsilon_rejected(self, eps):
        with pytest.raises(BoundsError, match="epsilon"):
            structural_constants(1, 1, 1.0, 1.0, 0.0, 0.0, eps)

    def test_epsilon_one_accepted(self):
        structural_constants(1, 1, 1.0, 1.0, 0.0, 0.0, 1.0)

    def test_negative_and_infinite_inputs(self):
        with pytest.raises(BoundsError, match="non-negative"):
            structural_constants(1, 1, -1.0, 1.0, 0.0, 0.0, 0.5)
        with pytest.raises(BoundsError, match="not finite"):
            structural_constants(1, 1, 1.0, 1.0, 0.0, 0.0, 0.5, qbar=math.inf)

    @settings(max_examples=60, deadline=None)
    @given(
        st.integers(1, 4), st.integers(1, 4),
        st.floats(0, 3), st.floats(0, 3), st.floats(0, 3), st.floats(0.05, 1), st.floats(0, 3), st.floats(0, 3),
        st.sampled_from(["c", "b", "qbar", "S_row_sum", "S_sup"]),
    )
    def test_monotone_in_inputs(self, n, I, c, b, lam, eps, S1, S2, key):
        base = dict(n=n, cardI=I, c=c, b=b, kappa=1.0, lam=lam, epsilon=eps, qbar=1.0, S_row_sum=S1, S_sup=S2)
        lo = structural_constants(**base)
        hi = structural_constants(**{**base, key: base[key] + 0.5})
        for k in ("A_n", "T3", "C_n", "C_bar", "v_n"):
            assert getattr(hi, k) >= getattr(lo, k) - 1e-12


class TestAppendixConstants:
    def test_d_zero_for_constant_S(self):
        dc = d_constants(3, 2, 1.0, 0.5, SDerivativeSums())
        assert (dc.D_bar, dc.D_n, dc.D_n_minus_1, dc.D_J) == (0.0, 0.0, 0.0, 0.0)

    def test_d_n1(self):
        # n = 1: every n - 1 factor vanishes
        ys = SDerivativeSums(row=1.0, row_rev=2.0, sup_each=3.0, pair=4.0, single=5.0)
        dc = d_constants(1, 1, 1.0, 0.5, ys)
        assert dc.D_bar == pytest.approx(1.0 * 2 + 3.0 * (1 + 1) + 2.0 * 2)
        assert dc.D_n == pytest.approx(dc.D_bar + 2 * 4.0)
        assert dc.D_n_minus_1 == pytest.approx(2 * 4.0)
        assert dc.D_J == 5.0

    def test_e_f_empty_below_three(self):
        assert e_constants(2, 2, 1.0, 0.5, 1, [], [], 7.0) == (0.0, 0.0)
        assert f_constants(1, 2, 1.0, 0.5, [], [], 7.0) == (0.0, 0.0)

    def test_e_f_values(self):
        E, Ep = e_constants(4, 2, 0.5, 0.5, 3, [1.0, 2.0], [0.5, 0.5], 2.0)
        assert E == pytest.approx(3.0 / 0.5 + 0.5 * 2 * 1.0) and Ep == pytest.approx(2 * 0.5 * 3 * 2.0)
        F, Fp = f_constants(3, 2, 0.5, 0.5, [1.0], [1.0], 2.0)
        assert F == pytest.approx(2.0 + 1.0) and Fp == pytest.approx(2.0)
        with pytest.raises(BoundsError):
            e_constants(4, 2, 0.5, 0.5, 3, [1.0], [1.0], 2.0)


class TestModelInputs:
    def test_ou_chain(self):
        mi = model_inputs(ou_chain(3, coupling=0.2))
        assert (mi.c, mi.kappa, mi.R) == (0.0, 1.0, 1)
        assert mi.qY_sum == pytest.approx(0.4) and mi.qY_pair == pytest.approx(0.2)
        assert math.isinf(mi.qbar)
        sc = mi.constants(1, 1.0)
        assert sc.v_n == 0.0 and sc.rate == pytest.approx(0.4)
        assert mi.coupling(1, 0.5) == pytest.approx(0.1)

    def test_decoupled(self):
        mi = model_inputs(ou_chain(2).decoupled())
        assert mi.qY_sum == 0.0 and mi.coupling(1, 1.0) == 0.0


class TestClosedForms:
    def test_walk_counts(self):
        assert walk_counts(2, 1) == [1, 2, 3, 2, 1]
        assert sum(walk_counts(4, 2)) == 5**4

    def test_series_no_coupling(self):
        assert walk_series(0.3, 0.0, 1, 2.0, 0) == pytest.approx(math.exp(0.6))
        assert walk_series(0.3, 0.0, 1, 2.0, 2) == 0.0

    def test_series_below_majorant(self):
        for R in (1, 2, 3):
            for N in range(7):
                for t in (0.1, 1.0, 3.0):
                    assert walk_series(-0.5, 0.7, R, t, N * R) <= factorial_majorant(-0.5, 0.7, R, t, N)

    def test_majorant_n0(self):
        assert factorial_majorant(0.0, 1.0, 1, 1.0, 0) == pytest.approx(math.exp(6.0))


class TestGronwall:
    def test_c0_zero_is_first_term(self):
        p = gronwall_envelope(1, [0.7], 0.0, 1, [[2.0, 0.5]], [0.0, 0.5, 1.5])
        for i, t in enumerate(p.t):
            assert p.values[0, i, 0] == pytest.approx(2.0 * math.exp(0.7 * t), rel=1e-12)
            assert p.values[0, i, 1] == pytest.approx(0.5 * math.exp(0.7 * t), rel=1e-12)
            assert np.all(p.values[0, i, 2:] == 0)

    def test_t_zero(self):
        p = gronwall_envelope(2, [1.0, 2.0], 0.4, 1, [[1.0], [3.0]], 0.0)
        assert p.values[0, 0, 0] == 1.0 and p.values[1, 0, 0] == 3.0
        assert np.all(p.values[:, 0, 1:] == 0)

    def test_t_small_tends_to_initial(self):
        p = gronwall_envelope(1, [1.0], 0.5, 1, [[1.0]], [1e-6])
        assert p.values[0, 0, 0] == pytest.approx(1.0, rel=1e-5)

    @pytest.mark.parametrize("R", [1, 2, 3])
    @pytest.mark.parametrize("t", [0.3, 1.0, 2.5])
    def test_matches_walk_series(self, R, t):
        v, C = -0.4, 0.6
        p = gronwall_envelope(1, [v], C, R, [[1.0]], [t], max_distance=6 * R)
        for N in range(7):
            exact = walk_series(v, C, R, t, N * R)
            assert p.at(1, t, N * R) == pytest.approx(exact, rel=1e-6)
            assert p.at(1, t, N * R) <= factorial_majorant(v, C, R, t, N)
        assert p.richardson < 1e-2

    def test_matches_matrix_exponential(self):
        from scipy.linalg import expm

        from artifact.bounds import _coupling_matrix

        R, C0 = 1, 0.3
        rates = np.array([0.2, -0.1])
        p = gronwall_envelope(2, rates, C0, R, [[1.0], [0.5]], [1.2], max_distance=5)
        Kp = 5 + 20 * R  # default padding at this C0 t
        size = 2 * Kp + 1
        G = _coupling_matrix(2, Kp, R, C0)
        u0 = np.zeros(2 * size)
        u0[Kp], u0[size + Kp] = 1.0, 0.5
        ref = expm((np.diag(np.repeat(rates, size)) + G) * 1.2) @ u0
        assert np.allclose(p.values[0, 0], ref[Kp:Kp + 6], rtol=1e-7)
        assert np.allclose(p.values[1, 0], ref[size + Kp:size + Kp + 6], rtol=1e-7)

    def test_monotone_in_constants(self):
        base = dict(n=2, rates=[0.1, 0.2], C0=0.3, R=1, initial_norms=[[1.0], [1.0]], t=[0.5, 1.0], max_distance=8)
        ref = gronwall_envelope(**base).values
        for change in (
            {"rates": [0.2, 0.2]},
            {"rates": [0.1, 0.3]},
            {"C0": 0.4},
            {"initial_norms": [[1.5], [1.0]]},
            {"initial_norms": [[1.0], [1.0, 0.1]]},
        ):
            hi = gronwall_envelope(**{**base, **change}).values
            assert np.all(hi >= ref * (1 - 1e-12))

    def test_factorial_decay(self):
        t, C0, R = 1.0, 0.5, 1
        p = gronwall_envelope(1, [0.0], C0, R, [[1.0]], [t], max_distance=20)
        chk = factorial_decay(p.values[0, 0], t, C0, R)
        assert chk.ok and chk.threshold == pytest.approx(math.e * 1.5)
        assert chk.ratios[-1] < chk.ratios[0] < 1

    def test_envelope_dominates(self):
        p = gronwall_envelope(1, [0.2], 0.3, 1, [[1.0]], [0.25, 0.5, 1.0], max_distance=6)
        env = p.envelope
        assert env.provenance == "propagated" and env.c >= 0 and env.v >= 0
        T, D = np.meshgrid(p.t, p.distances, indexing="ij")
        assert np.all(env(T, D) >= p.values[0] * (1 - 1e-9))

    def test_bad_inputs(self):
        with pytest.raises(BoundsError):
            gronwall_envelope(2, [0.1], 0.1, 1, [[1.0]], 1.0)
        with pytest.raises(BoundsError):
            gronwall_envelope(1, [0.1], -0.1, 1, [[1.0]], 1.0)
        with pytest.raises(BoundsError):
            gronwall_envelope(1, [0.1], 0.1, 0, [[1.0]], 1.0)
        with pytest.raises(BoundsError):
            gronwall_envelope(1, [0.1], 0.1, 1, [[-1.0]], 1.0)

    def test_richardson_failure_reported(self):
        with pytest.raises(BoundsError, match="Richardson"):
            gronwall_envelope(1, [40.0], 5.0, 1, [[1.0]], [2.0], N_steps=4)


def test_consistency_check():
    p = gronwall_envelope(1, [0.4], 0.2, 1, [[1.0]], [0.5], max_distance=4)
    low = BoundEnvelope(0.5, 0.1, 3.0)
    ok, worst = consistency(low, p, [(0.5, d) for d in range(5)])
    assert ok and worst < 1
    high = BoundEnvelope(5.0, 0.0, 0.0)
    assert not consistency(high, p, [(0.5, 4)])[0]
