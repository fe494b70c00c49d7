import math

import numpy as np
import pytest

from artifact.liealg import parse_field, parse_polynomial
from artifact.lattice import (
    Cylinder,
    LatticeError,
    LatticeModel,
    SiteNorm,
    box,
    build_coupled_sde,
    certify_site_lyapunov,
    configuration_array,
    derivative_profile,
    dist,
    ergodic_contraction,
    fsp_fit,
    lattice_expectation,
    lifted_generator_match,
    lyapunov_drift,
    lyapunov_spec,
    ou_chain,
    rho,
    sample_configuration,
    simulate,
    sin_observable,
    smoothing_conditions_check,
    tightness_probe,
    tree_distance,
    volume_convergence,
)

NN = ((-1,), (0,), (1,))
F0 = sin_observable()


def pp(text, n):
    return parse_polynomial(text, n)


def kolmogorov_sites(q, S=None, radius=2):
    """Kolmogorov fibres (x, v): Z0 = d/dv, Z1 = -d/dx."""
    return LatticeModel(
        d=1, sites=box(radius), m=2,
        Y=(parse_field("[0; 1]"), parse_field("[-1; 0]")), J=(0,), b=(0.0, 0.0),
        offsets=NN, q=q, S=S or {}, delta=0.3,
    )


def two_site(s):
    return LatticeModel(
        d=1, sites=((0,), (1,)), m=1, Y=(parse_field("[1]"),), J=(0,),
        offsets=NN, S={(1,): ((pp(str(s), 2),),), (-1,): ((pp(str(s), 2),),)}, delta=0.99,
    )


class TestGeometry:
    def test_box_and_distance(self):
        assert box(1) == ((-1,), (0,), (1,))
        assert len(box(1, 2)) == 9
        assert dist((1, -2), (0, 0)) == 3

    def test_tree_distance(self):
        assert tree_distance([(3,)], [(0,)]) == 3
        assert tree_distance([(2,), (-1,)], [(0,)]) == 3
        assert tree_distance([(1, 1), (2, -1)], [(0, 0)]) == 4
        assert tree_distance([(5,)], [(0,), (4,)]) == 1

    def test_halo(self):
        m = ou_chain(2)
        assert m.R == 1
        assert m.sim_sites[-2:] == ((-3,), (3,))
        assert len(ou_chain(2, coupling=0.0).sim_sites) == 7  # offsets still declared


class TestModel:
    def test_two_site_diffusion(self):
        A = two_site(0.5).diffusion_matrix()
        assert np.allclose(A, [[1, 0.5, 0, 0], [0.5, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]])
        assert np.allclose(sorted(np.linalg.eigvalsh(A[:2, :2])), [0.5, 1.5])

    def test_two_site_not_pd(self):
        with pytest.raises(LatticeError, match="eigenvalue"):
            two_site(1.2)

    def test_diagonal_s_rejected(self):
        with pytest.raises(LatticeError, match="diagonal"):
            LatticeModel(1, box(1), 1, (parse_field("[1]"),), (0,), offsets=NN, S={(0,): ((pp("1/2", 2),),)})

    def test_q_arity_checked(self):
        with pytest.raises(LatticeError, match="variables"):
            LatticeModel(1, box(1), 1, (parse_field("[1]"),), (0,), offsets=NN, q={0: pp("x1", 1)})

    def test_state_dependent_s_fails_with_configuration(self):
        m = LatticeModel(
            1, ((0,), (1,)), 1, (parse_field("[1]"),), (0,), offsets=NN,
            S={(1,): ((pp("x1", 2),),), (-1,): ((pp("x2", 2),),)}, delta=0.5,
        )
        sde = build_coupled_sde(m)
        w = configuration_array(m, {(0,): np.array([3.0])})
        with pytest.raises(LatticeError, match="configuration"):
            simulate(sde, w, [0.02], 4, 0.01, 0)

    def test_generator_match(self):
        m = LatticeModel(
            1, box(1), 1, (parse_field("[1]"),), (0,), b=(0.5,), lam=1.0, D=parse_field("[x1]"),
            offsets=NN, q={0: pp("1/5*x1 + 1/5*x3 + x2^2", 3)}, S={(1,): ((pp("3/10", 2),),)}, delta=0.3,
        )
        assert lifted_generator_match(m)

    def test_generator_match_detects_change(self):
        good = ou_chain(1)
        sde = build_coupled_sde(good)
        assert lifted_generator_match(good)
        assert str(sde.base_drift[0]) == "-x1"


class TestSimulation:
    def test_product_dynamics_match_ou(self):
        m = ou_chain(1, coupling=0.0, lam=1.0)
        w = configuration_array(m, {(0,): np.array([0.8])})
        t = 0.5
        est = lattice_expectation(m, F0, w, t, 8192, 0.005, 4)
        var = 1 - math.exp(-2 * t)
        exact = math.sin(0.8 * math.exp(-t)) * math.exp(-var / 2)
        assert abs(est.mean - exact) < 4 * est.stderr + 5e-3

    def test_unit_and_contraction(self):
        m = ou_chain(2)
        w = configuration_array(m, sample_configuration(m.sim_sites, 1, 1))
        one = Cylinder(((0,),), lambda V: np.ones(V.shape[:-2]))
        assert tuple(lattice_expectation(m, one, w, 0.3, 1024, 0.01, 1)) == (1.0, 0.0)
        assert abs(lattice_expectation(m, F0, w, 0.3, 1024, 0.01, 1).mean) <= 1

    def test_threads_and_volumes(self):
        m = ou_chain(2, coupling=0.0)
        big = ou_chain(4, coupling=0.0)
        cfg = sample_configuration(big.sim_sites, 1, 5)
        a = simulate(build_coupled_sde(m), configuration_array(m, cfg), [0.2], 2048, 0.01, 9, threads=1)
        b = simulate(build_coupled_sde(m), configuration_array(m, cfg), [0.2], 2048, 0.01, 9, threads=3)
        c = simulate(build_coupled_sde(big), configuration_array(big, cfg), [0.2], 2048, 0.01, 9)
        assert np.array_equal(a, b)
        # decoupled: the origin path is identical in both boxes
        assert np.array_equal(a[..., m.index()[(0,)], :], c[..., big.index()[(0,)], :])

    def test_outside_support_rejected(self):
        m = ou_chain(1)
        with pytest.raises(LatticeError, match="outside"):
            sin_observable((5,))(m, np.zeros((1, len(m.sim_sites), 1)))


class TestPropagation:
    def test_locality_at_time_zero(self):
        m = ou_chain(3)
        w = configuration_array(m, sample_configuration(m.sim_sites, 1, 2))
        prof = derivative_profile(m, F0, 0.0, [(0,), (1,), (3,)], [w])
        assert prof[0].norm > 0 and prof[1].norm == 0.0 and prof[2].norm == 0.0

    def test_decoupled_exact_zero(self):
        m = ou_chain(3, coupling=0.0)
        w = configuration_array(m, sample_configuration(m.sim_sites, 1, 2))
        prof = derivative_profile(m, F0, 0.4, [(1,), (2,)], [w], paths=1024)
        assert [p.norm for p in prof] == [0.0, 0.0]
        assert fsp_fit(prof + [SiteNorm(((0,),), 0, 0.4, 0.5, 0.01, False)] * 3).ok is False

    def test_coupled_decreasing(self):
        m = ou_chain(3)
        w = configuration_array(m, sample_configuration(m.sim_sites, 1, 2, 0.5))
        prof = derivative_profile(m, F0, 0.5, [(0,), (1,), (2,), (3,)], [w], paths=2048)
        norms = [p.norm for p in prof]
        assert all(a > b > 0 for a, b in zip(norms, norms[1:]))
        assert not any(p.inconclusive for p in prof)
        assert [p.distance for p in prof] == [0, 1, 2, 3]

    def test_second_order_profile(self):
        m = ou_chain(2)
        w = configuration_array(m, sample_configuration(m.sim_sites, 1, 2, 0.5))
        prof = derivative_profile(m, F0, 0.0, [((0,), (1,))], [w], order=2)
        assert prof[0].norm == 0.0 and prof[0].distance == 1

    def test_fit_recovers_synthetic(self):
        rows = [(d, t, math.exp(1 + 2 * t - 0.7 * d)) for d in range(5) for t in (0.1, 0.3)]
        env = fsp_fit(rows)
        assert env.ok and env.B == pytest.approx(math.e) and env.c == pytest.approx(2) and env.v == pytest.approx(0.7)

    def test_fit_needs_four_distances(self):
        assert not fsp_fit([(d, 0.1, 1.0) for d in range(3)]).ok

    def test_fit_flags_growth(self):
        env = fsp_fit([(d, 0.5, math.exp(0.1 * d)) for d in range(5)])
        assert not env.ok and "slope" in env.message


class TestConvergence:
    CFGS = [sample_configuration(box(6), 1, s) for s in range(2)]

    def test_time_zero(self):
        cv = volume_convergence(ou_chain(1), [1, 2, 3], F0, 0.0, self.CFGS)
        assert cv.sup_diff == [0.0, 0.0]

    def test_decoupled(self):
        cv = volume_convergence(ou_chain(1, coupling=0.0), [1, 2, 3], F0, 0.5, self.CFGS, paths=1024)
        assert cv.sup_diff == [0.0, 0.0]

    def test_coupled_decay(self):
        cv = volume_convergence(ou_chain(1), [1, 2, 3, 4], F0, 0.5, self.CFGS, paths=1024)
        assert all(0 < r < 0.8 for r in cv.ratios)


class TestLyapunov:
    def test_ou_site_constants(self):
        C1, W = certify_site_lyapunov(ou_chain(1, lam=1.0), 0.8)
        assert C1 == pytest.approx(1.8, abs=1e-9) and W >= 1

    def test_no_confinement_rejected(self):
        with pytest.raises(LatticeError, match="tail"):
            certify_site_lyapunov(ou_chain(1, lam=0.0), 0.8)

    def test_spec_nearest_neighbour(self):
        spec = lyapunov_spec(ou_chain(4))
        assert spec.C3 == 0 and spec.S_sup == pytest.approx(0.4)
        assert spec.C4 == pytest.approx(0.4) and spec.kappa_bar == pytest.approx(0.5)
        assert np.isclose(spec.weights.sum(), 1.0)

    def test_strong_coupling_rejected(self):
        with pytest.raises(LatticeError, match="kappa_bar"):
            lyapunov_spec(ou_chain(2, coupling=0.5))

    def test_decoupled_scalar_gronwall(self):
        m = ou_chain(2, coupling=0.0)
        spec = lyapunov_spec(m)
        assert spec.C4 == 0 and spec.kappa_bar == 0
        w = configuration_array(m, sample_configuration(m.sim_sites, 1, 4, 2.0))
        ts = [0.5, 1.0, 2.0]
        run = lyapunov_drift(m, spec, w, ts, 1024, 0.01, 3)
        for t, F, se in zip(run.t, run.F, run.stderr):
            g = np.sum(spec.weights * (spec.C1 / spec.C2 + math.exp(-spec.C2 * t) * rho(w[:, 0])))
            assert F - 3 * se <= g
        assert not run.violations

    def test_deterministic_minimum(self):
        m = LatticeModel(1, box(1), 1, (parse_field("[1]"),), (), lam=1.0, D=parse_field("[x1]"), offsets=NN)
        spec = lyapunov_spec(m, 0.5)
        run = lyapunov_drift(m, spec, configuration_array(m), [0.5, 1.0, 1.5], 8, 0.01, 0)
        assert np.all(np.diff(run.F) <= 0) and run.F[0] == pytest.approx(1.0)

    def test_tightness_probe(self):
        m = ou_chain(2)
        spec = lyapunov_spec(m)
        w = configuration_array(m)
        b = spec.bound(float(np.sum(spec.weights * rho(w[:, 0]))))
        lo = tightness_probe(spec, w, [b, 10 * b, 1e12])
        assert lo[0] == 0.0 and lo[1] == pytest.approx(0.9) and lo[2] == pytest.approx(1.0)
        assert np.all(np.diff(tightness_probe(spec, w, np.geomspace(b, 100 * b, 7))) >= 0)


class TestErgodic:
    T = np.linspace(0.25, 2.5, 10)

    def _pair(self, m):
        w = configuration_array(m)
        w2 = w.copy()
        w[m.index()[(0,)]] = 1.0
        w2[m.index()[(0,)]] = -1.0
        return w, w2

    def test_identical_configurations(self):
        m = ou_chain(2, lam=2.0)
        w, _ = self._pair(m)
        run = ergodic_contraction(m, F0, w, w, self.T, 256)
        assert np.all(run.diff == 0) and run.inconclusive

    def test_constant_observable(self):
        m = ou_chain(2, lam=2.0)
        one = Cylinder(((0,),), lambda V: np.ones(V.shape[:-2]))
        run = ergodic_contraction(m, one, *self._pair(m), self.T, 256)
        assert np.all(run.diff == 0)

    def test_decoupled_rate(self):
        m = ou_chain(2, coupling=0.0, lam=2.0)
        run = ergodic_contraction(m, F0, *self._pair(m), self.T, 2048, t_fit_min=0.5)
        assert not run.inconclusive and run.rate == pytest.approx(2.0, rel=0.2)

    def test_telescoping_terms_sum(self):
        m = ou_chain(2, lam=2.0)
        w = configuration_array(m, sample_configuration(m.sim_sites, 1, 1))
        w2 = configuration_array(m, sample_configuration(m.sim_sites, 1, 2))
        run = ergodic_contraction(m, F0, w, w2, [0.5], 1024, gradient_sum=True)
        assert run.terms.shape == (1, len(m.sim_sites))
        assert abs(abs(run.terms[0].sum()) - run.diff[0]) < 1e-12
        assert run.grad_sum[0] > 0


class TestConditions:
    def test_compliant(self):
        m = kolmogorov_sites(
            {0: pp("1/10*x2 + 1/10*x6", 6), 1: pp("1/20", 6)},
            {(1,): ((pp("1/10", 4),),), (-1,): ((pp("1/10", 4),),)},
        )
        rep = smoothing_conditions_check(m)
        assert rep.all_pass, rep.violations

    def test_si1a_violation_named(self):
        rep = smoothing_conditions_check(kolmogorov_sites({1: pp("x6", 6)}))
        assert not rep.results["si1a"]
        assert rep.violations["si1a"] == ["Z_0,(1,) q_1,(0,) != 0"]
        assert rep.results["si2a"] and rep.results["si3a"] and rep.results["si4a"]

    def test_si3a_violation(self):
        m = LatticeModel(
            1, box(1), 3, (parse_field("[1; 0; 0]"), parse_field("[0; 0; -x1]"), parse_field("[0; 0; 1]")),
            (0,), offsets=NN,
        )
        rep = smoothing_conditions_check(m)
        assert rep.results == {"si1a": True, "si2a": True, "si3a": False, "si4a": True, "q_diag": True, "S_const": True}
        assert rep.violations["si3a"] == ["c_102 = 1"]

    def test_commuting_chain_vacuous(self):
        rep = smoothing_conditions_check(kolmogorov_sites({}))
        assert rep.all_pass

    def test_state_dependent_s_flagged(self):
        m = kolmogorov_sites({}, {(1,): ((pp("1/10*x2", 4),),)})
        rep = smoothing_conditions_check(m)
        assert not rep.results["S_const"] and rep.results["si1a"]
