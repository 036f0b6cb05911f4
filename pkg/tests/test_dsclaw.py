import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import optimize

from dscl import dsclaw as D
from dscl import measure as M


def _semicircle_cdf(x):
    return 0.5 + x * math.sqrt(4 - x * x) / (4 * math.pi) + math.asin(x / 2) / math.pi


def _two_atom_root(a, z):
    # m = -w / (w^2 - a^2), w = z + m  <=>  m^3 + 2z m^2 + (z^2 - a^2 + 1) m + z = 0
    roots = np.roots([1, 2 * z, z * z - a * a + 1, z])
    good = [r for r in roots if r.imag > 0 and (z + r).imag > 0]
    assert len(good) == 1
    return good[0]


def _two_atom_edge(r):
    u = ((2 * r * r + 1) + math.sqrt(8 * r * r + 1)) / 2
    zeta = math.sqrt(u)
    return zeta + zeta / (zeta * zeta - r * r)


def _params(**kw):
    base = dict(N=1000, q=10.0, lam=0.5, s=1.0)
    base.update(kw)
    return D.ModelParams(**base)


class TestSemicircle:
    def test_examples(self):
        assert D.m_semicircle(1j) == pytest.approx(1j * (math.sqrt(5) - 1) / 2, abs=1e-15)
        assert D.solve_mfc(M.delta(), 0, 1j).m == pytest.approx(0.6180339887498949j, abs=1e-12)
        assert D.solve_mfc(M.delta(), 0, 2.5 + 1e-8j).m.real == pytest.approx(-0.5, abs=1e-7)

    def test_subordination_residual(self):
        z = np.array([0.3 + 0.01j, -1.7 + 0.5j, 3 + 1e-3j])
        m = D.m_semicircle(z)
        assert np.max(D.subordination_check(m, z, M.delta())) < 1e-12
        assert np.all((z + m).imag >= z.imag)

    def test_two_atom_oracle(self):
        m = D.solve_mfc(M.make_two_atom(1), 0.5, 1j).m
        assert m == pytest.approx(_two_atom_root(0.5, 1j), abs=1e-11)

    @given(st.floats(-3, 3), st.floats(1e-4, 5))
    def test_two_atom_oracle_property(self, E, eta):
        z = complex(E, eta)
        m = D.solve_mfc(M.make_two_atom(1), 0.4, z).m
        assert abs(m - _two_atom_root(0.4, z)) < 1e-9


class TestRefined:
    def test_small_a_agrees(self):
        nu = M.make_uniform()
        z = np.array([0.2 + 0.1j, 1.9 + 1e-3j, -2.5 + 0.5j])
        p = D.ModelParams(N=10 ** 8, q=10 ** 4, lam=0.5, s=1e-8)
        a = D.solve_refined(nu, p, z).m
        b = D.solve_mfc(nu, 0.5, z).m
        assert np.max(np.abs(a - b)) < 1e-10

    def test_sparse_delta(self):
        p = D.ModelParams(N=1000, q=10, lam=0, s=1)
        m = D.solve_refined(M.delta(), p, 3 + 1e-6j).m
        assert m.real < 0 and abs(m + 1 / 3) < 0.1
        assert abs(m - D.sparse_quartic(p, 3 + 1e-6j)) < 1e-3

    @given(st.floats(-3, 3), st.floats(1e-5, 3), st.sampled_from([0.0, 0.3, 0.7]))
    def test_equivalence(self, E, eta, lam):
        p = _params(lam=lam, q=10.0, s=1.0)
        nu = M.make_two_atom(1)
        z = complex(E, eta)
        ref = D.solve_mfc(M.sparsity_convolve(M.scale(nu, lam), p.s, p.q), 1.0, z).m
        assert abs(D.solve_refined(nu, p, z).m - ref) < 1e-9

    def test_residual_certified(self):
        nu = M.make_jacobi(1, 2)
        p = _params()
        z = np.linspace(-2.5, 2.5, 41) + 1e-4j
        sol = D.solve_refined(nu, p, z)
        assert np.max(sol.residual) < 1e-10
        tilde = M.sparsity_convolve(M.scale(nu, p.lam), p.s, p.q)
        assert np.max(D.subordination_check(sol.m, z, tilde)) < 1e-9
        assert np.all(sol.m.imag > 0)

    def test_stability_refusal(self):
        with pytest.raises(D.StabilityError) as exc:
            D.solve_refined(M.make_two_atom(1), _params(lam=1.5), 1j)
        assert exc.value.split_detected and exc.value.margin < 1

    def test_solver_failure(self):
        cfg = D.SolverConfig(max_iter=1, tol=1e-300, max_refine=0)
        with pytest.raises(D.SolverError) as exc:
            D.solve_mfc(M.make_uniform(), 0.5, [0.3 + 1e-6j, 0.1 + 1j], cfg)
        assert math.isfinite(exc.value.residual)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            D.SolverConfig(damping=0)
        with pytest.raises(ValueError):
            D.SolverConfig(eta_ladder=(1e-3, 1e-2))
        with pytest.raises(ValueError):
            D.ModelParams(N=100, q=20, lam=0)
        with pytest.raises(ValueError):
            D.ModelParams(N=1000, q=10, lam=2.5)

    def test_domain(self):
        p = _params()
        d = D.SpectralDomain.build(p, [0, 1], [0.1, 1])
        assert d.points.shape == (4,)
        with pytest.raises(ValueError):
            D.SpectralDomain.build(p, [0], [1e-6])
        with pytest.raises(ValueError):
            D.SpectralDomain.build(p, [6], [1])


class TestVectorAndQuartic:
    def test_vector_examples(self):
        p = _params()
        mt = D.solve_refined(M.make_uniform(), p, 0.5 + 0.1j).m
        out = D.vector_M(np.zeros(7), p, mt, 0.5 + 0.1j)
        assert np.allclose(out.M, out.M[0])
        p0 = _params(s=0.0)
        V = np.array([-0.5, 0.1, 0.9])
        m0 = D.solve_mfc(M.make_uniform(), 0.5, 0.2 + 0.3j).m
        assert np.allclose(D.vector_M(V, p0, m0, 0.2 + 0.3j).M, 1 / (0.5 * V - 0.2 - 0.3j - m0), atol=1e-15)

    def test_vector_mean_is_solution(self):
        # empirical potential: <M> solves the refined equation for nu_hat
        p = _params()
        V = M.deterministic_potential(M.make_uniform(), 400)
        nu_hat = M.empirical(V)
        z = 0.7 + 0.05j
        mt = D.solve_refined(nu_hat, p, z).m
        assert abs(D.vector_M(V, p, mt, z).mean - mt) < 1e-11

    def test_vector_singular(self):
        with pytest.raises(ZeroDivisionError):
            D.vector_M([0.0], _params(s=0.0), -1.0 + 0j, 1.0 + 0j)

    def test_quartic(self):
        z = np.array([0.5 + 0.2j, -1 + 1j, 2.1 + 1e-3j])
        assert np.allclose(D.sparse_quartic(0.0, z), D.m_semicircle(z))
        m = D.sparse_quartic(0.01, 10j)
        assert m == pytest.approx(0.1j, rel=2e-2)
        g = 1 + z * D.sparse_quartic(0.01, z) + D.sparse_quartic(0.01, z) ** 2 + 0.01 * D.sparse_quartic(0.01, z) ** 4
        assert np.max(np.abs(g)) < 1e-12

    def test_quartic_edge(self):
        a = 0.01
        L = D.quartic_edge(a)
        assert abs(L - (2 + a)) < 3 * a * a
        E = np.linspace(1.95, 2.05, 2001)
        rho = np.imag(D.sparse_quartic(a, E + 1e-9j)) / math.pi
        assert abs(E[rho > 1e-4].max() - L) < 2e-3


class TestEdges:
    def test_semicircle(self):
        ed = D.find_edges(M.delta())
        assert ed.zeta_plus == pytest.approx(1, abs=1e-12) and ed.zeta_minus == pytest.approx(-1, abs=1e-12)
        assert ed.L_plus == pytest.approx(2, abs=1e-9) and ed.L_minus == pytest.approx(-2, abs=1e-9)
        assert ed.m_at_edge_plus == pytest.approx(-1, abs=1e-9)

    def test_two_atom_closed_form(self):
        for r in (0.1, 0.3, 0.45):
            ed = D.find_edges(M.make_two_atom(r))
            assert ed.L_plus == pytest.approx(_two_atom_edge(r), abs=1e-11)

    def test_sparse_two_atom_expansion(self):
        q, s = 10.0, 1.0
        a = s / q ** 2
        mu = M.sparsity_convolve(M.delta(), s, q)
        ed = D.find_edges(mu)
        assert abs(ed.L_plus - _two_atom_edge(math.sqrt(a))) < 1e-11
        assert abs(ed.L_plus - (2 + a - 1.25 * a * a)) < 10 * q ** -6
        assert D.edge_expansion_of(mu) == pytest.approx(2 + a - 1.25 * a * a, abs=1e-15)

    def test_expansion_examples(self):
        assert D.edge_expansion(0, 0, 0, 0) == 2.0
        a = 0.01
        assert D.edge_expansion(0, a, 0, a * a) == pytest.approx(2 + a - 1.25 * a * a, abs=1e-15)

    def test_split_refusal(self):
        with pytest.raises(D.StabilityError):
            D.find_edges(M.scale(M.make_two_atom(1), 1.5))

    def test_json(self):
        d = D.find_edges(M.make_uniform()).to_json()
        assert d["margin"] == "inf" and d["split_detected"] is False
        assert set(d) >= {"L_minus", "L_plus", "zeta_minus", "zeta_plus", "m_at_edge_plus"}

    @pytest.mark.parametrize("nu", [M.make_uniform(), M.make_jacobi(1, 2), M.make_two_atom(0.3)],
                             ids=["uniform", "jacobi12", "two_atom"])
    def test_edge_consistency(self, nu):
        p = _params(lam=0.5)
        tilde = M.sparsity_convolve(M.scale(nu, p.lam), p.s, p.q)
        ed = D.find_edges(tilde)
        law = D.FcLaw.refined(nu, p)
        E = np.linspace(ed.L_plus - 0.05, ed.L_plus + 0.05, 2001)
        rho = D.invert_density(law, E)
        assert abs(E[rho > 1e-4].max() - ed.L_plus) < 2e-3

    def test_square_root_band(self):
        p = _params()
        law = D.FcLaw.refined(M.make_uniform(), p)
        ed = D.find_edges(law.shifted_measure)
        kappa = np.geomspace(1e-3, 0.1, 25)
        im = np.imag(law(ed.L_plus - kappa + 1e-8j))
        band = im / np.sqrt(kappa)
        assert band.max() / band.min() <= 4
        slope = np.polyfit(np.log(kappa), np.log(im), 1)[0]
        assert 0.45 <= slope <= 0.55


class TestDensity:
    def test_semicircle_density(self):
        law = D.FcLaw.standard(M.delta(), 0)
        assert D.invert_density(law, [0.0])[0] == pytest.approx(1 / math.pi, abs=1e-6)
        E = np.linspace(-2.2, 2.2, 2001)
        rho = D.invert_density(law, E)
        assert np.trapezoid(rho, E) == pytest.approx(1, abs=5e-3)
        assert np.all(rho[np.abs(E) > 2 + 1e-6] < 1e-6)

    def test_classical_locations_semicircle(self):
        law = D.FcLaw.standard(M.delta(), 0)
        gam = D.classical_locations(D.find_edges(M.delta()), law, 4)
        ref = optimize.brentq(lambda x: _semicircle_cdf(x) - 0.25, -2, 2, xtol=1e-14)
        assert ref == pytest.approx(-0.80795, abs=1e-5)
        assert gam[0] == pytest.approx(ref, abs=1e-6)
        assert gam[1] == pytest.approx(0, abs=1e-6)
        assert gam[3] == pytest.approx(2, abs=1e-3)

    def test_classical_locations_symmetric(self):
        p = _params()
        law = D.FcLaw.refined(M.make_uniform(), p)
        ed = D.find_edges(law.shifted_measure)
        gam = D.classical_locations(ed, law, 1000)
        assert gam[499] == pytest.approx(0, abs=1e-6)
        assert gam[-1] == pytest.approx(ed.L_plus, abs=1e-3)
        assert np.all(np.diff(gam) >= 0)

    def test_integrated_density_mass_defect(self):
        law = D.FcLaw.standard(M.delta(), 0)
        wrong = D.EdgeData(-1.0, 1.0, -0.5, 0.5, 0, 0, math.inf)
        with pytest.raises(D.SolverError):
            D.integrated_density(wrong, law)


class TestEnvelopes:
    def test_local_law_example(self):
        p = D.ModelParams(N=10 ** 6, q=100.0, lam=0.5)
        ed = D.EdgeData(-2.0, 2.0, -1, 1, 1, -1, math.inf)
        env = D.local_law_envelope(1.0 + 1e-2j, p, ed)
        assert env == pytest.approx(1e-4 / math.sqrt(1.01) + 1e-4, rel=1e-12)
        assert env == pytest.approx(9.95e-5 + 1e-4, rel=1e-3)

    def test_entrywise_examples(self):
        p = D.ModelParams(N=10 ** 6, q=1000.0, lam=0.5)
        assert D.entrywise_envelope(0.3 + 0.5j, p, 0.0) == pytest.approx(1e-3 + 1 / (1e6 * 0.5), rel=1e-14)
        eta = 1e6 ** (-1 / 3)
        assert D.entrywise_envelope(1j * eta, p, 1.0) == pytest.approx(1e6 ** -0.5 + 1e6 ** (-1 / 3) + 1e6 ** (-2 / 3),
                                                                       rel=1e-12)

    def test_psi_examples(self):
        p = D.ModelParams(N=10 ** 4, q=10.0, lam=0.5, tau=0.01)
        z = 1j / p.tau
        base = 10.0 ** -2 + 1e4 ** -0.25 * 10 ** -0.5
        assert D.psi_b(z, 2, p, 0.0, vartheta=0.0) == pytest.approx(base, rel=1e-14)
        N = 10 ** 6
        q = N ** (1 / 6)
        pc = D.ModelParams(N=N, q=q, lam=0.5)
        assert q ** -2 == pytest.approx(N ** -0.25 * q ** -0.5, rel=1e-12)
        assert pc.q == q

    @given(st.floats(0.5, 3), st.floats(0.5, 3), st.floats(1e-3, 10))
    def test_psi_monotone(self, b1, b2, eta):
        p = D.ModelParams(N=10 ** 4, q=10.0, lam=0.5)
        lo, hi = sorted((b1, b2))
        assert D.psi_b(1j * eta, hi, p, 0.1) <= D.psi_b(1j * eta, lo, p, 0.1)
        assert D.psi_b(1j * eta * 2, lo, p, 0.1) <= D.psi_b(1j * eta, lo, p, 0.1)

    def test_entrywise_decreasing_in_eta(self):
        p = _params()
        law = D.FcLaw.refined(M.make_uniform(), p)
        z = 0.4 + 1j * np.geomspace(1e-2, 1, 10)
        env = D.entrywise_envelope(z, p, law(z).imag)
        assert np.all(np.diff(env) < 0)
