"""Acceptance criteria 1-15 at their stated tolerances.

Each test prints one ``criterion k: PASS|FAIL`` line and the terminal summary
repeats them.  Statistical criteria run the shipped acceptance configurations;
reports are cached so that criterion 15 can compare a fresh rerun with them.
"""
import functools
import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from dscl import dsclaw as D
from dscl import measure as M
from dscl import verify as Vf


def record(k: int, ok: bool, detail: str):
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    print(line)
    ACCEPTANCE_LINES[k] = (bool(ok), detail)
    assert ok, line


@functools.cache
def report(name: str):
    t = time.perf_counter()
    rep = Vf.run_experiment(Vf.acceptance_config(name))
    return rep, time.perf_counter() - t


def gate(rep, name):
    c = rep.check(name)
    return c.passed, c


def test_c01_semicircle_degeneration():
    t = time.perf_counter()
    p = D.ModelParams(N=1000, q=10.0, lam=0.0, s=0.0)
    rng = np.random.default_rng(101)
    E = rng.uniform(-p.E0, p.E0, 20)
    eta = np.exp(rng.uniform(math.log(p.N ** (-1 + p.tau)), math.log(1 / p.tau), 20))
    z = E + 1j * eta
    err = float(np.max(np.abs(D.solve_mfc(M.make_uniform(), 0.0, z).m - D.m_semicircle(z))))
    ed = D.find_edges(M.delta())
    edge_err = max(abs(ed.L_plus - 2), abs(ed.L_minus + 2))
    dt = time.perf_counter() - t
    record(1, err <= 1e-10 and edge_err <= 1e-9 and dt < 1.0,
           f"max|m - m_sc| = {err:.2e}, edge error {edge_err:.2e}, {dt:.2f} s")


def test_c02_refinement_equivalence():
    t = time.perf_counter()
    worst = 0.0
    for nu in (M.make_two_atom(1.0), M.make_uniform()):
        for lam in (0.0, 0.3):
            for q in (10.0, 30.0):
                p = D.ModelParams(N=1000, q=q, lam=lam, s=1.0)
                z = D.SpectralDomain.build(p, np.linspace(-3, 3, 10),
                                           np.geomspace(p.N ** (-1 + p.tau), 1.0, 5)).points
                a = D.solve_refined(nu, p, z).m
                b = D.solve_mfc(M.sparsity_convolve(M.scale(nu, lam), p.s, p.q), 1.0, z).m
                worst = max(worst, float(np.max(np.abs(a - b))))
    dt = time.perf_counter() - t
    record(2, worst <= 1e-9 and dt < 10, f"max deviation {worst:.2e} over 8 x 50 points, {dt:.1f} s")


def test_c03_moment_identities():
    rng = np.random.default_rng(303)
    nu = M.discrete(rng.uniform(-1, 1, 100), np.full(100, 0.01))
    lam, s, q = 0.7, 1.3, 12.0
    a = s / q ** 2
    nl = M.scale(nu, lam)
    tilde = M.sparsity_convolve(nl, s, q)
    x, w = nu.x, nu.w
    m = lambda k: float(np.dot(w, (lam * x) ** k))
    errs = [abs(M.moment(nl, k) - lam ** k * M.moment(nu, k)) for k in range(1, 5)]
    errs += [abs(M.moment(tilde, 2) - (m(2) + a)),
             abs(M.moment(tilde, 3) - (m(3) + 3 * a * m(1))),
             abs(M.moment(tilde, 4) - (m(4) + 6 * a * m(2) + a * a))]
    worst = max(errs)
    record(3, worst <= 1e-12, f"max identity defect {worst:.2e} (N=100 atoms)")


def test_c04_edge_expansion_order():
    t = time.perf_counter()
    nu = M.discrete([-0.5, 1.0], [2 / 3, 1 / 3])
    lams = [0.2, 0.1, 0.05, 0.025, 0.0125]
    err = []
    for lam in lams:
        tilde = M.sparsity_convolve(M.scale(nu, lam), 1.0, 1e3)
        err.append(abs(D.find_edges(tilde).L_plus - D.edge_expansion_of(tilde)))
    ratios = [err[i] / err[i + 1] for i in range(len(err) - 1)]
    qs = np.array([4.0, 8.0, 16.0, 32.0])
    qerr = []
    for q in qs:
        tilde = M.sparsity_convolve(M.delta(), 1.0, q)
        qerr.append(abs(D.find_edges(tilde).L_plus - D.edge_expansion_of(tilde)))
    slope = float(np.polyfit(np.log(qs), np.log(qerr), 1)[0])
    dt = time.perf_counter() - t
    ok = all(16 <= r <= 64 for r in ratios) and slope <= -4 and dt < 30
    record(4, ok, f"halving ratios {', '.join(f'{r:.1f}' for r in ratios)}; q-slope {slope:.2f}; {dt:.1f} s")


def test_c05_square_root_edge():
    p = D.ModelParams(N=1000, q=10.0, lam=0.5, s=1.0)
    law = D.FcLaw.refined(M.make_uniform(), p)
    ed = D.find_edges(law.shifted_measure)
    kappa = np.geomspace(1e-3, 0.1, 30)
    im = np.imag(law(ed.L_plus - kappa + 1e-8j))
    slope = float(np.polyfit(np.log(kappa), np.log(im), 1)[0])
    record(5, 0.45 <= slope <= 0.55, f"fitted exponent {slope:.4f}")


def test_c06_local_law():
    rep, dt = report("local-law")
    ok, c = gate(rep, "N=1000 sup_ratio violation fraction")
    mx = rep.check("N=1000 max sup_ratio").measured
    record(6, ok and dt < 300, f"violation fraction {c.measured:.3f}, max ratio {mx:.3f}, {dt:.0f} s")


def test_c07_entrywise():
    rep, dt = report("entrywise")
    ok, c = gate(rep, "N=1000 sup_ratio violation fraction")
    d = rep.check("N=1000 max diagonal ratio").measured
    o = rep.check("N=1000 max off-diagonal ratio").measured
    record(7, ok, f"violation fraction {c.measured:.3f}, max diagonal {d:.2f}, off-diagonal {o:.2f}")


def test_c08_rigidity():
    rep, dt = report("rigidity")
    ok_idx, ci = gate(rep, "N=1000 replicas with <99% indices in bound")
    ok_ext, ce = gate(rep, "N=1000 extremal |mu_N-gamma_N| violation fraction")
    mx = rep.check("N=1000 max extremal ratio").measured
    record(8, ok_idx and ok_ext,
           f"index gate fraction {ci.measured:.3f}; extremal violation fraction {ce.measured:.3f} (max ratio {mx:.2f})")


def test_c09_dos():
    rep, dt = report("dos")
    ok, c = gate(rep, "N=2000 sup_ratio violation fraction")
    mx = rep.check("N=2000 max sup_ratio").measured
    record(9, ok, f"violation fraction {c.measured:.3f}, max ratio {mx:.3f}, {dt:.0f} s")


def test_c10_extremal_bound():
    rep, dt = report("edge-bound")
    ok_h, ch = gate(rep, "N=1000 extremal bound violation fraction")
    ok_w, cw = gate(rep, "N=1000 lam=0 ||W|| cross-check violation fraction")
    record(10, ok_h and ok_w,
           f"||H|| violation fraction {ch.measured:.3f}; lam=0 ||W|| violation fraction {cw.measured:.3f}")


def test_c11_edge_clt():
    rep, dt = report("edge-clt")
    ok_v, cv = gate(rep, "N=500 edge |var/sigma^2 - 1|")
    ok_k, ck = gate(rep, "N=500 edge KS vs N(0, fitted var)")
    record(11, ok_v and ok_k and dt < 1200,
           f"|var ratio - 1| = {cv.measured:.3f} (<= 0.25); KS {ck.measured:.3f} vs {ck.envelope:.3f}; {dt:.0f} s")


def test_c12_endpoint_clt():
    rep, dt = report("endpoint-clt")
    ok, c = gate(rep, "N=2000 endpoint |var/sigma^2 - 1|")
    record(12, ok and dt < 120, f"|var ratio - 1| = {c.measured:.3f} (<= 0.25), {dt:.0f} s")


def test_c13_delocalization():
    rep, dt = report("delocalization")
    ok, c = gate(rep, "N=1000 sup_ratio violation fraction")
    med = rep.check("N=1000 median max ||u||_inf sqrt(N)").measured
    record(13, ok, f"violation fraction {c.measured:.3f}; median max ||u||_inf sqrt(N) = {med:.2f} vs "
                   f"N^0.1 = {1000 ** 0.1:.2f}")


def test_c14_p_diagnostic():
    rep, dt = report("p-diag")
    ok, c = gate(rep, "N=1000 sup_ratio violation fraction")
    ok_a, ca = gate(rep, "N=1000 max disagreement of the two paths")
    record(14, ok and ok_a and c.envelope == pytest.approx(0.10),
           f"violation fraction {c.measured:.3f} (<= 0.10); path disagreement {ca.measured:.1e}")


def test_c15_determinism(tmp_path):
    parts, same = [], True
    for name in ("endpoint-clt", "local-law"):
        first, _ = report(name)
        second = Vf.run_experiment(Vf.acceptance_config(name))
        a = first.write(tmp_path / name / "a")
        b = second.write(tmp_path / name / "b")
        ok = len(a) == len(b) and all(x.read_bytes() == y.read_bytes() for x, y in zip(a, b))
        same &= ok
        parts.append(f"{name}: {len(a)} files {'identical' if ok else 'DIFFER'}")
    record(15, same, "; ".join(parts))
