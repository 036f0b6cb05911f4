"""Self-consistent spectral laws for deformed sparse matrices.

The deformed semicircle law for ``H = W + lam * V`` solves

    m(z) = int dnu(v) / (lam * v - z - m(z)),

and its sparsity refinement replaces the resolvent denominator by a Schur
complement that carries the correction ``a = s / q**2``:

    m(z) = int dnu(v) / (d - a / d),   d = lam * v - z - m(z).

Because ``1 / (d - a/d) = (1/(d - sqrt a) + 1/(d + sqrt a)) / 2`` the refined
law is the plain law of the shifted measure
``sparsity_convolve(scale(nu, lam), s, q)`` at unit coupling, which is how
its edges are obtained.

Besides the solvers this module evaluates spectral edges, the small-coupling
edge expansion and the error envelopes of the local laws.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import integrate, interpolate, optimize

from .measure import (
    Measure,
    moment,
    scale,
    sparsity_convolve,
    stability_margin,
    stieltjes_derivative,
    _stieltjes_any,
)

__all__ = [
    "ModelParams",
    "SpectralDomain",
    "SolverConfig",
    "FcLaw",
    "FcSolution",
    "EdgeData",
    "VectorSolution",
    "vector_M",
    "SolverError",
    "StabilityError",
    "m_semicircle",
    "solve_mfc",
    "solve_refined",
    "sparse_quartic",
    "invert_density",
    "find_edges",
    "edge_expansion",
    "edge_expansion_of",
    "quartic_edge",
    "classical_locations",
    "integrated_density",
    "IntegratedDensity",
    "local_law_envelope",
    "entrywise_envelope",
    "psi_b",
    "subordination_check",
]


class SolverError(RuntimeError):
    """Raised when the fixed-point solver cannot reach the residual tolerance."""

    def __init__(self, msg: str, residual: float = math.nan, z=None):
        super().__init__(msg)
        self.residual = residual
        self.z = z


class StabilityError(ValueError):
    """Raised when a measure fails the stability requirement (possible split support)."""

    def __init__(self, msg: str, margin: float):
        super().__init__(msg)
        self.margin = margin
        self.split_detected = True


@dataclass(frozen=True)
class ModelParams:
    N: int
    q: float
    lam: float
    s: float = 0.0
    tau: float = 0.01
    E0: float = 5.0
    varpi: float = 0.05
    epsilon: float = 0.01

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be positive")
        if not 1 <= self.q <= math.sqrt(self.N) * (1 + 1e-12):
            raise ValueError(f"q={self.q} must satisfy 1 <= q <= sqrt(N)")
        if self.lam < 0 or self.s < 0:
            raise ValueError("lambda and s must be nonnegative")
        if not 0 < self.tau < 1:
            raise ValueError("tau must lie in (0, 1)")
        if self.s > 0 and not self.N ** self.tau < self.q ** (20.0 / 9.0):
            raise ValueError("sparsity too strong: need N^tau < q^(20/9)")
        if not self.E0 > 3 + self.lam:
            raise ValueError("spectral window E0 must exceed 3 + lambda")

    @property
    def a(self) -> float:
        """Sparsity correction s / q^2."""
        return self.s / self.q ** 2


@dataclass(frozen=True)
class SpectralDomain:
    E: np.ndarray
    eta: np.ndarray

    @classmethod
    def build(cls, params: ModelParams, E: Sequence[float], eta: Sequence[float]) -> "SpectralDomain":
        E = np.asarray(E, dtype=float)
        eta = np.asarray(eta, dtype=float)
        lo = params.N ** (-1.0 + params.tau)
        if np.any(np.abs(E) > params.E0):
            raise ValueError("energy outside [-E0, E0]")
        if np.any(eta < lo * (1 - 1e-12)) or np.any(eta > 1.0 / params.tau):
            raise ValueError(f"eta must lie in [N^(-1+tau), 1/tau] = [{lo:.3g}, {1 / params.tau:g}]")
        return cls(E, eta)

    @property
    def points(self) -> np.ndarray:
        return (self.E[:, None] + 1j * self.eta[None, :]).ravel()


@dataclass(frozen=True)
class SolverConfig:
    tol: float = 1e-12
    damping: float = 0.5
    max_iter: int = 10000
    eta_ladder: tuple[float, ...] = tuple(10.0 ** (-k / 2.0) for k in range(0, 19))
    picard_tol: float = 1e-6
    max_refine: int = 4

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if not 0 < self.damping <= 1:
            raise ValueError("damping must lie in (0, 1]")
        lad = np.asarray(self.eta_ladder, dtype=float)
        if lad.size == 0 or np.any(np.diff(lad) >= 0) or np.any(lad <= 0):
            raise ValueError("eta ladder must be positive and strictly decreasing")


def m_semicircle(z):
    """Stieltjes transform of the semicircle law, branch m ~ -1/z at infinity."""
    z = np.asarray(z, dtype=complex)
    m = (-z + np.sqrt(z - 2) * np.sqrt(z + 2)) / 2
    return complex(m) if m.ndim == 0 else m


# -- generic vectorized solver ----------------------------------------------

# A kernel maps (m, z) -> (F(m, z), dF/dm) for the equation m = F(m, z).
Kernel = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


def _chunked(fn, m, z, n_atoms):
    step = max(1, 2_000_000 // max(n_atoms, 1))
    if m.size <= step:
        return fn(m, z)
    F = np.empty_like(m)
    D = np.empty_like(m)
    for i in range(0, m.size, step):
        F[i:i + step], D[i:i + step] = fn(m[i:i + step], z[i:i + step])
    return F, D


def _standard_kernel(x: np.ndarray, w: np.ndarray) -> Kernel:
    def k(m, z):
        d = x[None, :] - (z + m)[:, None]
        inv = 1.0 / d
        return inv @ w, (inv * inv) @ w
    return lambda m, z: _chunked(k, m, z, x.size)


def _refined_kernel(x: np.ndarray, w: np.ndarray, a: float) -> Kernel:
    def k(m, z):
        d = x[None, :] - (z + m)[:, None]
        d2 = d * d
        den = 1.0 / (d2 - a)
        return (d * den) @ w, ((d2 + a) * den * den) @ w
    return lambda m, z: _chunked(k, m, z, x.size)


def _newton(kernel: Kernel, m: np.ndarray, z: np.ndarray, cfg: SolverConfig, picard: bool = False):
    """Guarded Newton, optionally preceded by damped Picard; returns (m, residual)."""
    m = m.copy()
    F, _ = kernel(m, z)
    res = np.abs(m - F)
    for _ in range(min(cfg.max_iter, 500) if picard else 0):
        act = res > cfg.picard_tol
        if not act.any():
            break
        mn = (1 - cfg.damping) * m[act] + cfg.damping * F[act]
        mn = np.where(mn.imag > 0, mn, mn.real + 1j * np.maximum(np.abs(mn.imag), 1e-300))
        m[act] = mn
        Fa, _ = kernel(m[act], z[act])
        F[act] = Fa
        r_new = np.abs(m[act] - Fa)
        stalled = r_new >= res[act] * (1 - 1e-9)
        res[act] = r_new
        if stalled.all():
            break
    for _ in range(cfg.max_iter):
        act = np.flatnonzero(res > cfg.tol)
        if act.size == 0:
            break
        ma, za = m[act], z[act]
        Fa, Da = kernel(ma, za)
        g = ma - Fa
        step = g / (1.0 - Da)
        t = np.ones(act.size)
        best_m = ma.copy()
        best_r = np.abs(g)
        pending = np.ones(act.size, dtype=bool)
        for _ in range(40):
            idx = np.flatnonzero(pending)
            if idx.size == 0:
                break
            cand = ma[idx] - t[idx] * step[idx]
            ok = cand.imag > 0
            r = np.full(idx.size, np.inf)
            if ok.any():
                Fc, _ = kernel(cand[ok], za[idx][ok])
                r[ok] = np.abs(cand[ok] - Fc)
            accept = r < best_r[idx]
            best_m[idx[accept]] = cand[accept]
            best_r[idx[accept]] = r[accept]
            pending[idx[accept]] = False
            t[idx[~accept]] *= 0.5
        improved = best_r < res[act]
        m[act] = best_m
        res[act] = best_r
        if not improved.any():
            break
    return m, res


def _solve(kernel: Kernel, z, cfg: SolverConfig, label: str) -> tuple[np.ndarray, np.ndarray]:
    z = np.asarray(z, dtype=complex)
    shape = z.shape
    zf = z.ravel()
    if np.any(~(zf.imag > 0)):
        raise ValueError("solver requires Im z > 0")
    eta_t = zf.imag
    ladder = list(cfg.eta_ladder)
    m = None
    prev_eta = None
    res = None
    for level in ladder + [0.0]:
        eta = np.maximum(eta_t, level)
        if prev_eta is not None and np.all(eta == prev_eta):
            continue
        zk = zf.real + 1j * eta
        if m is None:
            m0 = m_semicircle(zk)
            m, res = _newton(kernel, m0, zk, cfg, picard=True)
            prev_eta = eta
            continue
        changed = np.flatnonzero(eta != prev_eta)
        m_new, r_new = _newton(kernel, m[changed], zk[changed], cfg)
        bad = r_new > cfg.tol
        if bad.any():
            # refine the continuation between the previous and the current level
            ib = changed[bad]
            mb, rb = m_new[bad], r_new[bad]
            for depth in range(1, cfg.max_refine + 1):
                steps = np.geomspace(prev_eta[ib], eta[ib], 2 ** depth + 1)[1:]
                mb = m[ib].copy()
                for row in steps:
                    mb, rb = _newton(kernel, mb, zf.real[ib] + 1j * row, cfg)
                if np.all(rb <= cfg.tol):
                    break
            m_new[bad] = mb
            r_new[bad] = rb
        m[changed] = m_new
        res[changed] = r_new
        prev_eta = eta
    if np.any(~(res <= cfg.tol)) or np.any(~np.isfinite(m)):
        worst = int(np.nanargmax(np.where(np.isfinite(res), res, np.inf)))
        raise SolverError(f"{label}: residual {res[worst]:.3e} above tolerance {cfg.tol:g} at z={zf[worst]}",
                          residual=float(res[worst]), z=complex(zf[worst]))
    return m.reshape(shape), res.reshape(shape)


# -- laws ----------------------------------------------------------------------

@dataclass(frozen=True)
class FcSolution:
    """Solved values ``m`` on the points ``z`` with per-point residuals."""

    z: np.ndarray
    m: np.ndarray
    residual: np.ndarray
    equation: str


@dataclass(frozen=True, eq=False)
class FcLaw:
    """A self-consistent equation that can be solved at arbitrary spectral points."""

    equation: str
    nu: Measure
    lam: float
    a: float = 0.0
    cfg: SolverConfig = field(default_factory=SolverConfig)

    @classmethod
    def standard(cls, nu: Measure, lam: float, cfg: SolverConfig | None = None) -> "FcLaw":
        return cls("standard", nu, float(lam), 0.0, cfg or SolverConfig())

    @classmethod
    def refined(cls, nu_hat: Measure, params: ModelParams, cfg: SolverConfig | None = None,
                check_stability: bool = True) -> "FcLaw":
        if check_stability:
            tilde = sparsity_convolve(scale(nu_hat, params.lam), params.s, params.q)
            marg = stability_margin(tilde, 1.0)
            if marg < 1.0 + params.varpi:
                raise StabilityError(f"stability margin {marg:.4g} below 1 + varpi", marg)
        return cls("refined", nu_hat, float(params.lam), params.a, cfg or SolverConfig())

    @property
    def shifted_measure(self) -> Measure:
        """The measure whose plain law at unit coupling equals this law."""
        base = scale(self.nu, self.lam)
        if self.a == 0:
            return base
        return sparsity_convolve(base, self.a, 1.0)

    def _kernel(self) -> Kernel:
        x = self.lam * self.nu.x
        if self.equation == "refined" and self.a > 0:
            return _refined_kernel(x, self.nu.w, self.a)
        return _standard_kernel(x, self.nu.w)

    def solve(self, z) -> FcSolution:
        m, res = _solve(self._kernel(), z, self.cfg, self.equation)
        return FcSolution(np.asarray(z, dtype=complex), m, res, self.equation)

    def __call__(self, z):
        return self.solve(z).m


def solve_mfc(nu: Measure, lam: float, z, cfg: SolverConfig | None = None) -> FcSolution:
    """Solve the deformed semicircle equation at the points ``z``."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    return FcLaw.standard(nu, lam, cfg).solve(z)


def solve_refined(nu_hat: Measure, params: ModelParams, z, cfg: SolverConfig | None = None) -> FcSolution:
    """Solve the sparsity-refined equation at ``z`` (stability is checked first)."""
    return FcLaw.refined(nu_hat, params, cfg).solve(z)


@dataclass(frozen=True)
class VectorSolution:
    """Per-index values M_i of the vector equation and their mean."""

    M: np.ndarray
    mean: complex


def vector_M(V, params: ModelParams, m_tilde: complex, z: complex) -> VectorSolution:
    """M_i = 1 / (d_i - a/d_i) with d_i = lam V_i - z - m_tilde."""
    V = np.asarray(V, dtype=float)
    d = params.lam * V - z - m_tilde
    with np.errstate(divide="ignore", invalid="ignore"):
        den = d - params.a / d
    if np.any(np.abs(d) < 1e-14) or np.any(np.abs(den) < 1e-14):
        raise ZeroDivisionError("vector equation denominator vanishes")
    M = 1.0 / den
    return VectorSolution(M, complex(M.mean()))


def sparse_quartic(params: "ModelParams | float", z, steps: int = 60):
    """Root of 1 + z m + m^2 + a m^4 = 0 (a = s/q^2) continued from m ~ -1/z at large Im z."""
    a = params.a if isinstance(params, ModelParams) else float(params)
    z = np.asarray(z, dtype=complex)
    zf = z.ravel()
    if np.any(~(zf.imag > 0)):
        raise ValueError("need Im z > 0")
    if a < 0:
        raise ValueError("a must be >= 0")
    if a == 0:
        return m_semicircle(z)
    eta_t = zf.imag
    start = np.maximum(10.0, eta_t)
    prev = None
    for frac in np.linspace(0.0, 1.0, steps + 1):
        eta = start * (eta_t / start) ** frac
        zk = zf.real + 1j * eta
        comp = np.zeros((zf.size, 4, 4), dtype=complex)
        # companion of m^4 + m^2/a + z/a m + 1/a
        comp[:, 0, :] = -np.stack([np.zeros_like(zk), np.full_like(zk, 1 / a), zk / a, np.full_like(zk, 1 / a)], axis=1)
        comp[:, 1, 0] = comp[:, 2, 1] = comp[:, 3, 2] = 1.0
        roots = np.linalg.eigvals(comp)
        target = -1.0 / zk if prev is None else prev
        pick = np.argmin(np.abs(roots - target[:, None]), axis=1)
        prev = roots[np.arange(zf.size), pick]
    m = prev
    for _ in range(3):
        g = 1 + zf * m + m ** 2 + a * m ** 4
        m = m - g / (zf + 2 * m + 4 * a * m ** 3)
    return m.reshape(z.shape) if z.ndim else complex(m[0])


def quartic_edge(a: float) -> float:
    """Right edge of the quartic law: double root of 1 + L m + m^2 + a m^4."""
    if a == 0:
        return 2.0
    m2 = (-1.0 + math.sqrt(1.0 + 12.0 * a)) / (6.0 * a)
    m = -math.sqrt(m2)
    return -2.0 * m - 4.0 * a * m ** 3


def invert_density(law: FcLaw, E_grid, eta_small: float = 1e-9, richardson: bool = False) -> np.ndarray:
    """rho(E) ~ Im m(E + i eta_small) / pi, clipped at 0; optional Richardson step in eta."""
    if not eta_small > 0:
        raise ValueError("eta_small must be positive")
    E = np.asarray(E_grid, dtype=float)
    rho = np.imag(law(E + 1j * eta_small)) / math.pi
    if richardson:
        rho2 = np.imag(law(E + 2j * eta_small)) / math.pi
        rho = 2 * rho - rho2
    return np.maximum(rho, 0.0)


# -- edges -----------------------------------------------------------------------

@dataclass(frozen=True)
class EdgeData:
    L_minus: float
    L_plus: float
    zeta_minus: float
    zeta_plus: float
    m_minus: float
    m_plus: float
    margin: float
    split_detected: bool = False

    @property
    def m_at_edge_plus(self) -> float:
        return self.m_plus

    def to_json(self) -> dict:
        d = {k: getattr(self, k) for k in ("L_minus", "L_plus", "zeta_minus", "zeta_plus")}
        d["m_at_edge_plus"] = self.m_plus
        d["m_at_edge_minus"] = self.m_minus
        d["margin"] = self.margin if math.isfinite(self.margin) else "inf"
        d["split_detected"] = self.split_detected
        return d


def find_edges(mu: Measure, varpi: float = 0.05, xtol: float = 1e-12) -> EdgeData:
    """Edges of the unit-coupling law of ``mu`` via int dmu / (u - zeta)^2 = 1.

    With zeta_pm the outer solutions, L_pm = zeta_pm - m_mu(zeta_pm) and the
    solved Stieltjes value at the edge is zeta_pm - L_pm = m_mu(zeta_pm).
    """
    marg = stability_margin(mu, 1.0)
    if marg < 1.0 + varpi:
        raise StabilityError(f"stability margin {marg:.4g} below 1 + varpi={1 + varpi:g}; support may split", marg)
    lo, hi = mu.hull.lo, mu.hull.hi
    h = lambda t: float(stieltjes_derivative(mu, np.array(t), 2).real) - 1.0

    def outer(edge: float, sign: float) -> float:
        eps = 1e-13 * max(1.0, abs(edge))
        near = edge + sign * eps
        far = edge + sign * 10.0
        if h(near) <= 0:
            raise StabilityError("edge equation has no root outside the hull", marg)
        while h(far) > 0:
            far = edge + sign * 2 * abs(far - edge)
        a, b = (near, far) if sign > 0 else (far, near)
        return optimize.brentq(h, a, b, xtol=xtol, rtol=4 * np.finfo(float).eps, maxiter=500)

    zp = outer(hi, +1.0)
    zm = outer(lo, -1.0)
    mp = float(_stieltjes_any(mu, np.array([zp]))[0].real)
    mm = float(_stieltjes_any(mu, np.array([zm]))[0].real)
    return EdgeData(zm - mm, zp - mp, zm, zp, mm, mp, marg)


def edge_expansion(m1: float, m2: float, m3: float, m4: float) -> float:
    """Fourth-order small-coupling expansion of the right edge in the moments of the shifted measure."""
    return 2.0 + m1 + m2 + m3 + (m4 - 9.0 * m2 ** 2 / 4.0)


def edge_expansion_of(mu: Measure) -> float:
    return edge_expansion(*(moment(mu, k) for k in (1, 2, 3, 4)))


@dataclass(frozen=True, eq=False)
class IntegratedDensity:
    """n(E) = int_{-inf}^E rho for a single-interval law, tabulated on E(theta)."""

    L_minus: float
    L_plus: float
    theta: np.ndarray
    F: np.ndarray
    total_mass: float

    @cached_property
    def _spline(self):
        return interpolate.PchipInterpolator(self.theta, self.F)

    def _energy(self, th):
        return 0.5 * (self.L_minus + self.L_plus) - 0.5 * (self.L_plus - self.L_minus) * np.cos(th)

    def __call__(self, E):
        E = np.asarray(E, dtype=float)
        c = np.clip((0.5 * (self.L_minus + self.L_plus) - E) / (0.5 * (self.L_plus - self.L_minus)), -1.0, 1.0)
        th = np.arccos(c)
        out = np.clip(self._spline(th), 0.0, 1.0)
        out = np.where(E <= self.L_minus, 0.0, np.where(E >= self.L_plus, 1.0, out))
        return float(out) if out.ndim == 0 else out

    def quantile(self, levels) -> np.ndarray:
        levels = np.asarray(levels, dtype=float)
        lo = np.zeros(levels.shape)
        hi = np.full(levels.shape, math.pi)
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            ge = self._spline(mid) >= levels
            hi = np.where(ge, mid, hi)
            lo = np.where(ge, lo, mid)
        return self._energy(0.5 * (lo + hi))


def integrated_density(edges: EdgeData, law: FcLaw, n_grid: int = 801, eta_small: float = 1e-9) -> IntegratedDensity:
    """Cumulative density on a grid E(theta) = centre - half_width cos(theta).

    The square-root vanishing at both edges becomes smooth in theta, so a
    cumulative Simpson rule converges quickly.
    """
    L0, L1 = edges.L_minus, edges.L_plus
    theta = np.linspace(0.0, math.pi, n_grid)
    E = 0.5 * (L0 + L1) - 0.5 * (L1 - L0) * np.cos(theta)
    rho = np.zeros_like(E)
    rho[1:-1] = invert_density(law, E[1:-1], eta_small)
    integrand = rho * 0.5 * (L1 - L0) * np.sin(theta)
    F = integrate.cumulative_simpson(integrand, x=theta, initial=0.0)
    if np.any(np.diff(F) < -1e-9):
        raise SolverError("integrated density is not monotone")
    F = np.maximum.accumulate(F)
    total = float(F[-1])
    if not abs(total - 1.0) < 1e-3:
        raise SolverError(f"density integrates to {total:.6f}, not 1; grid too coarse or support split")
    return IntegratedDensity(L0, L1, theta, F / total, total)


def classical_locations(edges: EdgeData, law: FcLaw, N: int, n_grid: int = 801,
                        eta_small: float = 1e-9, dos: IntegratedDensity | None = None) -> np.ndarray:
    """gamma_1 <= ... <= gamma_N with int_{-inf}^{gamma_i} rho = i / N (so gamma_N = L+)."""
    dos = dos or integrated_density(edges, law, n_grid, eta_small)
    gam = dos.quantile(np.arange(1, N + 1) / N)
    if np.any(np.diff(gam) < -1e-12):
        raise SolverError("classical locations are not monotone")
    return gam


# -- envelopes ---------------------------------------------------------------------

def _kappa(E, edges: EdgeData):
    E = np.asarray(E, dtype=float)
    return np.minimum(np.abs(E - edges.L_minus), np.abs(E - edges.L_plus))


def local_law_envelope(z, params: ModelParams, edges: EdgeData):
    """Averaged local-law envelope min{q^-3/2 + N^-1/4 q^-1/2, q^-2 / sqrt(kappa + eta)} + 1/(N eta)."""
    z = np.asarray(z, dtype=complex)
    N, q = params.N, params.q
    kappa = _kappa(z.real, edges)
    eta = z.imag
    first = q ** -1.5 + N ** -0.25 * q ** -0.5
    second = q ** -2 / np.sqrt(kappa + eta)
    return np.minimum(first, second) + 1.0 / (N * eta)


def entrywise_envelope(z, params: ModelParams, im_m):
    """1/q + sqrt(Im m / (N eta)) + 1/(N eta)."""
    z = np.asarray(z, dtype=complex)
    eta = z.imag
    N = params.N
    return 1.0 / params.q + np.sqrt(np.asarray(im_m) / (N * eta)) + 1.0 / (N * eta)


def psi_b(z, b: float, params: ModelParams, im_M, vartheta: float | None = None):
    """q^-b + N^-1/4 q^-1/2 + sqrt((Im <M> + vartheta) / (N eta)); vartheta defaults to 1/N."""
    z = np.asarray(z, dtype=complex)
    N, q = params.N, params.q
    th = 1.0 / N if vartheta is None else vartheta
    return q ** -b + N ** -0.25 * q ** -0.5 + np.sqrt((np.asarray(im_M) + th) / (N * z.imag))


def subordination_check(m, z, mu: Measure) -> np.ndarray:
    """|m - m_mu(z + m)| for a candidate solution of the unit-coupling law of ``mu``."""
    m = np.asarray(m, dtype=complex)
    z = np.asarray(z, dtype=complex)
    return np.abs(m - _stieltjes_any(mu, z + m))
