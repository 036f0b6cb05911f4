"""Compactly supported probability measures on the real line.

Two representations are used:

* ``discrete``: finitely many atoms with nonnegative weights (empirical
  spectral distributions, two-point laws, sparsity-shifted atoms).
* ``gridded-density``: a finite mixture of affine images of one centred
  Jacobi law ``Z^-1 (1+v)^a (1-v)^b`` on ``[-1, 1]``.  The mixture structure
  is closed under scaling and under the symmetric two-point shift used by the
  sparsity refinement, so CDFs, quantiles and endpoint integrals stay exact.
  Integrals of smooth functions use Gauss-Jacobi nodes of every component,
  exposed as ``grid`` / ``density`` / ``quad_weights``.
"""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np
from scipy import special

__all__ = [
    "SupportHull",
    "JacobiMixture",
    "Measure",
    "discrete",
    "make_two_atom",
    "make_jacobi",
    "make_uniform",
    "delta",
    "empirical",
    "moment",
    "stieltjes_measure",
    "stieltjes_derivative",
    "scale",
    "sparsity_convolve",
    "stability_margin",
    "cdf",
    "quantile",
    "deterministic_potential",
    "MASS_TOL",
    "MARGIN_CAP",
]

MASS_TOL = 1e-12
MARGIN_CAP = 1e12


def _frozen(a) -> np.ndarray:
    a = np.array(a, dtype=float)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class SupportHull:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo <= self.hi:
            raise ValueError(f"hull requires lo <= hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo


@dataclass(frozen=True)
class JacobiMixture:
    """sum_k weight_k * (law of shift_k + scale_k * (V - centre)), V ~ Jacobi(a, b)."""

    a: float
    b: float
    weights: tuple[float, ...]
    scales: tuple[float, ...]
    shifts: tuple[float, ...]
    nodes_per_component: int

    @property
    def centre(self) -> float:
        # mean of the Jacobi law on [-1, 1]
        return (self.a - self.b) / (self.a + self.b + 2.0)

    @cached_property
    def _norm(self) -> float:
        # log of Z = 2^(a+b+1) B(a+1, b+1)
        return (self.a + self.b + 1.0) * math.log(2.0) + special.betaln(self.a + 1.0, self.b + 1.0)

    def base_density(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        out = np.zeros_like(v)
        inside = (v > -1.0) & (v < 1.0)
        vi = v[inside]
        out[inside] = np.exp(self.a * np.log1p(vi) + self.b * np.log1p(-vi) - self._norm)
        return out

    def base_cdf(self, v: np.ndarray) -> np.ndarray:
        t = np.clip((np.asarray(v, dtype=float) + 1.0) / 2.0, 0.0, 1.0)
        return special.betainc(self.a + 1.0, self.b + 1.0, t)

    def intervals(self) -> list[tuple[float, float]]:
        c = self.centre
        return [(t + s * (-1.0 - c), t + s * (1.0 - c)) for s, t in zip(self.scales, self.shifts)]

    def density(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        c = self.centre
        for w, s, t in zip(self.weights, self.scales, self.shifts):
            out += w * self.base_density((x - t) / s + c) / s
        return out

    def cdf(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros_like(x)
        c = self.centre
        for w, s, t in zip(self.weights, self.scales, self.shifts):
            out += w * self.base_cdf((x - t) / s + c)
        return out

    @cached_property
    def base_rule(self) -> tuple[np.ndarray, np.ndarray]:
        # scipy's Jacobi weight is (1-x)^alpha (1+x)^beta
        v, wq = special.roots_jacobi(self.nodes_per_component, self.b, self.a)
        return v, wq / wq.sum()

    def with_components(self, weights, scales, shifts) -> "JacobiMixture":
        return JacobiMixture(self.a, self.b, tuple(map(float, weights)), tuple(map(float, scales)),
                             tuple(map(float, shifts)), self.nodes_per_component)


@dataclass(frozen=True, eq=False)
class Measure:
    """A probability measure: weighted nodes plus, for densities, the mixture law.

    ``x`` and ``w`` are the atoms (discrete) or the quadrature nodes and node
    masses (gridded); every integral in the package is ``sum(w * f(x))``.
    """

    kind: str
    x: np.ndarray
    w: np.ndarray
    hull: SupportHull
    mixture: JacobiMixture | None = None

    def __post_init__(self):
        if self.kind not in ("discrete", "gridded-density"):
            raise ValueError(f"unknown measure kind {self.kind!r}")
        if self.x.shape != self.w.shape or self.x.ndim != 1 or self.x.size == 0:
            raise ValueError("nodes and weights must be nonempty 1-d arrays of equal length")
        if np.any(self.w < 0):
            raise ValueError("weights must be nonnegative")
        if abs(self.w.sum() - 1.0) > MASS_TOL:
            raise ValueError(f"total mass {self.w.sum()!r} differs from 1")
        if self.x.size > 1 and np.any(np.diff(self.x) <= 0):
            raise ValueError("nodes must be strictly increasing")
        if self.x[0] < self.hull.lo - 1e-12 or self.x[-1] > self.hull.hi + 1e-12:
            raise ValueError("nodes outside hull")
        if self.kind == "gridded-density" and self.mixture is None:
            raise ValueError("gridded-density measure needs its mixture law")

    @property
    def atoms(self) -> list[tuple[float, float]]:
        return list(zip(self.x.tolist(), self.w.tolist()))

    @property
    def grid(self) -> np.ndarray:
        return self.x

    @cached_property
    def density(self) -> np.ndarray | None:
        if self.mixture is None:
            return None
        return _frozen(self.mixture.density(self.x))

    @cached_property
    def quad_weights(self) -> np.ndarray | None:
        if self.mixture is None:
            return None
        return _frozen(self.w / self.density)

    @cached_property
    def fingerprint(self) -> str:
        h = hashlib.sha1()
        h.update(self.kind.encode())
        h.update(self.x.tobytes())
        h.update(self.w.tobytes())
        if self.mixture is not None:
            h.update(repr(self.mixture).encode())
        return h.hexdigest()

    def mean(self) -> float:
        return moment(self, 1)

    def to_json(self) -> dict:
        d: dict = {"kind": self.kind, "hull": [self.hull.lo, self.hull.hi]}
        if self.kind == "discrete":
            d["atoms"] = [[float(x), float(w)] for x, w in zip(self.x, self.w)]
        else:
            m = self.mixture
            d["grid"] = self.x.tolist()
            d["density"] = self.density.tolist()
            d["quad_weights"] = self.quad_weights.tolist()
            d["jacobi"] = {"a": m.a, "b": m.b, "nodes_per_component": m.nodes_per_component,
                           "components": [[w, s, t] for w, s, t in zip(m.weights, m.scales, m.shifts)]}
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Measure":
        if d["kind"] == "discrete":
            arr = np.asarray(d["atoms"], dtype=float).reshape(-1, 2)
            return discrete(arr[:, 0], arr[:, 1])
        if d["kind"] == "gridded-density":
            j = d["jacobi"]
            comps = np.asarray(j["components"], dtype=float).reshape(-1, 3)
            mix = JacobiMixture(float(j["a"]), float(j["b"]), tuple(comps[:, 0].tolist()),
                                tuple(comps[:, 1].tolist()), tuple(comps[:, 2].tolist()),
                                int(j["nodes_per_component"]))
            return _from_mixture(mix)
        raise ValueError(f"unknown measure kind {d['kind']!r}")

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        if self.kind == "discrete":
            wr.writerow(["x", "weight"])
            for x, w in zip(self.x, self.w):
                wr.writerow([repr(float(x)), repr(float(w))])
        else:
            wr.writerow(["x", "density"])
            for x, r in zip(self.x, self.density):
                wr.writerow([repr(float(x)), repr(float(r))])
        return buf.getvalue()


# -- constructors ------------------------------------------------------------

def discrete(locations: Iterable[float], weights: Iterable[float] | None = None) -> Measure:
    """Discrete measure; coincident locations are coalesced (weights add)."""
    x = np.asarray(list(locations) if not isinstance(locations, np.ndarray) else locations, dtype=float).ravel()
    if x.size == 0:
        raise ValueError("a discrete measure needs at least one atom")
    if not np.all(np.isfinite(x)):
        raise ValueError("atom locations must be finite")
    if weights is None:
        w = np.full(x.size, 1.0 / x.size)
    else:
        w = np.asarray(list(weights) if not isinstance(weights, np.ndarray) else weights, dtype=float).ravel()
        if w.shape != x.shape:
            raise ValueError("locations and weights differ in length")
    if np.any(w < 0):
        raise ValueError("weights must be nonnegative")
    total = w.sum()
    if abs(total - 1.0) > 1e-9:
        raise ValueError(f"weights sum to {total!r}, not 1")
    ux, inv = np.unique(x, return_inverse=True)
    uw = np.bincount(inv, weights=w, minlength=ux.size)
    keep = uw > 0
    ux, uw = ux[keep], uw[keep]
    uw = uw / uw.sum()
    return Measure("discrete", _frozen(ux), _frozen(uw), SupportHull(float(ux[0]), float(ux[-1])))


def delta(at: float = 0.0) -> Measure:
    return discrete([at], [1.0])


def make_two_atom(a: float) -> Measure:
    """The symmetric law (delta_{-a} + delta_{a}) / 2."""
    if not math.isfinite(a) or a < 0:
        raise ValueError("two-atom half-distance must be finite and >= 0")
    return discrete([-a, a], [0.5, 0.5])


def empirical(values: Sequence[float]) -> Measure:
    """Empirical distribution N^-1 sum delta_{v_i}."""
    v = np.asarray(values, dtype=float).ravel()
    if v.size == 0:
        raise ValueError("empirical measure of an empty list")
    return discrete(v)


def _from_mixture(mix: JacobiMixture) -> Measure:
    v, wq = mix.base_rule
    c = mix.centre
    xs, ws = [], []
    for w, s, t in zip(mix.weights, mix.scales, mix.shifts):
        xs.append(t + s * (v - c))
        ws.append(w * wq)
    x = np.concatenate(xs)
    w = np.concatenate(ws)
    order = np.argsort(x, kind="stable")
    x, w = x[order], w[order]
    ux, inv = np.unique(x, return_inverse=True)
    uw = np.bincount(inv, weights=w, minlength=ux.size)
    uw = uw / uw.sum()
    ivs = mix.intervals()
    hull = SupportHull(min(lo for lo, _ in ivs), max(hi for _, hi in ivs))
    return Measure("gridded-density", _frozen(ux), _frozen(uw), hull, mix)


def make_jacobi(a: float, b: float, grid_size: int = 256) -> Measure:
    """Centred Jacobi law with density proportional to (1+v)^a (1-v)^b on [-1, 1].

    The law is shifted so that its mean is zero; quadrature uses ``grid_size``
    Gauss-Jacobi nodes, which integrate polynomials up to degree
    ``2*grid_size - 1`` exactly.
    """
    if not (a > -1 and b > -1):
        raise ValueError(f"Jacobi exponents must exceed -1 (got a={a}, b={b}); density not normalizable")
    if grid_size < 64:
        raise ValueError("grid_size must be at least 64")
    c = (a - b) / (a + b + 2.0)
    mix = JacobiMixture(float(a), float(b), (1.0,), (1.0,), (0.0,), int(grid_size))
    assert mix.centre == c
    return _from_mixture(mix)


def make_uniform(grid_size: int = 256) -> Measure:
    """Uniform law on [-1, 1]."""
    return make_jacobi(0.0, 0.0, grid_size)


# -- calculus ----------------------------------------------------------------

def moment(mu: Measure, k: int) -> float:
    if k < 0:
        raise ValueError("moment order must be >= 0")
    return float(np.dot(mu.w, mu.x ** k))


def _require_upper(z) -> np.ndarray:
    z = np.asarray(z, dtype=complex)
    if np.any(~(z.imag > 0)):
        raise ValueError("Stieltjes transform needs Im z > 0")
    return z


def stieltjes_measure(mu: Measure, z):
    """m_mu(z) = int dmu(v) / (v - z) for Im z > 0 (scalar or array z)."""
    zz = _require_upper(z)
    out = _stieltjes_any(mu, zz)
    return complex(out) if np.ndim(z) == 0 else out


def _stieltjes_any(mu: Measure, z: np.ndarray) -> np.ndarray:
    """Stieltjes sum without the half-plane check (used for real points off the hull)."""
    z = np.asarray(z)
    flat = z.reshape(-1)
    out = np.empty(flat.shape, dtype=np.result_type(flat.dtype, float))
    step = max(1, 4_000_000 // mu.x.size)
    for i in range(0, flat.size, step):
        out[i:i + step] = (mu.w / (mu.x[None, :] - flat[i:i + step, None])).sum(axis=1)
    return out.reshape(z.shape)


def stieltjes_derivative(mu: Measure, z, power: int = 2):
    """int dmu(v) / (v - z)^power (valid for complex z or real z off the hull)."""
    z = np.asarray(z)
    flat = z.reshape(-1)
    out = np.empty(flat.shape, dtype=np.result_type(flat.dtype, float))
    step = max(1, 4_000_000 // mu.x.size)
    for i in range(0, flat.size, step):
        out[i:i + step] = (mu.w / (mu.x[None, :] - flat[i:i + step, None]) ** power).sum(axis=1)
    res = out.reshape(z.shape)
    return res.item() if res.ndim == 0 else res


def scale(mu: Measure, lam: float) -> Measure:
    """Pushforward under x -> lam * x (lam >= 0); lam = 0 gives delta_0."""
    if lam < 0:
        raise ValueError("scale factor must be >= 0")
    if lam == 0:
        return delta(0.0)
    if lam == 1:
        return mu
    if mu.kind == "discrete":
        return discrete(lam * mu.x, mu.w)
    m = mu.mixture
    return _from_mixture(m.with_components(m.weights, [lam * s for s in m.scales], [lam * t for t in m.shifts]))


def sparsity_convolve(mu_lambda: Measure, s: float, q: float) -> Measure:
    """Classical convolution with (delta_{sqrt(s)/q} + delta_{-sqrt(s)/q}) / 2."""
    if s < 0 or q <= 0:
        raise ValueError("need s >= 0 and q > 0")
    shift = math.sqrt(s) / q
    if shift == 0.0:
        return mu_lambda
    if mu_lambda.kind == "discrete":
        x = np.concatenate([mu_lambda.x - shift, mu_lambda.x + shift])
        w = np.concatenate([mu_lambda.w, mu_lambda.w]) / 2.0
        return discrete(x, w)
    m = mu_lambda.mixture
    weights = [w / 2.0 for w in m.weights for _ in (0, 1)]
    scales = [sc for sc in m.scales for _ in (0, 1)]
    shifts = [t + d for t in m.shifts for d in (-shift, shift)]
    return _from_mixture(m.with_components(weights, scales, shifts))


# -- stability margin --------------------------------------------------------

_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


def _inv_sq_sum(x: np.ndarray, w: np.ndarray, pts: np.ndarray) -> np.ndarray:
    out = np.empty(pts.shape)
    step = max(1, 4_000_000 // x.size)
    for i in range(0, pts.size, step):
        d = x[None, :] - pts[i:i + step, None]
        with np.errstate(divide="ignore", over="ignore"):
            out[i:i + step] = (w / (d * d)).sum(axis=1)
    return out


def _golden_min(f, lo: np.ndarray, hi: np.ndarray, xtol: float) -> np.ndarray:
    """Vectorized golden-section minimum of convex functions on (lo_k, hi_k)."""
    a, b = lo.copy(), hi.copy()
    c = b - _GOLD * (b - a)
    d = a + _GOLD * (b - a)
    fc, fd = f(c), f(d)
    n_iter = int(math.ceil(math.log(max(xtol, 1e-300) / max(float(np.max(b - a)), xtol)) / math.log(_GOLD))) + 1
    for _ in range(max(n_iter, 1)):
        left = fc < fd
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        d_new = np.where(left, c, a + _GOLD * (b - a))
        c_new = np.where(left, b - _GOLD * (b - a), d)
        fd_new = np.where(left, fc, np.nan)
        fc_new = np.where(left, np.nan, fd)
        need_c = left
        need_d = ~left
        if np.any(need_c):
            fc_new[need_c] = f(c_new[need_c])
        if np.any(need_d):
            fd_new[need_d] = f(d_new[need_d])
        c, d, fc, fd = c_new, d_new, fc_new, fd_new
    return np.minimum(fc, fd)


def _margin_discrete(mu: Measure, xtol: float) -> float:
    x, w = mu.x, mu.w
    if x.size == 1:
        return math.inf
    gap = np.diff(x)
    ca, cb = np.cbrt(w[:-1]), np.cbrt(w[1:])
    with np.errstate(divide="ignore", over="ignore"):
        lower = (ca + cb) ** 3 / gap ** 2
    argmin = x[:-1] + gap * ca / (ca + cb)
    order = np.argsort(lower)
    probe = order[: min(32, order.size)]
    best = float(np.min(_inv_sq_sum(x, w, argmin[probe])))
    cand = np.flatnonzero(lower < best)
    if cand.size:
        f = lambda p: _inv_sq_sum(x, w, p)
        vals = _golden_min(f, x[cand] + 1e-15 * gap[cand], x[cand + 1] - 1e-15 * gap[cand], xtol)
        best = min(best, float(np.min(vals)))
    return best


def _margin_gridded(mu: Measure, xtol: float) -> float:
    mix = mu.mixture
    ivs = mix.intervals()
    # union of component supports
    order = sorted(range(len(ivs)), key=lambda k: ivs[k][0])
    unions: list[list[float]] = []
    for k in order:
        lo, hi = ivs[k]
        if unions and lo <= unions[-1][1]:
            unions[-1][1] = max(unions[-1][1], hi)
        else:
            unions.append([lo, hi])
    base_v, base_w = mix.base_rule
    c = mix.centre
    a, b = mix.a, mix.b
    lnB = special.betaln(a + 1, b + 1)
    cands: list[float] = []

    def endpoint_value(x0: float) -> float:
        total = 0.0
        for wk, sk, tk, (lo, hi) in zip(mix.weights, mix.scales, mix.shifts, ivs):
            tol = 1e-12 * max(1.0, abs(x0))
            if abs(x0 - hi) <= tol:
                if b <= 1:
                    return math.inf
                total += wk / sk ** 2 * math.exp(special.betaln(a + 1, b - 1) - lnB) / 4.0
            elif abs(x0 - lo) <= tol:
                if a <= 1:
                    return math.inf
                total += wk / sk ** 2 * math.exp(special.betaln(a - 1, b + 1) - lnB) / 4.0
            elif lo < x0 < hi:
                return math.inf
            else:
                nodes = tk + sk * (base_v - c)
                total += wk * float(np.sum(base_w / (nodes - x0) ** 2))
        return total

    for lo, hi in unions:
        cands.append(endpoint_value(lo))
        cands.append(endpoint_value(hi))
    if len(unions) > 1:
        lo = np.array([u[1] for u in unions[:-1]])
        hi = np.array([u[0] for u in unions[1:]])
        f = lambda p: _inv_sq_sum(mu.x, mu.w, p)
        g = hi - lo
        cands.extend(_golden_min(f, lo + 1e-9 * g, hi - 1e-9 * g, xtol).tolist())
    return min(cands)


def stability_margin(mu: Measure, lam: float, xtol: float = 1e-10) -> float:
    """inf over the hull of lam^-2 int dmu(v) / (v - x)^2; math.inf if divergent or above MARGIN_CAP."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")
    if lam == 0:
        return math.inf
    raw = _margin_discrete(mu, xtol) if mu.kind == "discrete" else _margin_gridded(mu, xtol)
    val = raw / lam ** 2
    return math.inf if not math.isfinite(val) or val > MARGIN_CAP else float(val)


# -- distribution function ---------------------------------------------------

def cdf(mu: Measure, x):
    """mu((-inf, x]), right-continuous."""
    xx = np.asarray(x, dtype=float)
    if mu.kind == "discrete":
        cw = np.cumsum(mu.w)
        idx = np.searchsorted(mu.x, xx, side="right")
        out = np.where(idx > 0, cw[np.maximum(idx - 1, 0)], 0.0)
        out = np.minimum(out, 1.0)
    else:
        out = np.clip(mu.mixture.cdf(xx), 0.0, 1.0)
    return float(out) if np.ndim(x) == 0 else out


def quantile(mu: Measure, p):
    """Left-continuous generalized inverse inf{x : cdf(x) >= p}."""
    pp = np.asarray(p, dtype=float)
    if np.any((pp < 0) | (pp > 1)) or np.any(np.isnan(pp)):
        raise ValueError("quantile level must lie in [0, 1]")
    if mu.kind == "discrete":
        cw = np.cumsum(mu.w)
        idx = np.searchsorted(cw, pp - 1e-14, side="left")
        out = mu.x[np.minimum(idx, mu.x.size - 1)]
    else:
        mix = mu.mixture
        if len(mix.weights) == 1:
            s, t = mix.scales[0], mix.shifts[0]
            v = 2.0 * special.betaincinv(mix.a + 1.0, mix.b + 1.0, pp) - 1.0
            out = t + s * (v - mix.centre)
        else:
            lo = np.full(pp.shape, mu.hull.lo)
            hi = np.full(pp.shape, mu.hull.hi)
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                ge = mix.cdf(mid) >= pp
                hi = np.where(ge, mid, hi)
                lo = np.where(ge, lo, mid)
            out = hi
        out = np.clip(out, mu.hull.lo, mu.hull.hi)
    return float(out) if np.ndim(p) == 0 else np.asarray(out, dtype=float)


def deterministic_potential(mu: Measure, N: int) -> np.ndarray:
    """V_i = quantile((i - 1/2) / N), i = 1..N, ascending."""
    if N < 1:
        raise ValueError("N must be >= 1")
    return np.asarray(quantile(mu, (np.arange(1, N + 1) - 0.5) / N), dtype=float)
