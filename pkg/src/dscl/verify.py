"""Monte Carlo experiments confronting sampled spectra with the deterministic laws.

Every gate compares a measured quantity with ``N**epsilon`` times an envelope.
"With high probability" is operationalized as: a replica passes when its
ratio is at most 1, and the experiment passes when at most
``violation_tol`` of the replicas fail.  Replicas whose realized potential
fails the typicality assertions (stability margins and the Stieltjes
distance on an off-support contour) are excluded and counted.
"""
from __future__ import annotations

import csv
import io
import json
import math
import os
import platform
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Sequence

import numpy as np
import scipy
from scipy import stats

from . import __version__
from . import dsclaw as D
from . import ensemble as En
from . import measure as Ms

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "Check",
    "Report",
    "EXPERIMENTS",
    "ACCEPTANCE",
    "build_measure",
    "ks_statistic",
    "ad_statistic",
    "ks_critical",
    "run_experiment",
    "run_local_law",
    "run_entrywise",
    "run_rigidity",
    "run_dos",
    "run_edge_bound",
    "run_edge_clt",
    "run_endpoint_clt",
    "run_delocalization",
    "run_p_diag",
    "resolve_workers",
]


class ConfigError(ValueError):
    """Invalid or inadmissible experiment configuration."""


# -- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "local-law"
    N_list: tuple[int, ...] = (1000,)
    phi: float = 1.0 / 3.0
    lam: float = 0.5
    nu: dict = field(default_factory=lambda: {"kind": "uniform"})
    law: str = "bernoulli-rademacher"
    replicas: int = 20
    epsilon: float = 0.1
    master_seed: int = 20240601
    potential: str = "random"
    tau: float = 0.01
    varpi: float = 0.05
    c4: float = 0.1
    violation_tol: float = 0.05
    n_E: int = 10
    n_eta: int = 10
    E_pad: float = 0.5
    eta_max: float = 1.0
    n_pairs: int = 200
    index_frac: float = 0.99
    n_dos: int = 200
    n_bulk_E: int = 10
    bulk_eta: tuple[float, ...] = ()
    separation: float = 1.0
    xi_C: float = 10.0
    xi_exponent: float = 0.4
    xi_contour: tuple[float, float, float, int] = (-3.0, 3.0, 1.0, 61)
    workers: int | None = None

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise ConfigError(f"unknown experiment {self.experiment!r}; choose from {sorted(EXPERIMENTS)}")
        if not self.N_list or any(int(n) < 2 for n in self.N_list):
            raise ConfigError("N_list must contain sizes >= 2")
        if not 0 < self.phi <= 0.5:
            raise ConfigError("phi must lie in (0, 1/2]")
        if self.replicas < 1:
            raise ConfigError("need at least one replica")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")
        if self.lam < 0:
            raise ConfigError("lambda must be >= 0")
        if self.potential not in ("random", "deterministic"):
            raise ConfigError("potential must be 'random' or 'deterministic'")
        if self.law not in En.LAWS:
            raise ConfigError(f"unknown entry law {self.law!r}")
        build_measure(self.nu)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        kw = dict(d)
        for k in ("N_list", "bulk_eta", "xi_contour"):
            if k in kw and kw[k] is not None:
                kw[k] = tuple(kw[k])
        if "N_list" in kw:
            kw["N_list"] = tuple(int(n) for n in kw["N_list"])
        try:
            return cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("N_list", "bulk_eta", "xi_contour"):
            d[k] = list(d[k])
        return d

    def q(self, N: int) -> float:
        return float(N) ** self.phi


def build_measure(spec: dict) -> Ms.Measure:
    """Measure from a small JSON-able spec such as {"kind": "jacobi", "a": 1, "b": 2}."""
    if not isinstance(spec, dict) or "kind" not in spec:
        raise ConfigError(f"measure spec must be an object with a 'kind' key, got {spec!r}")
    kind = spec["kind"]
    allowed = {"uniform": {"grid_size"}, "jacobi": {"a", "b", "grid_size"}, "two_atom": {"a"},
               "delta": {"at"}, "discrete": {"atoms"}}
    if kind not in allowed:
        raise ConfigError(f"unknown measure kind {kind!r}")
    extra = set(spec) - {"kind"} - allowed[kind]
    if extra:
        raise ConfigError(f"unknown keys for measure {kind!r}: {sorted(extra)}")
    try:
        if kind == "uniform":
            return Ms.make_uniform(int(spec.get("grid_size", 256)))
        if kind == "jacobi":
            return Ms.make_jacobi(float(spec["a"]), float(spec["b"]), int(spec.get("grid_size", 256)))
        if kind == "two_atom":
            return Ms.make_two_atom(float(spec.get("a", 1.0)))
        if kind == "delta":
            return Ms.delta(float(spec.get("at", 0.0)))
        arr = np.asarray(spec["atoms"], dtype=float).reshape(-1, 2)
        return Ms.discrete(arr[:, 0], arr[:, 1])
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid measure spec {spec!r}: {exc}") from exc


# -- reports -----------------------------------------------------------------

def _num(x):
    if x is None:
        return None
    x = float(x)
    if math.isnan(x):
        return "nan"
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return x


@dataclass
class Check:
    name: str
    measured: float
    envelope: float
    gated: bool = True
    note: str = ""

    @property
    def ratio(self) -> float:
        if self.envelope == 0:
            return 0.0 if self.measured <= 0 else math.inf
        return self.measured / self.envelope

    @property
    def passed(self) -> bool:
        return bool(self.ratio <= 1.0)

    def to_json(self) -> dict:
        return {"name": self.name, "measured": _num(self.measured), "envelope": _num(self.envelope),
                "ratio": _num(self.ratio), "pass": self.passed, "gated": self.gated, "note": self.note}


@dataclass
class Report:
    experiment: str
    config: dict
    checks: list[Check] = field(default_factory=list)
    data: dict[str, list] = field(default_factory=dict)
    provenance: dict = field(default_factory=dict)

    @property
    def verdict(self) -> bool:
        gated = [c for c in self.checks if c.gated]
        return bool(gated) and all(c.passed for c in gated)

    def check(self, name: str) -> Check:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_json(self) -> dict:
        return {"experiment": self.experiment, "verdict": "pass" if self.verdict else "fail",
                "checks": [c.to_json() for c in self.checks], "config": self.config,
                "provenance": self.provenance}

    def dumps(self) -> str:
        return json.dumps(self.to_json(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def checks_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["name", "measured", "envelope", "ratio", "pass", "gated"])
        for c in self.checks:
            w.writerow([c.name, repr(float(c.measured)), repr(float(c.envelope)), repr(float(c.ratio)),
                        int(c.passed), int(c.gated)])
        return buf.getvalue()

    def data_csv(self) -> str:
        cols = sorted(self.data)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        n = max((len(self.data[c]) for c in cols), default=0)
        for i in range(n):
            row = []
            for c in cols:
                v = self.data[c][i] if i < len(self.data[c]) else ""
                row.append(repr(float(v)) if isinstance(v, (float, np.floating)) else str(v))
            w.writerow(row)
        return buf.getvalue()

    def table(self) -> str:
        lines = [f"experiment: {self.experiment}  verdict: {'PASS' if self.verdict else 'FAIL'}"]
        lines.append(f"{'check':<44}{'measured':>14}{'envelope':>14}{'ratio':>10}  result")
        for c in self.checks:
            tag = ("pass" if c.passed else "FAIL") if c.gated else ("info" if c.passed else "info*")
            lines.append(f"{c.name:<44}{c.measured:>14.6g}{c.envelope:>14.6g}{c.ratio:>10.4g}  {tag}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: str | os.PathLike) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        stem = self.experiment
        files = [out / f"{stem}.report.json", out / f"{stem}.checks.csv", out / f"{stem}.data.csv",
                 out / f"{stem}.table.txt"]
        for path, text in zip(files, (self.dumps(), self.checks_csv(), self.data_csv(), self.table())):
            path.write_text(text, encoding="utf-8")
        return files


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"master_seed": cfg.master_seed, "replica_seeds": f"SeedSequence({cfg.master_seed}, spawn_key=(r,)), "
            f"r = 0..{cfg.replicas - 1}", "dscl": __version__, "numpy": np.__version__,
            "scipy": scipy.__version__, "python": platform.python_version()}


# -- statistics ----------------------------------------------------------------

def ks_statistic(samples: Sequence[float], cdf: Callable) -> float:
    """One-sample Kolmogorov-Smirnov distance sup |F_n - F|."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n < 20:
        raise ValueError("need at least 20 samples")
    F = np.asarray(cdf(x), dtype=float)
    i = np.arange(1, n + 1)
    return float(max(np.max(i / n - F), np.max(F - (i - 1) / n)))


def ad_statistic(samples: Sequence[float], cdf: Callable) -> float:
    """One-sample Anderson-Darling statistic A^2."""
    x = np.sort(np.asarray(samples, dtype=float))
    n = x.size
    if n < 20:
        raise ValueError("need at least 20 samples")
    F = np.clip(np.asarray(cdf(x), dtype=float), 1e-300, 1 - 1e-16)
    i = np.arange(1, n + 1)
    return float(-n - np.mean((2 * i - 1) * (np.log(F) + np.log1p(-F[::-1]))))


def ks_critical(n: int, alpha: float = 0.01) -> float:
    """Critical value of the exact one-sample KS distribution."""
    return float(stats.kstwo.ppf(1.0 - alpha, n))


# -- replica machinery ------------------------------------------------------------

def resolve_workers(workers: int | None) -> int:
    if workers is None:
        env = os.environ.get("DSCL_WORKERS")
        workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(workers))


def _pmap(fn, items: list, workers: int) -> list:
    """Ordered map; results are merged by replica index, independent of scheduling."""
    if workers <= 1 or len(items) <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as ex:
        return list(ex.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def _params(cfg: ExperimentConfig, N: int, s: float, lam: float | None = None) -> D.ModelParams:
    lam = cfg.lam if lam is None else lam
    try:
        return D.ModelParams(N=N, q=cfg.q(N), lam=lam, s=s, tau=cfg.tau, E0=max(5.0, 3.0 + lam + 1.0),
                             varpi=cfg.varpi, epsilon=cfg.epsilon)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _entry_s(cfg: ExperimentConfig, N: int) -> float:
    try:
        return En.theoretical_s(cfg.law, N, cfg.q(N), cfg.c4)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


@dataclass
class _Replica:
    index: int
    V: np.ndarray
    rng: np.random.Generator
    nu_hat: Ms.Measure
    law: D.FcLaw | None
    edges: D.EdgeData | None
    xi_ok: bool
    xi_reason: str


def _typical(cfg: ExperimentConfig, nu: Ms.Measure, nu_hat: Ms.Measure, params: D.ModelParams,
             tilde: Ms.Measure) -> tuple[bool, str]:
    N = params.N
    if cfg.lam > 0 and Ms.stability_margin(nu_hat, cfg.lam) < 1 + cfg.varpi:
        return False, "potential margin"
    if Ms.stability_margin(tilde, 1.0) < 1 + cfg.varpi:
        return False, "refined margin"
    lo, hi, eta, n = cfg.xi_contour
    z = np.linspace(lo, hi, int(n)) + 1j * eta
    dist = np.max(np.abs(Ms.stieltjes_measure(nu_hat, z) - Ms.stieltjes_measure(nu, z)))
    if dist > cfg.xi_C * N ** (-cfg.xi_exponent):
        return False, "stieltjes distance"
    return True, ""


def _prepare(cfg: ExperimentConfig, nu: Ms.Measure, params: D.ModelParams, r: int, need_law: bool = True) -> _Replica:
    rng = En.replica_rng(cfg.master_seed, r)
    V = En.sample_V(nu, params.N, cfg.potential, rng)
    nu_hat = Ms.empirical(V)
    tilde = Ms.sparsity_convolve(Ms.scale(nu_hat, params.lam), params.s, params.q)
    ok, why = _typical(cfg, nu, nu_hat, params, tilde)
    if not ok:
        return _Replica(r, V, rng, nu_hat, None, None, False, why)
    law = D.FcLaw.refined(nu_hat, params, check_stability=False) if need_law else None
    edges = D.find_edges(tilde, cfg.varpi)
    return _Replica(r, V, rng, nu_hat, law, edges, True, "")


def _z_grid(cfg: ExperimentConfig, params: D.ModelParams, edges: D.EdgeData) -> np.ndarray:
    E = np.linspace(edges.L_minus - cfg.E_pad, edges.L_plus + cfg.E_pad, cfg.n_E)
    eta = np.geomspace(params.N ** (-1.0 + params.tau), cfg.eta_max, cfg.n_eta)
    return D.SpectralDomain.build(params, E, eta).points


def _fraction_check(name: str, fails: int, total: int, tol: float, note: str = "") -> Check:
    frac = fails / total if total else 1.0
    return Check(name, frac, tol, True, note or f"{fails} of {total} replicas violate")


# -- experiments -------------------------------------------------------------------

class _Task:
    """Picklable per-replica job."""

    def __init__(self, fn, cfg: ExperimentConfig, N: int, extra: dict | None = None):
        self.fn, self.cfg, self.N, self.extra = fn, cfg, N, extra or {}

    def __call__(self, r: int):
        return self.fn(self.cfg, self.N, r, **self.extra)


def _run_replicas(fn, cfg: ExperimentConfig, N: int, **extra) -> list[dict]:
    return _pmap(_Task(fn, cfg, N, extra), list(range(cfg.replicas)), resolve_workers(cfg.workers))


def _ll_replica(cfg, N, r):
    nu = build_measure(cfg.nu)
    params = _params(cfg, N, _entry_s(cfg, N))
    rep = _prepare(cfg, nu, params, r)
    if not rep.xi_ok:
        return {"r": r, "xi": False, "why": rep.xi_reason}
    W = En.sample_W(N, params.q, cfg.law, rep.rng)
    sample = En.assemble_and_eig(W, rep.V, params.lam)
    z = _z_grid(cfg, params, rep.edges)
    m = rep.law(z)
    g = En.green_trace(sample.mu, z)
    env = N ** cfg.epsilon * D.local_law_envelope(z, params, rep.edges)
    ratio = np.abs(g - m) / env
    k = int(np.argmax(ratio))
    macro = np.abs(g - m)[np.isclose(z.imag, cfg.eta_max)]
    return {"r": r, "xi": True, "sup_ratio": float(ratio[k]), "argmax_E": float(z[k].real),
            "argmax_eta": float(z[k].imag), "macro_dev": float(macro.max()) if macro.size else 0.0}


def run_local_law(cfg: ExperimentConfig) -> Report:
    """Averaged local law: sup_z |<G> - m| / (N^eps envelope) per replica."""
    rep = Report("local-law", cfg.to_dict(), provenance=_provenance(cfg))
    for N in cfg.N_list:
        res = _run_replicas(_ll_replica, cfg, N)
        _collect(rep, N, res, "sup_ratio", cfg)
        good = [x for x in res if x["xi"]]
        if good:
            rep.checks.append(Check(f"N={N} macroscopic |<G>-m| (soft, 3/sqrt(N))",
                                    max(x["macro_dev"] for x in good), 3 / math.sqrt(N), gated=False))
    return rep


def _collect(rep: Report, N: int, res: list[dict], key: str, cfg: ExperimentConfig, label: str | None = None,
             threshold: float = 1.0):
    """Per-replica ratios -> data columns, exclusion count and the violation-fraction gate."""
    label = label or key
    good = [x for x in res if x["xi"]]
    excluded = len(res) - len(good)
    rep.data.setdefault("N", []).extend([N] * len(res))
    rep.data.setdefault("replica", []).extend([x["r"] for x in res])
    rep.data.setdefault(key, []).extend([x.get(key, float("nan")) for x in res])
    rep.checks.append(Check(f"N={N} excluded replicas (typicality)", excluded, cfg.replicas, gated=False,
                            note=", ".join(sorted({x['why'] for x in res if not x['xi']}))))
    if not good:
        rep.checks.append(Check(f"N={N} {label} violation fraction", 1.0, cfg.violation_tol, note="no typical replica"))
        return
    vals = np.array([x[key] for x in good])
    rep.checks.append(Check(f"N={N} max {label}", float(vals.max()), threshold, gated=False))
    fails = int(np.sum(vals > threshold))
    rep.checks.append(_fraction_check(f"N={N} {label} violation fraction", fails, len(good), cfg.violation_tol))


def _entry_replica(cfg, N, r):
    nu = build_measure(cfg.nu)
    params = _params(cfg, N, _entry_s(cfg, N))
    rep = _prepare(cfg, nu, params, r)
    if not rep.xi_ok:
        return {"r": r, "xi": False, "why": rep.xi_reason}
    W = En.sample_W(N, params.q, cfg.law, rep.rng)
    sample = En.assemble_and_eig(W, rep.V, params.lam, want_vectors=True)
    z = _z_grid(cfg, params, rep.edges)
    m = rep.law(z)
    n_diag = cfg.n_pairs // 2
    n_off = cfg.n_pairs - n_diag
    i = rep.rng.integers(0, N, n_diag)
    oi = rep.rng.integers(0, N, n_off)
    oj = (oi + 1 + rep.rng.integers(0, N - 1, n_off)) % N
    Gd = En.green_pairs(sample.mu, sample.eigenvectors, z, i, i)
    Go = En.green_pairs(sample.mu, sample.eigenvectors, z, oi, oj)
    Mt = np.stack([D.vector_M(rep.V[i], params, mm, zz).M for mm, zz in zip(m, z)])
    env = N ** cfg.epsilon * D.entrywise_envelope(z, params, m.imag)[:, None]
    rd = np.abs(Gd - Mt) / env
    ro = np.abs(Go) / env
    return {"r": r, "xi": True, "sup_ratio": float(max(rd.max(), ro.max())), "diag_ratio": float(rd.max()),
            "offdiag_ratio": float(ro.max())}


def run_entrywise(cfg: ExperimentConfig) -> Report:
    """Entrywise law: max over sampled (i, j) and z of |G_ij - delta_ij M_i| / (N^eps envelope)."""
    rep = Report("entrywise", cfg.to_dict(), provenance=_provenance(cfg))
    for N in cfg.N_list:
        res = _run_replicas(_entry_replica, cfg, N)
        _collect(rep, N, res, "sup_ratio", cfg)
        good = [x for x in res if x["xi"]]
        if good:
            rep.data.setdefault("diag_ratio", []).extend([x.get("diag_ratio", float("nan")) for x in res])
            rep.data.setdefault("offdiag_ratio", []).extend([x.get("offdiag_ratio", float("nan")) for x in res])
            rep.checks.append(Check(f"N={N} max diagonal ratio", max(x["diag_ratio"] for x in good), 1.0, gated=False))
            rep.checks.append(Check(f"N={N} max off-diagonal ratio", max(x["offdiag_ratio"] for x in good), 1.0,
                                    gated=False))
    return rep


def rigidity_bound(N: int, q: float, eps: float) -> tuple[np.ndarray, np.ndarray]:
    """Simplified per-index rigidity bound and its case-(2) indicator, j = 1..N."""
    j = np.arange(1, N + 1)
    jl = np.minimum(j, N + 1 - j).astype(float)
    cross = N ** eps * (1.0 + N * q ** -3) ** 2
    small = jl <= cross
    core = jl ** (-1.0 / 3.0) * N ** (-2.0 / 3.0)
    b = N ** eps * (core + np.where(small, jl ** (1.0 / 3.0) * N ** (-2.0 / 3.0), q ** -2.0))
    return b, small


def _rig_replica(cfg, N, r):
    nu = build_measure(cfg.nu)
    params = _params(cfg, N, _entry_s(cfg, N))
    rep = _prepare(cfg, nu, params, r)
    if not rep.xi_ok:
        return {"r": r, "xi": False, "why": rep.xi_reason}
    W = En.sample_W(N, params.q, cfg.law, rep.rng)
    sample = En.assemble_and_eig(W, rep.V, params.lam)
    gam = D.classical_locations(rep.edges, rep.law, N)
    bound, small = rigidity_bound(N, params.q, cfg.epsilon)
    ratio = np.abs(sample.mu - gam) / bound
    ext_env = N ** cfg.epsilon * (N ** (-2.0 / 3.0) + params.q ** -3)
    ext = abs(sample.mu[-1] - gam[-1]) / ext_env
    return {"r": r, "xi": True, "frac_ok": float(np.mean(ratio <= 1.0)), "worst_ratio": float(ratio.max()),
            "worst_j": int(np.argmax(ratio)) + 1, "extremal_ratio": float(ext),
            "case2_max": float(ratio[small].max()) if small.any() else 0.0,
            "gamma_top_gap": float(gam[-1] - rep.edges.L_plus)}


def run_rigidity(cfg: ExperimentConfig) -> Report:
    """Per-index rigidity |mu_j - gamma_j| against the simplified bound (phi >= 2/9)."""
    if cfg.phi < 2.0 / 9.0 - 1e-12:
        raise ConfigError(f"rigidity gate needs phi >= 2/9 (got {cfg.phi:.4g})")
    rep = Report("rigidity", cfg.to_dict(), provenance=_provenance(cfg))
    for N in cfg.N_list:
        res = _run_replicas(_rig_replica, cfg, N)
        good = [x for x in res if x["xi"]]
        for key in ("frac_ok", "worst_ratio", "worst_j", "extremal_ratio", "case2_max"):
            rep.data.setdefault(key, []).extend([x.get(key, float("nan")) for x in res])
        rep.data.setdefault("N", []).extend([N] * len(res))
        rep.data.setdefault("replica", []).extend([x["r"] for x in res])
        rep.checks.append(Check(f"N={N} excluded replicas (typicality)", len(res) - len(good), cfg.replicas,
                                gated=False))
        if not good:
            rep.checks.append(Check(f"N={N} rigidity", 1.0, cfg.violation_tol, note="no typical replica"))
            continue
        bad_idx = sum(1 for x in good if x["frac_ok"] < cfg.index_frac)
        rep.checks.append(Check(f"N={N} worst fraction of indices outside bound",
                                1.0 - min(x["frac_ok"] for x in good), 1.0 - cfg.index_frac, gated=False))
        rep.checks.append(_fraction_check(f"N={N} replicas with <{cfg.index_frac:.0%} indices in bound",
                                          bad_idx, len(good), cfg.violation_tol))
        ext = np.array([x["extremal_ratio"] for x in good])
        rep.checks.append(Check(f"N={N} max extremal ratio", float(ext.max()), 1.0, gated=False))
        rep.checks.append(_fraction_check(f"N={N} extremal |mu_N-gamma_N| violation fraction",
                                          int(np.sum(ext > 1)), len(good), cfg.violation_tol))
        rep.checks.append(Check(f"N={N} case-(2) window max ratio (logged)", max(x["case2_max"] for x in good), 1.0,
                                gated=False))
        rep.checks.append(Check(f"N={N} gamma_N - L+ (consistency)", max(x["gamma_top_gap"] for x in good), 1e-6,
                                gated=True))
    return rep


def dos_envelope(E, params: D.ModelParams, edges: D.EdgeData, eps: float):
    N, q = params.N, params.q
    kappa = np.minimum(np.abs(E - edges.L_minus), np.abs(E - edges.L_plus))
    base = q ** -3 + N ** (-2.0 / 3.0)
    return N ** eps * (1.0 / N + q ** -4.5 + np.minimum(kappa * np.sqrt(base), q ** -2 * np.sqrt(kappa + base)))


def _dos_replica(cfg, N, r):
    nu = build_measure(cfg.nu)
    params = _params(cfg, N, _entry_s(cfg, N))
    rep = _prepare(cfg, nu, params, r)
    if not rep.xi_ok:
        return {"r": r, "xi": False, "why": rep.xi_reason}
    W = En.sample_W(N, params.q, cfg.law, rep.rng)
    sample = En.assemble_and_eig(W, rep.V, params.lam)
    ed = rep.edges
    E = np.linspace(ed.L_minus - 0.2, ed.L_plus + 0.2, cfg.n_dos)
    nfc = D.integrated_density(ed, rep.law)(E)
    emp = np.searchsorted(sample.mu, E, side="right") / N
    ratio = np.abs(emp - nfc) / dos_envelope(E, params, ed, cfg.epsilon)
    k = int(np.argmax(ratio))
    beyond = E > ed.L_plus + N ** cfg.epsilon * (params.q ** -3 + N ** (-2.0 / 3.0))
    return {"r": r, "xi": True, "sup_ratio": float(ratio[k]), "argmax_E": float(E[k]),
            "beyond_defect": float(np.max(1.0 - emp[beyond])) if beyond.any() else 0.0}


def run_dos(cfg: ExperimentConfig) -> Report:
    """Integrated density of states: sup_E |n(E) - n_fc(E)| over the envelope."""
    rep = Report("dos", cfg.to_dict(), provenance=_provenance(cfg))
    for N in cfg.N_list:
        res = _run_replicas(_dos_replica, cfg, N)
        _collect(rep, N, res, "sup_ratio", cfg)
        good = [x for x in res if x["xi"]]
        if good:
            rep.data.setdefault("argmax_E", []).extend([x.get("argmax_E", float("nan")) for x in res])
            rep.checks.append(Check(f"N={N} 1 - n(E) beyond the upper edge window",
                                    max(x["beyond_defect"] for x in good), 0.0, gated=False))
    return rep


def _eb_replica(cfg, N, r):
    nu = build_measure(cfg.nu)
    s = _entry_s(cfg, N)
    params = _params(cfg, N, s)
    rep = _prepare(cfg, nu, params, r, need_law=False)
    W = En.sample_W(N, params.q, cfg.law, rep.rng)
    normW = float(np.max(np.abs(np.linalg.eigvalsh(W)[[0, -1]])))
    out = {"r": r, "xi": rep.xi_ok, "why": rep.xi_reason, "normW": normW}
    if rep.xi_ok:
        mu = np.linalg.eigvalsh(W + np.diag(params.lam * rep.V))
        ed = rep.edges
        normH = float(max(mu[-1], -mu[0]))
        out["excess"] = normH - max(ed.L_plus, -ed.L_minus)
    return out


def run_edge_bound(cfg: ExperimentConfig) -> Report:
    """Extremal eigenvalues: ||H|| - max{L+, |L-|} <= N^eps (N^-2/3 + q^-3), plus the lam = 0 check on ||W||."""
    rep = Report("edge-bound", cfg.to_dict(), provenance=_provenance(cfg))
    for N in cfg.N_list:
        params = _params(cfg, N, _entry_s(cfg, N))
        q, s = params.q, params.s
        res = _run_replicas(_eb_replica, cfg, N)
        good = [x for x in res if x["xi"]]
        env = N ** cfg.epsilon * (N ** (-2.0 / 3.0) + q ** -3)
        rep.data.setdefault("N", []).extend([N] * len(res))
        rep.data.setdefault("replica", []).extend([x["r"] for x in res])
        rep.data.setdefault("excess", []).extend([x.get("excess", float("nan")) for x in res])
        rep.data.setdefault("normW", []).extend([x["normW"] for x in res])
        rep.checks.append(Check(f"N={N} excluded replicas (typicality)", len(res) - len(good), cfg.replicas,
                                gated=False))
        if good:
            exc = np.array([x["excess"] for x in good])
            rep.checks.append(Check(f"N={N} max ||H|| - max(L+,|L-|)", float(exc.max()), env, gated=False))
            rep.checks.append(_fraction_check(f"N={N} extremal bound violation fraction", int(np.sum(exc > env)),
                                              len(good), cfg.violation_tol))
        else:
            rep.checks.append(Check(f"N={N} extremal bound violation fraction", 1.0, cfg.violation_tol))
        target = 2.0 + s / q ** 2
        envW = N ** cfg.epsilon * (q ** -4 + N ** (-2.0 / 3.0))
        devW = np.abs(np.array([x["normW"] for x in res]) - target)
        rep.checks.append(Check(f"N={N} max | ||W|| - (2 + s/q^2) |", float(devW.max()), envW, gated=False))
        rep.checks.append(_fraction_check(f"N={N} lam=0 ||W|| cross-check violation fraction",
                                          int(np.sum(devW > envW)), len(res), cfg.violation_tol))
    return rep


def _clt_replica(cfg, N, r, edge_only: bool):
    nu = build_measure(cfg.nu)
    params = _params(cfg, N, _entry_s(cfg, N))
    rep = _prepare(cfg, nu, params, r, need_law=False)
    if not rep.xi_ok:
        return {"r": r, "xi": False, "why": rep.xi_reason}
    out = {"r": r, "xi": True, "L_tilde": rep.edges.L_plus}
    if not edge_only:
        W = En.sample_W(N, params.q, cfg.law, rep.rng)
        out["mu_N"] = float(np.linalg.eigvalsh(W + np.diag(params.lam * rep.V))[-1])
    return out


def _clt_reference(cfg: ExperimentConfig, N: int):
    nu = build_measure(cfg.nu)
    params = _params(cfg, N, _entry_s(cfg, N))
    breve = Ms.sparsity_convolve(Ms.scale(nu, params.lam), params.s, params.q)
    ed_breve = D.find_edges(breve, cfg.varpi)
    ed_plain = D.find_edges(Ms.scale(nu, params.lam), cfg.varpi)
    return params, nu, ed_breve, ed_plain


def _clt_checks(rep: Report, N: int, X: np.ndarray, var_ref: float, label: str, cfg: ExperimentConfig):
    M = X.size
    mean = float(X.mean())
    var = float(X.var(ddof=1))
    rep.checks.append(Check(f"N={N} {label} |var/sigma^2 - 1|", abs(var / var_ref - 1.0), 0.25,
                            note=f"sample variance {var:.6g}, reference {var_ref:.6g}"))
    rep.checks.append(Check(f"N={N} {label} |mean|", abs(mean), 3.0 * math.sqrt(var_ref / M)))
    if M >= 20:
        sd = math.sqrt(var)
        ks = ks_statistic(X, lambda x: stats.norm.cdf(x, loc=0.0, scale=sd))
        rep.checks.append(Check(f"N={N} {label} KS vs N(0, fitted var)", ks, ks_critical(M, 0.01)))
        ad = ad_statistic(X, lambda x: stats.norm.cdf(x, loc=0.0, scale=sd))
        rep.checks.append(Check(f"N={N} {label} Anderson-Darling A^2", ad, 3.857, gated=False,
                                note="1% level for a fully specified null"))
    return mean, var


def run_edge_clt(cfg: ExperimentConfig) -> Report:
    """Gaussian fluctuation of the top eigenvalue: sqrt(N)/lam (mu_N - L_breve)."""
    rep = Report("edge-clt", cfg.to_dict(), provenance=_provenance(cfg))
    if cfg.potential != "random":
        raise ConfigError("edge CLT needs a random potential")
    for N in cfg.N_list:
        params, nu, ed_b, ed_p = _clt_reference(cfg, N)
        q, lam = params.q, params.lam
        scales = {"1/q": 1 / q, "N^-1/6": N ** (-1 / 6), "sqrt(N) q^-3": math.sqrt(N) * q ** -3}
        worst = max(scales.values())
        if lam < cfg.separation * worst:
            raise ConfigError(f"lambda={lam} not separated from max{{{', '.join(scales)}}}={worst:.4g} "
                              f"by factor {cfg.separation}")
        res = _run_replicas(_clt_replica, cfg, N, edge_only=False)
        good = [x for x in res if x["xi"]]
        rep.checks.append(Check(f"N={N} excluded replicas (typicality)", len(res) - len(good), cfg.replicas,
                                gated=False))
        rep.checks.append(Check(f"N={N} separation lambda / max scale", worst / lam, 1.0 / cfg.separation,
                                gated=False, note=f"lambda / max = {lam / worst:.4g}"))
        mu = np.array([x["mu_N"] for x in good])
        X = math.sqrt(N) / lam * (mu - ed_b.L_plus)
        rep.data.setdefault("N", []).extend([N] * X.size)
        rep.data.setdefault("X", []).extend(X.tolist())
        rep.data.setdefault("mu_N", []).extend(mu.tolist())
        m_fc = ed_p.m_plus
        var_ref = (1.0 - m_fc ** 2) / lam ** 2
        _clt_checks(rep, N, X, var_ref, "edge", cfg)
    return rep


def endpoint_sigma2(nu: Ms.Measure, params: D.ModelParams, zeta: float) -> float:
    """Exact finite-N variance of (1/(lam V - zeta - sqrt a) + 1/(lam V - zeta + sqrt a)) / 2, V ~ nu."""
    ra = math.sqrt(params.a)
    d = params.lam * nu.x - zeta
    h = 0.5 * (1.0 / (d - ra) + 1.0 / (d + ra))
    mean = float(np.dot(nu.w, h))
    return float(np.dot(nu.w, h * h) - mean ** 2)


def run_endpoint_clt(cfg: ExperimentConfig) -> Report:
    """Fluctuation of the refined edge across potentials: sqrt(N)/lam (L_tilde - L_breve)."""
    rep = Report("endpoint-clt", cfg.to_dict(), provenance=_provenance(cfg))
    for N in cfg.N_list:
        params, nu, ed_b, _ = _clt_reference(cfg, N)
        lam = params.lam
        if lam <= 0:
            raise ConfigError("endpoint CLT needs lambda > 0")
        res = _run_replicas(_clt_replica, cfg, N, edge_only=True)
        good = [x for x in res if x["xi"]]
        rep.checks.append(Check(f"N={N} excluded replicas (typicality)", len(res) - len(good), cfg.replicas,
                                gated=False))
        Lt = np.array([x["L_tilde"] for x in good])
        X = math.sqrt(N) / lam * (Lt - ed_b.L_plus)
        rep.data.setdefault("N", []).extend([N] * X.size)
        rep.data.setdefault("X", []).extend(X.tolist())
        if cfg.potential == "deterministic":
            rep.checks.append(Check(f"N={N} deterministic spread of L_tilde", float(np.ptp(Lt)), 1e-12))
            continue
        var_ref = (1.0 - ed_b.m_plus ** 2) / lam ** 2
        exact = endpoint_sigma2(nu, params, ed_b.zeta_plus) / lam ** 2
        rep.checks.append(Check(f"N={N} exact sigma_N^2 / lam^2 vs 1 - m^2 form", abs(exact / var_ref - 1), 0.25,
                                gated=False, note=f"exact {exact:.6g}"))
        _clt_checks(rep, N, X, var_ref, "endpoint", cfg)
    return rep


def _deloc_replica(cfg, N, r):
    nu = build_measure(cfg.nu)
    params = _params(cfg, N, _entry_s(cfg, N))
    rep = _prepare(cfg, nu, params, r, need_law=False)
    if not rep.xi_ok:
        return {"r": r, "xi": False, "why": rep.xi_reason}
    W = En.sample_W(N, params.q, cfg.law, rep.rng)
    sample = En.assemble_and_eig(W, rep.V, params.lam, want_vectors=True)
    return {"r": r, "xi": True, "sup_ratio": float(np.abs(sample.eigenvectors).max() * math.sqrt(N)) / N ** cfg.epsilon,
            "max_sup": float(np.abs(sample.eigenvectors).max() * math.sqrt(N))}


def run_delocalization(cfg: ExperimentConfig) -> Report:
    """max_a ||u_a||_inf sqrt(N) <= N^eps per replica."""
    rep = Report("delocalization", cfg.to_dict(), provenance=_provenance(cfg))
    for N in cfg.N_list:
        res = _run_replicas(_deloc_replica, cfg, N)
        _collect(rep, N, res, "sup_ratio", cfg)
        good = [x for x in res if x["xi"]]
        if good:
            v = np.array([x["max_sup"] for x in good])
            rep.data.setdefault("max_sup", []).extend([x.get("max_sup", float("nan")) for x in res])
            rep.checks.append(Check(f"N={N} median max ||u||_inf sqrt(N)", float(np.median(v)), N ** cfg.epsilon,
                                    gated=False, note=f"sqrt(2 log 2N) = {math.sqrt(2 * math.log(2 * N)):.3f}"))
    return rep


def _pd_replica(cfg, N, r):
    nu = build_measure(cfg.nu)
    params = _params(cfg, N, _entry_s(cfg, N))
    rep = _prepare(cfg, nu, params, r)
    if not rep.xi_ok:
        return {"r": r, "xi": False, "why": rep.xi_reason}
    W = En.sample_W(N, params.q, cfg.law, rep.rng)
    sample = En.assemble_and_eig(W, rep.V, params.lam, want_vectors=True)
    WU = W @ sample.eigenvectors
    ed = rep.edges
    lo = ed.L_minus + 0.25 * (ed.L_plus - ed.L_minus)
    hi = ed.L_plus - 0.25 * (ed.L_plus - ed.L_minus)
    E = np.linspace(lo, hi, cfg.n_bulk_E)
    etas = cfg.bulk_eta or (N ** (-0.5), N ** (-0.25), 1.0)
    z = D.SpectralDomain.build(params, E, etas).points
    m = rep.law(z)
    worst, agree = 0.0, 0.0
    for zz, mm in zip(z, m):
        Mt = D.vector_M(rep.V, params, mm, zz).M
        psi = D.psi_b(zz, 1.0, params, mm.imag)
        env = N ** cfg.epsilon * psi ** 2
        for B in (np.ones(N), Mt):
            pdg = En.p_diagnostic(W, rep.V, params.lam, params, zz, B, sample, WU=WU)
            worst = max(worst, abs(pdg.value) / env)
            agree = max(agree, pdg.agreement)
    return {"r": r, "xi": True, "sup_ratio": float(worst), "agreement": float(agree)}


def run_p_diag(cfg: ExperimentConfig) -> Report:
    """|<B P>| against N^eps Psi_1^2 on a bulk grid, B in {I, diag(M)}; both computation paths compared."""
    rep = Report("p-diag", cfg.to_dict(), provenance=_provenance(cfg))
    for N in cfg.N_list:
        res = _run_replicas(_pd_replica, cfg, N)
        _collect(rep, N, res, "sup_ratio", cfg)
        good = [x for x in res if x["xi"]]
        if good:
            rep.data.setdefault("agreement", []).extend([x.get("agreement", float("nan")) for x in res])
            rep.checks.append(Check(f"N={N} max disagreement of the two paths", max(x["agreement"] for x in good),
                                    1e-9))
    return rep


EXPERIMENTS: dict[str, Callable[[ExperimentConfig], Report]] = {
    "local-law": run_local_law,
    "entrywise": run_entrywise,
    "rigidity": run_rigidity,
    "dos": run_dos,
    "edge-bound": run_edge_bound,
    "edge-clt": run_edge_clt,
    "endpoint-clt": run_endpoint_clt,
    "delocalization": run_delocalization,
    "p-diag": run_p_diag,
}

# Acceptance configurations (overrides of the ExperimentConfig defaults).
ACCEPTANCE: dict[str, dict[str, Any]] = {
    "local-law": {"N_list": [1000], "phi": 1 / 3, "replicas": 20},
    "entrywise": {"N_list": [1000], "phi": 1 / 3, "replicas": 20},
    "rigidity": {"N_list": [1000], "phi": 1 / 3, "replicas": 20},
    "dos": {"N_list": [2000], "phi": 1 / 3, "replicas": 20},
    "edge-bound": {"N_list": [1000], "phi": 1 / 3, "replicas": 200},
    "edge-clt": {"N_list": [500], "phi": 0.45, "replicas": 400, "law": "bernoulli-gaussian"},
    "endpoint-clt": {"N_list": [2000], "phi": 1 / 3, "replicas": 400},
    "delocalization": {"N_list": [1000], "phi": 1 / 3, "replicas": 20},
    "p-diag": {"N_list": [1000], "phi": 1 / 3, "replicas": 20, "n_bulk_E": 10, "violation_tol": 0.10},
}


def acceptance_config(name: str, **overrides) -> ExperimentConfig:
    d = {"experiment": name, **ACCEPTANCE[name], **overrides}
    return ExperimentConfig.from_dict(d)


def run_experiment(cfg: ExperimentConfig) -> Report:
    return EXPERIMENTS[cfg.experiment](cfg)
