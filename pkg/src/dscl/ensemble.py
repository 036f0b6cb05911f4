"""Sampling of deformed sparse matrices H = W + lam * diag(V) and resolvent statistics."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .measure import Measure, deterministic_potential, quantile

__all__ = [
    "EntryLaw",
    "SampleResult",
    "LAWS",
    "N_MAX",
    "FULL_G_MAX",
    "replica_rng",
    "theoretical_s",
    "sample_W",
    "draw_entries",
    "green_pairs",
    "sample_V",
    "assemble_and_eig",
    "green_trace",
    "green_entries",
    "green_diag",
    "p_diagnostic",
    "PDiagnostic",
]

LAWS = ("bernoulli-rademacher", "bernoulli-gaussian")
N_MAX = 4096
FULL_G_MAX = 1500


@dataclass(frozen=True)
class EntryLaw:
    """Dilution law: W_ij = B_ij M_ij / sqrt(N p) with B ~ Bernoulli(p), p = q^2 / N."""

    kind: str = "bernoulli-rademacher"

    def __post_init__(self):
        if self.kind not in LAWS:
            raise ValueError(f"unknown entry law {self.kind!r}; choose one of {LAWS}")

    @staticmethod
    def p(N: int, q: float) -> float:
        return q * q / N

    def fourth_moment_factor(self) -> float:
        """E M^4 of the non-diluted entry."""
        return 1.0 if self.kind == "bernoulli-rademacher" else 3.0


def replica_rng(master_seed: int, replica: int) -> np.random.Generator:
    """Counter-based stream for replica ``replica``; independent of scheduling."""
    ss = np.random.SeedSequence(entropy=int(master_seed), spawn_key=(int(replica),))
    return np.random.Generator(np.random.Philox(ss))


def _rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return replica_rng(int(seed), 0)


def theoretical_s(law: EntryLaw | str, N: int, q: float, c4: float = 0.1) -> float:
    """Normalized fourth cumulant s = N q^2 (E W^4 - 3 (E W^2)^2) of the entry law."""
    law = EntryLaw(law) if isinstance(law, str) else law
    s = law.fourth_moment_factor() - 3.0 * q * q / N
    if s < c4:
        raise ValueError(f"entry law {law.kind} at q^2/N={q * q / N:.4g} gives s={s:.4g} < c4={c4}; "
                         "choose smaller q or the gaussian law")
    return s


def _check_size(N: int):
    if N < 1:
        raise ValueError("N must be positive")
    if N > N_MAX:
        raise MemoryError(f"N={N} exceeds the dense eigensolver cap {N_MAX}")


def draw_entries(n: int, N: int, q: float, law: EntryLaw | str, rng: np.random.Generator) -> np.ndarray:
    """n i.i.d. off-diagonal entries B M / sqrt(N p), p = q^2 / N."""
    law = EntryLaw(law) if isinstance(law, str) else law
    p = min(EntryLaw.p(N, q), 1.0)
    mask = rng.random(n) < p if p < 1 else np.ones(n, dtype=bool)
    k = int(mask.sum())
    if law.kind == "bernoulli-rademacher":
        vals = np.where(rng.random(k) < 0.5, -1.0, 1.0)
    else:
        vals = rng.standard_normal(k)
    out = np.zeros(n)
    out[mask] = vals / math.sqrt(N * p)
    return out


def sample_W(N: int, q: float, law: EntryLaw | str, seed) -> np.ndarray:
    """Symmetric sparse matrix with zero diagonal and i.i.d. upper-triangle entries."""
    law = EntryLaw(law) if isinstance(law, str) else law
    _check_size(N)
    p = EntryLaw.p(N, q)
    if p > 1 + 1e-12:
        raise ValueError(f"dilution probability q^2/N = {p:.4g} exceeds 1")
    p = min(p, 1.0)
    rng = _rng(seed)
    iu = np.triu_indices(N, k=1)
    upper = draw_entries(iu[0].size, N, q, law, rng)
    W = np.zeros((N, N))
    W[iu] = upper
    W += W.T
    return W


def sample_V(nu: Measure, N: int, mode: str = "random", seed=0) -> np.ndarray:
    """Potential entries; random mode uses inverse-CDF sampling from ``nu``."""
    if mode == "deterministic":
        return deterministic_potential(nu, N)
    if mode != "random":
        raise ValueError(f"unknown potential mode {mode!r}")
    u = _rng(seed).random(N)
    # quantile is left-continuous and u in [0, 1) never hits 0 with positive probability
    return np.asarray(quantile(nu, u), dtype=float)


@dataclass(eq=False)
class SampleResult:
    V: np.ndarray
    mu: np.ndarray
    lam: float
    eigenvectors: np.ndarray | None = None
    seed: int | None = None
    params: dict = field(default_factory=dict)

    @property
    def N(self) -> int:
        return self.mu.size

    @property
    def norm(self) -> float:
        return float(max(abs(self.mu[0]), abs(self.mu[-1])))

    def trace_defect(self) -> float:
        """|sum(mu) - lam sum(V)|, zero up to rounding because diag W = 0."""
        return float(abs(self.mu.sum() - self.lam * self.V.sum()))

    def check(self, H: np.ndarray | None = None) -> dict:
        out = {"sorted": bool(np.all(np.diff(self.mu) >= 0)), "trace_defect": self.trace_defect()}
        if self.eigenvectors is not None:
            U = self.eigenvectors
            out["orthonormality"] = float(np.max(np.abs(U.T @ U - np.eye(U.shape[1]))))
            if H is not None:
                r = np.linalg.norm(H @ U - U * self.mu, axis=0)
                out["residual"] = float(r.max() / max(np.linalg.norm(H, 2), 1e-300))
        return out

    def save(self, stem: str | os.PathLike) -> list[Path]:
        """JSON header, CSV eigenvalues and potential, optional raw float64 eigenvectors."""
        stem = Path(stem)
        stem.parent.mkdir(parents=True, exist_ok=True)
        files = []
        header = {"N": self.N, "lambda": self.lam, "seed": self.seed, "params": self.params,
                  "eigenvalues_csv": stem.name + ".eig.csv", "eigenvectors": None}
        if self.eigenvectors is not None:
            raw = stem.with_name(stem.name + ".vec.f64")
            np.ascontiguousarray(self.eigenvectors, dtype="<f8").tofile(raw)
            header["eigenvectors"] = {"file": raw.name, "dtype": "<f8", "shape": list(self.eigenvectors.shape),
                                      "order": "C"}
            files.append(raw)
        csv_path = stem.with_name(stem.name + ".eig.csv")
        with open(csv_path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("index,mu,V\n")
            for i, (m, v) in enumerate(zip(self.mu, self.V)):
                fh.write(f"{i + 1},{float(m)!r},{float(v)!r}\n")
        files.append(csv_path)
        js = stem.with_name(stem.name + ".json")
        js.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
        files.insert(0, js)
        return files

    @classmethod
    def load(cls, json_path: str | os.PathLike) -> "SampleResult":
        json_path = Path(json_path)
        header = json.loads(json_path.read_text(encoding="utf-8"))
        rows = np.loadtxt(json_path.with_name(header["eigenvalues_csv"]), delimiter=",", skiprows=1, ndmin=2)
        U = None
        if header["eigenvectors"]:
            d = header["eigenvectors"]
            U = np.fromfile(json_path.with_name(d["file"]), dtype=d["dtype"]).reshape(d["shape"])
        return cls(rows[:, 2].copy(), rows[:, 1].copy(), float(header["lambda"]), U, header["seed"], header["params"])


def assemble_and_eig(W: np.ndarray, V: Sequence[float], lam: float, want_vectors: bool = False,
                     seed: int | None = None, params: dict | None = None) -> SampleResult:
    """Eigen decomposition of H = W + lam * diag(V) (LAPACK symmetric driver)."""
    V = np.asarray(V, dtype=float)
    W = np.asarray(W, dtype=float)
    if W.shape != (V.size, V.size):
        raise ValueError(f"W has shape {W.shape} but V has length {V.size}")
    _check_size(V.size)
    H = W + np.diag(lam * V)
    if want_vectors:
        mu, U = np.linalg.eigh(H)
    else:
        mu, U = np.linalg.eigvalsh(H), None
    res = SampleResult(V, mu, float(lam), U, seed, dict(params or {}))
    if res.trace_defect() > 1e-8 * max(1.0, V.size ** 0.5):
        raise ArithmeticError(f"trace identity violated by {res.trace_defect():.3e}")
    return res


def green_trace(mu: np.ndarray, z):
    """<G(z)> = N^-1 sum_a 1 / (mu_a - z)."""
    mu = np.asarray(mu, dtype=float)
    z = np.asarray(z, dtype=complex)
    if np.any(~(z.imag > 0)):
        raise ValueError("need Im z > 0")
    out = (1.0 / (mu[None, :] - z.reshape(-1, 1))).mean(axis=1)
    return complex(out[0]) if z.ndim == 0 else out.reshape(z.shape)


def green_entries(mu: np.ndarray, U: np.ndarray, z: complex, rows: Sequence[int], cols: Sequence[int] | None = None):
    """Rows of G(z) = U diag(1/(mu - z)) U^T (all columns unless ``cols`` given)."""
    rows = np.asarray(rows, dtype=int)
    r = 1.0 / (np.asarray(mu) - z)
    right = U if cols is None else U[np.asarray(cols, dtype=int)]
    return (U[rows] * r) @ right.T


def green_pairs(mu: np.ndarray, U: np.ndarray, z, i: Sequence[int], j: Sequence[int]) -> np.ndarray:
    """G_ij(z) for index pairs, vectorized over z (shape (len(z), len(pairs)))."""
    z = np.atleast_1d(np.asarray(z, dtype=complex))
    prod = U[np.asarray(i)] * U[np.asarray(j)]  # (P, N)
    r = 1.0 / (np.asarray(mu)[None, :] - z[:, None])  # (Z, N)
    return r @ prod.T


def green_diag(mu: np.ndarray, U: np.ndarray, z) -> np.ndarray:
    """G_ii(z) for all i; shape (len(z), N) for array z."""
    z = np.asarray(z, dtype=complex)
    r = 1.0 / (np.asarray(mu)[None, :] - np.atleast_1d(z)[:, None])
    out = r @ (U * U).T
    return out[0] if z.ndim == 0 else out


@dataclass(frozen=True)
class PDiagnostic:
    value: complex
    value_wg: complex
    agreement: float


def p_diagnostic(W: np.ndarray, V: Sequence[float], lam: float, params, z: complex, B: Sequence[float],
                 sample: SampleResult, WU: np.ndarray | None = None) -> PDiagnostic:
    """<B P> with P_ii = 1 + z G_ii + <G> G_ii - lam V_i G_ii + a <G.G> G_ii^2, two ways.

    The second path uses (WG)_ii in place of 1 + z G_ii - lam V_i G_ii; the two
    agree by the resolvent identity (H - z) G = I.  ``WU = W @ U`` may be
    precomputed when many z are evaluated on one sample.
    """
    if sample.eigenvectors is None:
        raise ValueError("p_diagnostic needs eigenvectors")
    U, mu = sample.eigenvectors, sample.mu
    V = np.asarray(V, dtype=float)
    B = np.asarray(B)
    a = params.a if hasattr(params, "a") else float(params)
    r = 1.0 / (mu - z)
    Gd = (U * U) @ r
    WU = W @ U if WU is None else WU
    WGd = (WU * U) @ r
    g = Gd.mean()
    gg = np.mean(Gd * Gd)
    tail = g * Gd + a * gg * Gd * Gd
    P1 = 1.0 + z * Gd - lam * V * Gd + tail
    P2 = WGd + tail
    v1 = complex(np.mean(B * P1))
    v2 = complex(np.mean(B * P2))
    agree = abs(v1 - v2)
    if agree > 1e-6:
        raise ArithmeticError(f"resolvent identity violated: paths differ by {agree:.3e}")
    return PDiagnostic(v1, v2, agree)
