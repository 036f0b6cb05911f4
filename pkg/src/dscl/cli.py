"""Command line entry point: ``dscl <command> [--config PATH] [flags]``.

Commands
--------
density    (E, rho) table of the (refined) deformed law, edge JSON, gnuplot script
edges      edge data plus the small-coupling expansion and its deviation
locations  classical eigenvalue locations gamma_1..gamma_N
sample     one draw of H = W + lam V, persisted as JSON + CSV (+ raw eigenvectors)
verify     run a named Monte Carlo experiment; exit 0 iff all gates pass
report     summarize the experiment reports found in an output directory

Exit status: 0 success / all gates pass, 1 runtime or gate failure,
2 configuration error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import __version__
from . import dsclaw as D
from . import ensemble as En
from . import measure as Ms
from . import verify as Vf

COMMANDS = ("density", "edges", "locations", "sample", "verify", "report")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


@dataclass
class RunConfig:
    command: str = "density"
    measure: dict = field(default_factory=lambda: {"kind": "delta"})
    N: int = 1000
    q: float | None = None
    phi: float | None = None
    lam: float = 0.0
    s: float = 0.0
    tau: float = 0.01
    E0: float = 5.0
    varpi: float = 0.05
    n_E: int = 801
    eta_small: float = 1e-9
    law: str = "bernoulli-rademacher"
    potential: str = "random"
    want_vectors: bool = False
    seed: int = 0
    out: str = "out"
    workers: int | None = None
    epsilon: float | None = None
    experiment: dict = field(default_factory=dict)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise Vf.ConfigError(f"unknown config keys: {sorted(unknown)}")
        rc = cls(**d)
        rc.validate()
        return rc

    def to_dict(self) -> dict:
        return asdict(self)

    def validate(self):
        if self.command not in COMMANDS:
            raise Vf.ConfigError(f"unknown command {self.command!r}")
        Vf.build_measure(self.measure)
        if self.N < 1:
            raise Vf.ConfigError("N must be positive")

    @property
    def q_value(self) -> float:
        if self.q is not None:
            return float(self.q)
        if self.phi is not None:
            return float(self.N) ** float(self.phi)
        return math.sqrt(self.N)

    def params(self) -> D.ModelParams:
        try:
            return D.ModelParams(N=self.N, q=self.q_value, lam=self.lam, s=self.s, tau=self.tau, E0=self.E0,
                                 varpi=self.varpi)
        except ValueError as exc:
            raise Vf.ConfigError(str(exc)) from exc


def _dump_json(obj, path: Path):
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def _law_and_edges(rc: RunConfig):
    nu = Vf.build_measure(rc.measure)
    params = rc.params()
    tilde = Ms.sparsity_convolve(Ms.scale(nu, params.lam), params.s, params.q)
    edges = D.find_edges(tilde, params.varpi)
    law = D.FcLaw.refined(nu, params)
    return nu, params, tilde, edges, law


def _edges_json(edges: D.EdgeData, tilde: Ms.Measure) -> dict:
    d = edges.to_json()
    exp = D.edge_expansion_of(tilde)
    d["edge_expansion"] = exp
    d["edge_expansion_delta"] = edges.L_plus - exp
    return d


def cmd_density(rc: RunConfig, out: Path) -> int:
    nu, params, tilde, edges, law = _law_and_edges(rc)
    E = np.linspace(edges.L_minus - 0.2, edges.L_plus + 0.2, rc.n_E)
    rho = D.invert_density(law, E, rc.eta_small)
    with open(out / "density.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("E,rho\n")
        for e, r in zip(E, rho):
            fh.write(f"{float(e)!r},{float(r)!r}\n")
    _dump_json(_edges_json(edges, tilde), out / "edges.json")
    (out / "density.gp").write_text(
        "set datafile separator ','\n"
        "set key off\nset xlabel 'E'\nset ylabel 'rho(E)'\n"
        f"set arrow from {edges.L_minus!r}, graph 0 to {edges.L_minus!r}, graph 1 nohead dt 2\n"
        f"set arrow from {edges.L_plus!r}, graph 0 to {edges.L_plus!r}, graph 1 nohead dt 2\n"
        "plot 'density.csv' using 1:2 every ::1 with lines\n", encoding="utf-8")
    print(f"edges [{edges.L_minus:.10g}, {edges.L_plus:.10g}]; wrote {out / 'density.csv'}")
    return EXIT_OK


def cmd_edges(rc: RunConfig, out: Path) -> int:
    nu, params, tilde, edges, law = _law_and_edges(rc)
    d = _edges_json(edges, tilde)
    _dump_json(d, out / "edges.json")
    print(json.dumps(d, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_locations(rc: RunConfig, out: Path) -> int:
    nu, params, tilde, edges, law = _law_and_edges(rc)
    gam = D.classical_locations(edges, law, rc.N, eta_small=rc.eta_small)
    with open(out / "locations.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write("i,i_over_N,gamma\n")
        for i, g in enumerate(gam, start=1):
            fh.write(f"{i},{i / rc.N!r},{float(g)!r}\n")
    _dump_json(_edges_json(edges, tilde), out / "edges.json")
    print(f"gamma_1={gam[0]:.10g} gamma_N={gam[-1]:.10g}; wrote {out / 'locations.csv'}")
    return EXIT_OK


def cmd_sample(rc: RunConfig, out: Path) -> int:
    nu = Vf.build_measure(rc.measure)
    q = rc.q_value
    rng = En.replica_rng(rc.seed, 0)
    V = En.sample_V(nu, rc.N, rc.potential, rng)
    try:
        W = En.sample_W(rc.N, q, rc.law, rng)
    except ValueError as exc:
        raise Vf.ConfigError(str(exc)) from exc
    res = En.assemble_and_eig(W, V, rc.lam, rc.want_vectors, seed=rc.seed,
                              params={"N": rc.N, "q": q, "lambda": rc.lam, "law": rc.law,
                                      "potential": rc.potential, "measure": rc.measure})
    files = res.save(out / "sample")
    mu = res.mu
    print(f"||H|| = {res.norm:.10g}")
    print("bottom 3:", " ".join(f"{x:.10g}" for x in mu[:3]))
    print("top 3:   ", " ".join(f"{x:.10g}" for x in mu[-3:]))
    print(f"sum(mu) = {mu.sum():.12g}, lam*sum(V) = {rc.lam * V.sum():.12g}, defect {res.trace_defect():.3e}")
    print("wrote", ", ".join(str(f) for f in files))
    return EXIT_OK


def _experiment_config(rc: RunConfig, name: str, args) -> Vf.ExperimentConfig:
    if name not in Vf.EXPERIMENTS:
        raise Vf.ConfigError(f"unknown experiment {name!r}; choose from {sorted(Vf.EXPERIMENTS)}")
    d = {"experiment": name, **Vf.ACCEPTANCE[name], **rc.experiment}
    d["experiment"] = name
    if args.seed is not None:
        d["master_seed"] = args.seed
    if rc.workers is not None:
        d["workers"] = rc.workers
    if rc.epsilon is not None:
        d["epsilon"] = rc.epsilon
    if args.replicas is not None:
        d["replicas"] = args.replicas
    if args.N is not None:
        d["N_list"] = [args.N]
    return Vf.ExperimentConfig.from_dict(d)


def cmd_verify(rc: RunConfig, out: Path, name: str, args) -> int:
    cfg = _experiment_config(rc, name, args)
    report = Vf.run_experiment(cfg)
    report.write(out)
    print(report.table(), end="")
    return EXIT_OK if report.verdict else EXIT_FAIL


def cmd_report(rc: RunConfig, out: Path) -> int:
    reports = sorted(out.glob("*.report.json"))
    if not reports:
        print(f"no reports in {out}", file=sys.stderr)
        return EXIT_FAIL
    rows, ok = [], True
    for p in reports:
        d = json.loads(p.read_text(encoding="utf-8"))
        worst = max((c["ratio"] for c in d["checks"] if c["gated"] and isinstance(c["ratio"], float)), default=0.0)
        rows.append({"experiment": d["experiment"], "verdict": d["verdict"], "worst_gated_ratio": worst})
        ok &= d["verdict"] == "pass"
    _dump_json({"reports": rows, "all_pass": ok}, out / "summary.json")
    for r in rows:
        print(f"{r['experiment']:<16} {r['verdict']:<5} worst ratio {r['worst_gated_ratio']:.4g}")
    return EXIT_OK if ok else EXIT_FAIL


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dscl", description="Deformed sparse random matrix laws and checks.")
    p.add_argument("--version", action="version", version=f"dscl {__version__}")
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("name", nargs="?", help="experiment name (verify only)")
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--seed", type=int, help="master seed (unsigned 64-bit)")
    p.add_argument("--workers", type=int, help="worker processes (default: DSCL_WORKERS or logical cores)")
    p.add_argument("--epsilon", type=float, help="tolerance exponent of the N^eps envelopes")
    p.add_argument("--replicas", type=int, help="override the replica count (verify)")
    p.add_argument("--N", type=int, help="override the matrix size")
    return p


def load_run_config(args) -> RunConfig:
    d: dict = {}
    if args.config is not None:
        try:
            d = json.loads(Path(args.config).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            raise Vf.ConfigError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(d, dict):
            raise Vf.ConfigError("config must be a JSON object")
    d = dict(d)
    d["command"] = args.command
    if args.out is not None:
        d["out"] = str(args.out)
    if args.seed is not None:
        if not 0 <= args.seed < 2 ** 64:
            raise Vf.ConfigError("seed must be an unsigned 64-bit integer")
        d["seed"] = args.seed
    if args.workers is not None:
        d["workers"] = args.workers
    if args.epsilon is not None:
        d["epsilon"] = args.epsilon
    if args.N is not None and args.command != "verify":
        d["N"] = args.N
    try:
        return RunConfig.from_dict(d)
    except TypeError as exc:
        raise Vf.ConfigError(str(exc)) from exc


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_intermixed_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_CONFIG
    try:
        rc = load_run_config(args)
        if args.workers is None and rc.workers is None and os.environ.get("DSCL_WORKERS"):
            rc.workers = Vf.resolve_workers(None)
        out = Path(rc.out)
        out.mkdir(parents=True, exist_ok=True)
        if args.command != "report":
            _dump_json(rc.to_dict(), out / f"{args.command}.config.json")
        if args.command == "verify":
            if not args.name:
                raise Vf.ConfigError("verify needs an experiment name")
            return cmd_verify(rc, out, args.name, args)
        if args.name:
            raise Vf.ConfigError(f"unexpected argument {args.name!r}")
        return {"density": cmd_density, "edges": cmd_edges, "locations": cmd_locations,
                "sample": cmd_sample, "report": cmd_report}[args.command](rc, out)
    except D.StabilityError as exc:
        print(f"error: split support or unstable potential: {exc}", file=sys.stderr)
        return EXIT_FAIL
    except Vf.ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (D.SolverError, MemoryError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":
    raise SystemExit(main())
