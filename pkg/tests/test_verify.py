import json
import math

import numpy as np
import pytest
from scipy import stats

from dscl import dsclaw as D
from dscl import verify as Vf


def small(name, **kw):
    base = {"N_list": [200], "replicas": 3, "phi": 1 / 3}
    base.update(kw)
    return Vf.ExperimentConfig.from_dict({"experiment": name, **base})


class TestStatistics:
    def test_ks_reference_samples(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(2000)
        assert Vf.ks_statistic(x, stats.norm.cdf) <= 1.36 / math.sqrt(2000)

    def test_ks_extremes(self):
        assert Vf.ks_statistic(np.zeros(50), stats.norm.cdf) >= 0.5
        x = np.random.default_rng(1).standard_normal(400) + 5
        assert Vf.ks_statistic(x, stats.norm.cdf) > 0.95

    def test_ks_matches_scipy(self):
        x = np.random.default_rng(2).standard_normal(300)
        assert Vf.ks_statistic(x, stats.norm.cdf) == pytest.approx(stats.kstest(x, "norm").statistic, abs=1e-14)

    def test_ad_closed_form(self):
        x = np.random.default_rng(3).standard_normal(300)
        # closed-form A^2 against a fully specified N(0, 1)
        u = np.sort(stats.norm.cdf(x))
        n = x.size
        i = np.arange(1, n + 1)
        a2 = -n - np.mean((2 * i - 1) * (np.log(u) + np.log1p(-u[::-1])))
        assert Vf.ad_statistic(x, stats.norm.cdf) == pytest.approx(a2, rel=1e-12)

    def test_too_few(self):
        with pytest.raises(ValueError):
            Vf.ks_statistic(np.zeros(5), stats.norm.cdf)
        with pytest.raises(ValueError):
            Vf.ad_statistic(np.zeros(5), stats.norm.cdf)

    def test_critical(self):
        assert Vf.ks_critical(400, 0.01) == pytest.approx(stats.kstwo.ppf(0.99, 400))
        assert 1.6 / 20 < Vf.ks_critical(400, 0.01) < 1.65 / 20


class TestConfig:
    def test_unknown_key(self):
        with pytest.raises(Vf.ConfigError):
            Vf.ExperimentConfig.from_dict({"experiment": "local-law", "colour": 1})

    def test_roundtrip(self):
        cfg = Vf.acceptance_config("edge-clt")
        back = Vf.ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg

    def test_measure_specs(self):
        assert Vf.build_measure({"kind": "two_atom", "a": 0.5}).atoms == [(-0.5, 0.5), (0.5, 0.5)]
        assert Vf.build_measure({"kind": "discrete", "atoms": [[0, 0.25], [1, 0.75]]}).mean() == 0.75
        with pytest.raises(Vf.ConfigError):
            Vf.build_measure({"kind": "cauchy"})
        with pytest.raises(Vf.ConfigError):
            Vf.build_measure({"kind": "jacobi", "a": -2, "b": 0})

    def test_workers(self, monkeypatch):
        monkeypatch.setenv("DSCL_WORKERS", "3")
        assert Vf.resolve_workers(None) == 3
        assert Vf.resolve_workers(2) == 2


class TestEnvelopes:
    def test_rigidity_bound(self):
        N, q, eps = 1000, 10.0, 0.1
        b, small_ = Vf.rigidity_bound(N, q, eps)
        cross = N ** eps * (1 + N * q ** -3) ** 2
        j = 500
        assert not small_[j - 1]
        assert b[j - 1] == pytest.approx(N ** eps * (j ** (-1 / 3) * N ** (-2 / 3) + q ** -2))
        assert small_[0] and b[0] == pytest.approx(N ** eps * 2 * N ** (-2 / 3))
        assert b[-1] == b[0]
        assert np.count_nonzero(small_) == 2 * int(math.floor(cross))
        # bulk value is of order N^eps q^-2
        assert b[j - 1] / (N ** eps * q ** -2) == pytest.approx(1, abs=0.15)

    def test_dos_envelope(self):
        p = D.ModelParams(N=2000, q=2000 ** (1 / 3), lam=0.5)
        ed = D.EdgeData(-2.0, 2.0, -1, 1, 1, -1, math.inf)
        base = p.q ** -3 + 2000 ** (-2 / 3)
        env = Vf.dos_envelope(np.array([0.0, 2.0]), p, ed, 0.1)
        k = 2.0
        ref0 = 2000 ** 0.1 * (1 / 2000 + p.q ** -4.5 + min(k * math.sqrt(base), p.q ** -2 * math.sqrt(k + base)))
        assert env[0] == pytest.approx(ref0)
        assert env[1] == pytest.approx(2000 ** 0.1 * (1 / 2000 + p.q ** -4.5))


class TestRunners:
    def test_local_law_report(self, tmp_path):
        rep = Vf.run_experiment(small("local-law"))
        assert rep.check("N=200 sup_ratio violation fraction").gated
        files = rep.write(tmp_path)
        assert sorted(f.name for f in files) == sorted(
            ["local-law.report.json", "local-law.checks.csv", "local-law.data.csv", "local-law.table.txt"])
        d = json.loads((tmp_path / "local-law.report.json").read_text())
        assert d["verdict"] in ("pass", "fail") and d["config"]["replicas"] == 3
        assert len(rep.data["sup_ratio"]) == 3

    def test_worker_invariance(self):
        a = Vf.run_experiment(small("dos", replicas=2, n_dos=50, workers=1)).data
        b = Vf.run_experiment(small("dos", replicas=2, n_dos=50, workers=2)).data
        assert a == b

    def test_check_semantics(self):
        c = Vf.Check("x", 0.5, 1.0)
        assert c.ratio == 0.5 and c.passed
        assert not Vf.Check("x", 1.0 + 1e-12, 1.0).passed
        rep = Vf.Report("t", {}, [c, Vf.Check("y", 5, 1, gated=False)])
        assert rep.verdict

    def test_rigidity_phi_precondition(self):
        with pytest.raises(Vf.ConfigError):
            Vf.run_experiment(small("rigidity", phi=0.2))

    def test_edge_clt_separation(self):
        with pytest.raises(Vf.ConfigError):
            Vf.run_experiment(small("edge-clt", phi=0.45, law="bernoulli-gaussian", separation=3.0))

    def test_endpoint_deterministic(self):
        rep = Vf.run_experiment(small("endpoint-clt", potential="deterministic", replicas=4))
        c = rep.check("N=200 deterministic spread of L_tilde")
        assert c.measured == 0.0 and rep.verdict

    def test_p_diag_small(self):
        rep = Vf.run_experiment(small("p-diag", replicas=1, n_bulk_E=3))
        assert rep.check("N=200 max disagreement of the two paths").passed

    def test_edge_bound_small(self):
        rep = Vf.run_experiment(small("edge-bound", replicas=4))
        assert len(rep.data["normW"]) == 4
        assert all(1.5 < w < 3 for w in rep.data["normW"])

    def test_delocalization_small(self):
        rep = Vf.run_experiment(small("delocalization", replicas=2))
        assert all(x >= 1 for x in rep.data["max_sup"])
