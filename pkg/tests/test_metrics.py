import csv
import io
import json
from fractions import Fraction

import pytest
import sympy as sp

from conftest import make_state
from hybridml.errors import ConfigError
from hybridml.metrics import (
    ROW_COLUMNS,
    AnalyticParams,
    analytic_comm,
    analytic_comp,
    derive_params,
    export,
    render,
    summarize,
    validate,
)
from hybridml.nn import count_flops
from hybridml.protocols import run_experiment


class TestFormulas:
    def test_fl_and_hsfl(self):
        p = AnalyticParams(N=4, W_bytes=1000, M=4, m=1)
        assert analytic_comm("fl", p) == 8000
        assert analytic_comm("hsfl", p) == 2000
        assert analytic_comm("cl", p) == 0

    def test_hsfl_exact_fraction(self):
        p = AnalyticParams(N=3, W_bytes=7, M=4, m=1)
        assert analytic_comm("hsfl", p) == Fraction(42, 4)

    def test_split_formulas(self):
        p = AnalyticParams(N=4, D=100, W_bytes=1000, b=8, gamma=Fraction(1, 4))
        assert analytic_comm("sl", p) == 4 * (Fraction(2 * 32 * 100, 4) + 250)
        assert analytic_comm("hfsl", p) == 8 * (Fraction(32 * 100, 4) + 250)

    def test_comp(self):
        p = AnalyticParams(N=4, F=100, lambda_=Fraction(1, 5))
        assert analytic_comp("fl", p) == 400
        assert analytic_comp("hsfl", p) == 400
        assert analytic_comp("sl", p) == 80
        assert analytic_comp("cl", p) == 100

    def test_missing_param(self):
        with pytest.raises(ConfigError, match="W_bytes"):
            analytic_comm("fl", AnalyticParams(N=4))

    @pytest.mark.parametrize("kw", [{"M": 2, "m": 3}, {"gamma": 1}, {"lambda_": 0}, {"N": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigError):
            AnalyticParams(**kw)

    def test_symbolic_hfsl_minus_sl(self):
        N, D, W, b, g, s = sp.symbols("N D W b gamma s", positive=True)
        p = AnalyticParams(N=N, D=D, W_bytes=W, b=b, gamma=g, scalar_bytes=s)
        assert sp.simplify(analytic_comm("hfsl", p) - analytic_comm("sl", p) - N * g * W) == 0

    def test_derive_params(self):
        state = make_state("sl")
        p = derive_params(state)
        assert p.N == 4 and p.b == 8
        assert p.D == len(state.train)
        assert p.F == Fraction(count_flops(state.spec, p.D), 4)
        assert p.gamma == state.plan.gamma


def _runs(archs, rounds=2, **kw):
    out = []
    for arch in archs:
        state = make_state(arch, **kw)
        run = run_experiment(state, rounds)
        run.state = state
        out.append(run)
    return out


class TestValidate:
    @pytest.mark.parametrize("arch", ["cl", "fl", "sl", "hsfl", "hfsl"])
    def test_zero_delta(self, arch):
        kw = {"M": 4, "m": 2} if arch == "hsfl" else {}
        state = make_state(arch, **kw)
        run = run_experiment(state, 2, evaluate_every=0)
        checks = validate(state, run.traces)
        assert checks and all(c.passed and c.delta == 0 for c in checks)

    def test_u_shaped(self):
        state = make_state("sl", hidden=(8, 6), label_sharing=False)
        checks = validate(state, run_experiment(state, 1, evaluate_every=0).traces)
        assert all(c.delta == 0 for c in checks)

    def test_include_labels(self):
        state = make_state("hfsl")
        traces = run_experiment(state, 1, evaluate_every=0).traces
        assert all(c.delta == 0 for c in validate(state, traces, include_labels=True))

    def test_exclude_handoffs(self):
        state = make_state("sl")
        traces = run_experiment(state, 1, evaluate_every=0).traces
        checks = validate(state, traces, include_labels=True, include_handoffs=False)
        assert all(c.delta == 0 for c in checks)

    def test_summary_matches_validate_with_labels(self):
        state = make_state("hfsl")
        run = run_experiment(state, 2)
        run.state = state
        summary = summarize([run], include_labels=True).summary["architectures"]["hfsl"]
        assert summary["delta_comm_bytes"] == 0

    def test_phantom_detected(self):
        state = make_state("fl")
        state.phantom_bytes = 123
        checks = validate(state, run_experiment(state, 1, evaluate_every=0).traces)
        bad = [c for c in checks if not c.passed]
        assert len(bad) == 1 and bad[0].delta == 123
        assert "phantom" in bad[0].events[0]

    def test_broadcast_not_enforced(self):
        state = make_state("fl")
        checks = validate(state, run_experiment(state, 1, evaluate_every=0).traces, convention="broadcast")
        comm = [c for c in checks if c.name.startswith("comm")]
        assert comm[0].delta < 0 and comm[0].passed and "broadcast" in comm[0].note

    def test_failures_reported_only(self):
        state = make_state("fl", topology={"clients": 4, "failure_prob": 0.5})
        checks = validate(state, run_experiment(state, 3, evaluate_every=0).traces)
        assert all(c.passed for c in checks)
        assert any("failed units" in c.note for c in checks)

    def test_bad_convention(self):
        state = make_state("fl")
        with pytest.raises(ConfigError):
            validate(state, [], convention="multicast")


class TestReports:
    def test_columns_and_cumulative(self):
        report = summarize(_runs(["fl"], rounds=3))
        assert [r["round"] for r in report.rows] == [1, 2, 3]
        assert set(report.rows[0]) == set(ROW_COLUMNS)
        assert report.rows[-1]["comm_bytes_cum"] == sum(r["comm_bytes"] for r in report.rows)
        assert report.summary["architectures"]["fl"]["delta_comm_bytes"] == 0

    def test_csv_json_consistent(self):
        report = summarize(_runs(["fl", "hsfl"], M=2, m=1))
        rows = list(csv.DictReader(io.StringIO(render(report, "csv"))))
        doc = json.loads(render(report, "json"))
        assert len(rows) == len(doc["rounds"]) == 4
        for r, j in zip(rows, doc["rounds"]):
            assert int(r["comm_bytes"]) == j["comm_bytes"]
            assert r["sim_seconds_exact"] == j["sim_seconds_exact"]
        cmp = doc["summary"]["comparisons"][0]
        assert Fraction(cmp["comm_ratio"]) == Fraction(1, 2)

    def test_export_deterministic(self, tmp_path):
        texts = []
        for i in range(2):
            report = summarize(_runs(["sl", "hfsl"]))
            for fmt in ("csv", "json"):
                texts.append(export(report, tmp_path / f"r{i}.{fmt}", fmt).read_bytes())
        assert texts[0] == texts[2] and texts[1] == texts[3]
        assert texts[1].endswith(b"\n")

    def test_unknown_format(self):
        with pytest.raises(ConfigError):
            render(summarize(_runs(["fl"], rounds=1)), "xml")

    def test_unwritable(self, tmp_path):
        report = summarize(_runs(["fl"], rounds=1))
        with pytest.raises(OSError):
            export(report, tmp_path / "missing" / "r.csv", "csv")

    def test_empty(self):
        with pytest.raises(ConfigError):
            summarize([])
