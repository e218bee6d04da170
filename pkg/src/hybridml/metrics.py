"""Closed-form cost formulas checked against simulated traces, plus report export.

The formulas use only ``+ - * /`` on their inputs so they accept exact
fractions or symbolic values as well as ints. Integer division is
promoted to an exact fraction.
"""
from __future__ import annotations

import csv
import io
import json
import numbers
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Sequence

from .errors import ConfigError
from .nn import count_flops
from .partition import segment_length
from .trace import CONVENTIONS, HANDOFF, LABELS, RoundTrace

ARCHS = ("cl", "fl", "sl", "hsfl", "hfsl")


@dataclass(frozen=True)
class AnalyticParams:
    """N clients, D samples per round, |W| bytes, cut width b, client share gamma,
    M/m segments, F training FLOPs per client share, client FLOP fraction lambda_."""

    N: Any = None
    D: Any = None
    W_bytes: Any = None
    b: Any = None
    scalar_bytes: Any = 4
    gamma: Any = None
    M: Any = None
    m: Any = None
    F: Any = None
    lambda_: Any = None

    def __post_init__(self):
        def num(v):
            return isinstance(v, numbers.Number)

        if num(self.M) and num(self.m) and not 1 <= self.m <= self.M:
            raise ConfigError(f"need 1 <= m <= M, got m={self.m}, M={self.M}")
        for name in ("gamma", "lambda_"):
            v = getattr(self, name)
            if num(v) and not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        for name in ("N", "D", "W_bytes", "b", "scalar_bytes", "M", "F"):
            v = getattr(self, name)
            if num(v) and not v > 0:
                raise ConfigError(f"{name} must be positive, got {v}")


_NEEDS_COMM = {
    "cl": (),
    "fl": ("N", "W_bytes"),
    "hsfl": ("N", "W_bytes", "M", "m"),
    "sl": ("N", "D", "W_bytes", "b", "scalar_bytes", "gamma"),
    "hfsl": ("N", "D", "W_bytes", "b", "scalar_bytes", "gamma"),
}
_NEEDS_COMP = {
    "cl": ("F",),
    "fl": ("N", "F"),
    "hsfl": ("N", "F"),
    "sl": ("N", "F", "lambda_"),
    "hfsl": ("N", "F", "lambda_"),
}


def _div(a, b):
    if isinstance(a, numbers.Rational) and isinstance(b, numbers.Rational):
        return Fraction(a) / Fraction(b)
    return a / b


def _require(arch: str, p: AnalyticParams, table) -> None:
    if arch not in table:
        raise ConfigError(f"unknown architecture {arch!r}")
    missing = [s for s in table[arch] if getattr(p, s) is None]
    if missing:
        raise ConfigError(f"{arch} formula needs {', '.join(missing)}")


def analytic_comm(arch: str, p: AnalyticParams):
    """Bytes per round on client links: 2N|W|, 2Nm|W|/M, N(2bD/N + g|W|), 2N(bD/N + g|W|)."""
    _require(arch, p, _NEEDS_COMM)
    if arch == "cl":
        return 0
    if arch == "fl":
        return 2 * p.N * p.W_bytes
    if arch == "hsfl":
        return _div(2 * p.N * p.m * p.W_bytes, p.M)
    per_sample = p.b * p.scalar_bytes
    if arch == "sl":
        return p.N * (_div(2 * per_sample * p.D, p.N) + p.gamma * p.W_bytes)
    return 2 * p.N * (_div(per_sample * p.D, p.N) + p.gamma * p.W_bytes)


def analytic_comp(arch: str, p: AnalyticParams):
    """Client training FLOPs per round: NF for FL/HSFL, N*lambda*F for SL/HFSL, F for CL."""
    _require(arch, p, _NEEDS_COMP)
    if arch == "cl":
        return p.F
    if arch in ("fl", "hsfl"):
        return p.N * p.F
    return p.N * p.lambda_ * p.F


def derive_params(state) -> AnalyticParams:
    """Formula inputs for the configured experiment.

    D counts samples processed per round (shard sizes times local epochs).
    F is the training FLOPs of the full model over D/N samples; CL trains
    on a single node, so there N is 1. For HSFL, |W| is the padded size
    M*ceil(P/M) scalars, which is what segments actually carry.
    """
    spec, proto, plan = state.spec, state.protocol, state.plan
    N = 1 if state.arch == "cl" else state.n_clients
    D = sum(len(state.shards[c]) for c in state.topology.clients) * proto.local_epochs
    W = spec.model_bytes
    if state.arch == "hsfl":
        W = proto.M * segment_length(spec.param_count, proto.M) * spec.param_dtype_bytes
    kw: dict[str, Any] = dict(N=N, D=D, W_bytes=W, scalar_bytes=spec.param_dtype_bytes)
    kw["F"] = Fraction(count_flops(spec, D), N)
    if state.arch == "hsfl":
        kw.update(M=proto.M, m=proto.m)
    if plan is not None:
        client_flops = count_flops(plan.client_spec, 1) + (count_flops(plan.tail_spec, 1) if plan.tail_spec else 0)
        kw.update(b=plan.exchange_width, gamma=plan.gamma, lambda_=Fraction(client_flops, count_flops(spec, 1)))
    return AnalyticParams(**kw)


# -- validation ---------------------------------------------------------------


@dataclass
class Check:
    name: str
    arch: str
    simulated: Any
    analytic: Any
    exact: bool  # whether a nonzero delta counts as a failure
    events: list[str] = field(default_factory=list)
    note: str = ""

    @property
    def delta(self):
        return self.simulated - self.analytic

    @property
    def passed(self) -> bool:
        return not self.exact or self.delta == 0


def formula_bytes(trace: RoundTrace, convention: str, include_labels: bool, include_handoffs: bool = True) -> int:
    """Client-tier bytes mapped the way the formulas count them.

    Edge-relayed handoffs count their first leg only; labels are left out
    unless requested and handoffs can be left out entirely.
    """
    total = 0
    for t in trace.transmissions:
        if t.tier != "client":
            continue
        if t.kind == HANDOFF and (t.relay_leg or not include_handoffs):
            continue
        if t.kind == LABELS and not include_labels:
            continue
        total += t.charged(convention)
    return total


def round_prediction(state, include_labels: bool = False, include_handoffs: bool = True):
    """Analytic client-link bytes and trainer FLOPs for one round of ``state.arch``."""
    arch = state.arch
    p = derive_params(state)
    reps = state.protocol.vertical_rounds if arch == "hsfl" else 1
    comm = analytic_comm(arch, p) * reps
    if include_labels and arch in ("sl", "hfsl") and state.plan.label_sharing:
        comm += p.D * state.label_bytes
    if not include_handoffs and arch == "sl":
        comm -= p.N * p.gamma * p.W_bytes
    return comm, analytic_comp(arch, p) * reps


def _suspects(trace: RoundTrace) -> list[str]:
    known = {"model", "segments", "activation", "cut_grad", "labels", "handoff", "pieces"}
    return [
        f"round {trace.round_index} event #{t.event_id} {t.kind} {t.src}->{t.dst} {t.nbytes} B"
        for t in trace.transmissions
        if t.phantom or t.kind not in known
    ]


def validate(
    state,
    traces: Sequence[RoundTrace],
    convention: str = "per_client",
    include_labels: bool = False,
    include_handoffs: bool = True,
) -> list[Check]:
    """Compare simulated client-link bytes and client FLOPs with the formulas, per round.

    Byte checks are exact under the per-client convention when no unit
    failed and every client is cellular; otherwise the delta is reported
    only.
    """
    if convention not in CONVENTIONS:
        raise ConfigError(f"unknown convention {convention!r}")
    arch = state.arch
    comm, comp = round_prediction(state, include_labels, include_handoffs)
    d2d = state.topology.has_d2d
    checks = []
    for tr in traces:
        failed = tr.failed_units > 0
        exact = convention == "per_client" and not failed and not d2d
        note = []
        if convention != "per_client":
            note.append(f"{convention} convention: delta reported, not enforced")
        if failed:
            note.append(f"{tr.failed_units} failed units")
        if d2d:
            note.append("D2D links have no closed form")
        sim = formula_bytes(tr, convention, include_labels, include_handoffs)
        chk = Check(f"comm round {tr.round_index}", arch, sim, comm, exact, note="; ".join(note))
        if sim != comm:
            chk.events = _suspects(tr) or [f"{k}: {v} B" for k, v in tr.bytes_by_kind(convention).items()]
        checks.append(chk)
        flops = tr.flops("server" if arch == "cl" else "client")
        comp_note = "; ".join(n for n in note if "convention" not in n)
        checks.append(Check(f"comp round {tr.round_index}", arch, flops, comp, not failed and not d2d, note=comp_note))
    return checks


# -- reports ------------------------------------------------------------------

ROW_COLUMNS = (
    "arch",
    "round",
    "convention",
    "comm_bytes",
    "comm_bytes_cum",
    "backbone_bytes",
    "client_flops",
    "client_flops_cum",
    "server_flops",
    "sim_seconds",
    "sim_seconds_exact",
    "sim_seconds_cum",
    "failed_units",
    "aborted",
    "accuracy",
)


@dataclass
class Report:
    convention: str
    rows: list[dict]
    summary: dict


def _num(x):
    """JSON/CSV-friendly value: ints stay ints, integral fractions become ints."""
    if isinstance(x, Fraction):
        return x.numerator if x.denominator == 1 else float(x)
    return x


def _exact_str(x) -> str:
    return str(Fraction(x))


def summarize(
    runs: Sequence, convention: str = "per_client", include_labels: bool = False, include_handoffs: bool = True
) -> Report:
    """Per-round rows and per-architecture totals for one or more runs.

    ``runs`` are :class:`~hybridml.protocols.runner.ExperimentRun` objects
    with their final state attached.
    """
    if not runs or not any(r.traces for r in runs):
        raise ConfigError("a report needs at least one round")
    rows: list[dict] = []
    archs: dict[str, dict] = {}
    for run in runs:
        comm_cum, flops_cum, sec_cum = 0, 0, Fraction(0)
        for tr, acc in zip(run.traces, run.accuracies):
            comm = tr.comm_bytes(convention)
            flops = tr.flops("client")
            comm_cum += comm
            flops_cum += flops
            sec_cum += tr.sim_seconds
            rows.append(
                {
                    "arch": run.arch,
                    "round": tr.round_index + 1,
                    "convention": convention,
                    "comm_bytes": comm,
                    "comm_bytes_cum": comm_cum,
                    "backbone_bytes": tr.comm_bytes(convention, "backbone"),
                    "client_flops": flops,
                    "client_flops_cum": flops_cum,
                    "server_flops": tr.flops("server"),
                    "sim_seconds": float(tr.sim_seconds),
                    "sim_seconds_exact": _exact_str(tr.sim_seconds),
                    "sim_seconds_cum": float(sec_cum),
                    "failed_units": tr.failed_units,
                    "aborted": tr.aborted,
                    "accuracy": acc,
                }
            )
        n = len(run.traces)
        per_comm, per_comp = round_prediction(run.state, include_labels, include_handoffs)
        analytic_c, analytic_f = per_comm * n, per_comp * n
        sim_formula = sum(formula_bytes(t, convention, include_labels, include_handoffs) for t in run.traces)
        trainer_flops = sum(t.flops("server" if run.arch == "cl" else "client") for t in run.traces)
        archs[run.arch] = {
            "rounds": n,
            "convention": convention,
            "comm_bytes": comm_cum,
            "comm_bytes_formula_mapped": sim_formula,
            "analytic_comm_bytes": _num(analytic_c),
            "delta_comm_bytes": _num(sim_formula - analytic_c),
            "client_flops": flops_cum,
            "analytic_client_flops": _num(analytic_f),
            "delta_client_flops": _num(trainer_flops - analytic_f),
            "server_flops": sum(t.flops("server") for t in run.traces),
            "sim_seconds": float(sec_cum),
            "sim_seconds_exact": _exact_str(sec_cum),
            "initial_accuracy": run.initial_accuracy,
            "final_accuracy": run.accuracies[-1] if run.accuracies else None,
            "aborted_rounds": sum(1 for t in run.traces if t.aborted),
        }
    names = list(archs)
    comparisons = []
    base = names[0]
    for other in names[1:]:
        a, b = archs[base], archs[other]
        entry = {"base": base, "other": other}
        if a["comm_bytes"]:
            entry["comm_ratio"] = _exact_str(Fraction(b["comm_bytes"], a["comm_bytes"]))
        ta, tb = Fraction(a["sim_seconds_exact"]), Fraction(b["sim_seconds_exact"])
        if tb:
            entry["time_ratio_base_over_other"] = _exact_str(ta / tb)
        comparisons.append(entry)
    return Report(convention, rows, {"architectures": archs, "comparisons": comparisons})


def _csv_text(report: Report) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=list(ROW_COLUMNS), lineterminator="\n")
    w.writeheader()
    for row in report.rows:
        w.writerow({k: ("" if row[k] is None else row[k]) for k in ROW_COLUMNS})
    return buf.getvalue()


def _json_text(report: Report) -> str:
    doc = {"convention": report.convention, "rounds": report.rows, "summary": report.summary}
    return json.dumps(doc, indent=2) + "\n"


def render(report: Report, fmt: str) -> str:
    if fmt == "csv":
        return _csv_text(report)
    if fmt == "json":
        return _json_text(report)
    raise ConfigError(f"unknown report format {fmt!r}")


def export(report: Report, path, fmt: str) -> Path:
    """Write the report as UTF-8 text; raises OSError if the path is unwritable."""
    path = Path(path)
    text = render(report, fmt)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    return path
