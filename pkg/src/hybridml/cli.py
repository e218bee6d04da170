"""Command-line front end: ``hybridml run | compare | validate | gradcheck``.

Exit codes: 0 success, 1 runtime error, 2 configuration error,
3 accounting validation failure, 4 gradient check failure.
"""
from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_keys_help, load_config
from .errors import ConfigError, HybridMLError
from .metrics import render, summarize, validate
from .nn import Batch, ModelSpec, grad_check_detail, init_model
from .protocols import build_state, load_datasets, run_experiment
from .protocols.runner import ROUND_FUNCTIONS

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_VALIDATION, EXIT_GRADCHECK = 0, 1, 2, 3, 4

OUT_ENV = "HYBRIDML_OUT_DIR"

NAMED_SPECS = {
    "default": [16, 32, 4],
    "tiny": [4, 8, 3],
    "deep": [8, 16, 16, 4],
    "wide": [32, 128, 10],
}

GRADCHECK_TOL = 1e-4

EPILOG = f"""\
configuration keys (YAML or JSON; unknown keys are rejected):
{config_keys_help()}

topology section:
  clients          integer (cellular clients c0..) or list of {{id, kind: cellular|d2d, edge, compute,
                   uplink, downlink, failure_prob}}
  edge_servers     list of ids or {{id, neighbors, compute}}; default one edge 'edge0'
  clusters         list of {{id, edge, chain: [client ids]}}; the last chain member uploads
  rates            {{uplink, downlink, d2d, backbone}} in bytes/s (default 10e6, 50e6, 5e6, 100e6)
  compute          {{client, edge, main}} in FLOP/s
  failure_prob     number for all client links, or {{uplink, downlink, d2d, backbone}}
  main_server      main server id (default 'main')

environment:
  {OUT_ENV}  default report directory when output.dir and --out are unset

exit codes: 0 ok, 1 runtime error, 2 config error, 3 validation failure, 4 gradient check failure
"""


def parse_spec_descriptor(desc: str) -> ModelSpec:
    """A named spec (see ``NAMED_SPECS``) or ``mlp:16,32,4`` with optional ``:identity``."""
    if desc in NAMED_SPECS:
        return ModelSpec.mlp(NAMED_SPECS[desc])
    if not desc.startswith("mlp:"):
        raise ConfigError(f"unknown spec {desc!r}; use one of {sorted(NAMED_SPECS)} or mlp:W0,W1,...")
    body = desc[4:]
    activation = "relu"
    if ":" in body:
        body, activation = body.split(":", 1)
    try:
        widths = [int(w) for w in body.split(",")]
    except ValueError:
        raise ConfigError(f"bad widths in spec {desc!r}") from None
    if len(widths) < 2 or min(widths) < 1:
        raise ConfigError(f"spec {desc!r} needs at least two positive widths")
    if activation not in ("relu", "identity"):
        raise ConfigError(f"unknown activation {activation!r}")
    return ModelSpec.mlp(widths, activation)


def gradcheck_tolerance(eps: float) -> float:
    """1e-4, relaxed in proportion to 1e-6/eps below eps=1e-6 where rounding dominates."""
    return GRADCHECK_TOL * max(1.0, 1e-6 / eps)


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", required=True, help="experiment config file (.yaml/.yml/.json)")
    p.add_argument("--rounds", type=int, help="override protocol.rounds")
    for purpose in ("init", "data", "segments", "failures"):
        p.add_argument(f"--seed.{purpose}", dest=f"seed_{purpose}", type=int, help=f"override seeds.{purpose}")
    p.add_argument("--out", help=f"report directory (overrides output.dir and ${OUT_ENV})")
    p.add_argument(
        "--format", action="append", choices=["csv", "json"], help="report format; repeat for both"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hybridml",
        description="Simulate FL, SL, HSFL and HFSL training with byte, FLOP and time accounting.",
        epilog=EPILOG,
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run the configured architecture", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("--arch", choices=sorted(ROUND_FUNCTIONS), help="override architecture")

    p = sub.add_parser("compare", help="run several architectures on identical data and seeds", epilog=EPILOG,
                       formatter_class=argparse.RawDescriptionHelpFormatter)
    _add_common(p)
    p.add_argument("--archs", help="comma-separated architectures (default: the config's compare list)")

    p = sub.add_parser("validate", help="check simulated bytes and FLOPs against the closed-form costs",
                       epilog=EPILOG, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("--config", required=True, help="experiment config file")
    p.add_argument("--rounds", type=int, help="rounds to simulate (default 2)")
    p.add_argument("--archs", help="comma-separated architectures (default: compare list or architecture)")
    p.add_argument("--inject-phantom-bytes", type=int, default=0, help=argparse.SUPPRESS)

    p = sub.add_parser(
        "gradcheck",
        help="compare backprop with central finite differences",
        description=(
            "Exit 0 if the max relative error is below 1e-4, else exit 4. For eps below 1e-6 the "
            "difference quotient is dominated by floating-point cancellation, so the tolerance is "
            "relaxed to 1e-4 * (1e-6 / eps)."
        ),
    )
    p.add_argument("--spec", default="default", help=f"{', '.join(sorted(NAMED_SPECS))} or mlp:W0,W1,...[:identity]")
    p.add_argument("--seed", type=int, default=0, help="model and batch seed")
    p.add_argument("--eps", type=float, default=1e-4, help="finite-difference step in (0, 1e-2]")
    p.add_argument("--batch", type=int, default=8, help="batch size")
    return parser


def _apply_overrides(cfg: ExperimentConfig, args) -> ExperimentConfig:
    if getattr(args, "rounds", None) is not None:
        cfg.protocol.rounds = args.rounds
    for purpose in ("init", "data", "segments", "failures"):
        v = getattr(args, f"seed_{purpose}", None)
        if v is not None:
            setattr(cfg.seeds, purpose, v)
    if getattr(args, "format", None):
        cfg.output.formats = list(dict.fromkeys(args.format))
    if getattr(args, "arch", None):
        cfg.architecture = args.arch
    cfg.validate()
    return cfg


def _out_dir(cfg: ExperimentConfig, args) -> Path:
    d = getattr(args, "out", None) or cfg.output.dir or os.environ.get(OUT_ENV) or "out"
    return Path(d)


def _print_round(arch: str, i: int, result) -> None:
    t = result.trace
    acc = "n/a" if result.accuracy is None else f"{result.accuracy:.4f}"
    flag = " ABORTED" if t.aborted else ""
    print(
        f"{arch:>4} round {i + 1:>3}: comm {t.comm_bytes():>12} B  client FLOPs {t.flops('client'):>14}  "
        f"sim {float(t.sim_seconds):.6f} s  acc {acc}{flag}"
    )


def _run_archs(cfg: ExperimentConfig, archs: list[str], verbose: bool = True):
    datasets = load_datasets(cfg)
    runs = []
    for arch in archs:
        state = build_state(cfg, arch, datasets)
        runs.append(run_experiment(state, cfg.protocol.rounds, on_round=(lambda i, r, a=arch: _print_round(a, i, r)) if verbose else None))
    return runs


def _write_reports(cfg: ExperimentConfig, args, runs) -> None:
    report = summarize(runs, cfg.accounting.convention, cfg.accounting.include_labels, cfg.accounting.include_handoffs)
    out = _out_dir(cfg, args)
    out.mkdir(parents=True, exist_ok=True)
    for fmt in cfg.output.formats:
        path = out / f"{cfg.output.prefix}.{fmt}"
        path.write_text(render(report, fmt), encoding="utf-8")
        print(f"wrote {path}")
    for c in report.summary["comparisons"]:
        extras = ", ".join(f"{k} {v}" for k, v in c.items() if k not in ("base", "other"))
        print(f"{c['other']} vs {c['base']}: {extras}")


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    runs = _run_archs(cfg, [cfg.architecture])
    _write_reports(cfg, args, runs)
    return EXIT_OK


def _arch_list(text: str | None, fallback: list[str]) -> list[str]:
    archs = [a.strip() for a in text.split(",") if a.strip()] if text else list(fallback)
    for a in archs:
        if a not in ROUND_FUNCTIONS:
            raise ConfigError(f"unknown architecture {a!r} in architecture list")
    if not archs:
        raise ConfigError("no architectures to run; set 'compare' or pass --archs")
    return list(dict.fromkeys(archs))


def cmd_compare(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    runs = _run_archs(cfg, _arch_list(args.archs, cfg.compare or [cfg.architecture]))
    _write_reports(cfg, args, runs)
    return EXIT_OK


def _degenerate_hsfl(cfg: ExperimentConfig, state) -> bool:
    p = cfg.protocol
    return p.M == 1 and p.m == 1 and p.vertical_rounds == 1 and not p.horizontal_enabled and not state.topology.has_d2d


def cmd_validate(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    rounds = args.rounds if args.rounds is not None else 2
    archs = _arch_list(args.archs, cfg.compare or [cfg.architecture])
    datasets = load_datasets(cfg)
    ok = True
    for arch in archs:
        state = build_state(cfg, arch, datasets)
        state.topology = state.topology.with_failure_prob(0.0)
        state.phantom_bytes = args.inject_phantom_bytes
        run = run_experiment(state, rounds, evaluate_every=0)
        for chk in validate(
            state, run.traces, cfg.accounting.convention, cfg.accounting.include_labels, cfg.accounting.include_handoffs
        ):
            status = "ok" if chk.passed else "FAIL"
            note = f"  ({chk.note})" if chk.note else ""
            print(f"{status:>4} {arch:>4} {chk.name}: simulated {chk.simulated} analytic {chk.analytic} "
                  f"delta {chk.delta}{note}")
            if not chk.passed:
                ok = False
                for ev in chk.events:
                    print(f"       {ev}")
        if arch == "hsfl" and _degenerate_hsfl(cfg, state):
            fl = build_state(cfg, "fl", datasets)
            fl.topology = fl.topology.with_failure_prob(0.0)
            run_experiment(fl, rounds, evaluate_every=0)
            same = fl.global_model.params_equal(state.global_model)
            print(f"{'ok' if same else 'FAIL':>4} hsfl M=1,m=1 matches fl bitwise after {rounds} rounds")
            ok = ok and same
    print("validation passed" if ok else "validation FAILED")
    return EXIT_OK if ok else EXIT_VALIDATION


def cmd_gradcheck(args) -> int:
    spec = parse_spec_descriptor(args.spec)
    if not 0 < args.eps <= 1e-2:
        raise ConfigError("--eps must lie in (0, 1e-2]")
    if args.batch < 1:
        raise ConfigError("--batch must be >= 1")
    model = init_model(spec, args.seed)
    rng = np.random.default_rng(np.random.SeedSequence([args.seed, 0x6C]))
    batch = Batch(rng.normal(size=(args.batch, spec.input_width)), rng.integers(0, spec.output_width, args.batch))
    res = grad_check_detail(model, batch, args.eps, seed=args.seed)
    tol = gradcheck_tolerance(args.eps)
    print(
        f"spec {args.spec}: {spec.param_count} params, checked {res.checked}, skipped {res.skipped_kinks} at ReLU kinks; "
        f"max relative error {res.max_relative_error:.3e} (tolerance {tol:.1e})"
    )
    if res.max_relative_error < tol:
        return EXIT_OK
    kind, layer, idx = res.worst
    print(f"worst coordinate: layer {layer} {kind} {idx}: analytic {res.analytic:.10e} numeric {res.numeric:.10e}")
    return EXIT_GRADCHECK


COMMANDS = {"run": cmd_run, "compare": cmd_compare, "validate": cmd_validate, "gradcheck": cmd_gradcheck}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (HybridMLError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
