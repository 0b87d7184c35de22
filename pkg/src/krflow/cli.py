"""Command-line front end: classify, run, certify, inspect.

Subcommands:

  nef          exact-arithmetic classification of a polarized surface
  flow         run the reduced flow, write artifacts, certify the run
  certify      replay the certificate checks from a stored run directory
  singularity  terminal-geometry reports for a stored run directory
  sweep        fan one config key over several values, one run each

A run directory is named by surface, polarization, and a short hash of the
canonical config, so identical configs land in the same place and a sweep
is reproducible file by file.  Artifacts are plain JSON and CSV: a ledger
of accepted steps, a snapshot table dense enough to rebuild every stored
slice bit for bit, and the certificate.  Exit codes: 0 when everything
requested passed, 1 when a check failed, 2 for configuration or artifact
errors.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path
from typing import Optional

import numpy as np

from . import singularity as terminal
from .certificates import CHECK_NAMES, CertificateReport, certify_run
from .config import RunConfig, default_config, from_mapping, load_config
from .flow import (FlowRun, RunLedger, rescaled_run, run_flow,
                   state_from_potential)
from .picard import (DivisorClass, catalog, classify_contraction, intersect,
                     is_ample, self_intersection)
from .plots import write_flow_plots

OUTPUT_ROOT_ENV = "KRFLOW_OUTPUT_ROOT"
GLOBAL_T_END = 5.0        # CLI horizon for flows that never end on their own

SNAPSHOT_COLUMNS = ["t", "rho", "u", "v", "det_ratio"]


class CliError(Exception):
    """Configuration or artifact problem; maps to exit code 2."""


# ---------------------------------------------------------------- artifacts

def _dump_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, sort_keys=True, indent=2,
                               allow_nan=False) + "\n")


def write_run_artifacts(run_dir: Path, config: RunConfig, run: FlowRun,
                        report: Optional[CertificateReport] = None) -> Path:
    run_dir.mkdir(parents=True, exist_ok=True)
    _dump_json(run_dir / "config.json", config.as_dict())

    ledger = run.ledger.as_dict()
    ledger["metadata"] = {**ledger["metadata"],
                          "config_fingerprint": config.fingerprint()}
    _dump_json(run_dir / "ledger.json", ledger)

    # repr round-trips floats exactly, so a rebuilt slice matches bitwise
    rho = run.scenario.grid.nodes
    det0 = run.scenario.reference.det()
    with open(run_dir / "snapshots.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(SNAPSHOT_COLUMNS)
        for s in run.snapshots:
            ratio = s.g.det() / det0
            for j in range(run.scenario.grid.n):
                writer.writerow([repr(float(s.t)), repr(float(rho[j])),
                                 repr(float(s.u.values[j])),
                                 repr(float(s.v.values[j])),
                                 repr(float(ratio[j]))])
    index = [{"t": float(s.t), "degenerate": bool(s.degenerate),
              "step_count": int(s.step_count),
              "phi_residual": (float(s.phi_residual)
                               if math.isfinite(s.phi_residual) else None)}
             for s in run.snapshots]
    _dump_json(run_dir / "snapshots_index.json", index)

    if report is not None:
        _dump_json(run_dir / "certificate.json", report.as_dict())
    return run_dir


def load_run(run_dir) -> tuple:
    """Rebuild (config, run) from a run directory without re-flowing."""
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise CliError(f"{run_dir}: not a run directory")
    try:
        config = from_mapping(
            json.loads((run_dir / "config.json").read_text()))
        ledger_data = json.loads((run_dir / "ledger.json").read_text())
        index = json.loads((run_dir / "snapshots_index.json").read_text())
        metadata = ledger_data["metadata"]
        steps = ledger_data["steps"]
        termination = ledger_data["termination"]
        with open(run_dir / "snapshots.csv", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader, None)
            if header != SNAPSHOT_COLUMNS:
                raise ValueError(f"unexpected snapshot columns {header}")
            rows = list(reader)
    except FileNotFoundError as exc:
        raise CliError(f"{run_dir}: missing artifact {exc.filename}")
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise CliError(f"{run_dir}: cannot parse artifacts: {exc}")

    scenario = config.scenario()
    n = scenario.grid.n
    if not index or len(rows) != n * len(index):
        raise CliError(
            f"{run_dir}: snapshot table has {len(rows)} rows, expected "
            f"{n} x {len(index)} from the index")
    snapshots = []
    try:
        for i, meta in enumerate(index):
            chunk = rows[i * n:(i + 1) * n]
            u = np.array([float(row[2]) for row in chunk])
            snapshots.append(state_from_potential(
                scenario, float(meta["t"]), u,
                step_count=int(meta["step_count"]),
                degenerate=bool(meta["degenerate"])))
    except (IndexError, KeyError, ValueError) as exc:
        raise CliError(f"{run_dir}: cannot parse artifacts: {exc}")
    ledger = RunLedger(metadata=metadata, steps=list(steps),
                       termination=termination)
    run = FlowRun(scenario=scenario, config=config.flow, ledger=ledger,
                  snapshots=snapshots, final=snapshots[-1])
    return config, run


# ---------------------------------------------------------------- execution

def execute_run(config: RunConfig, output_root) -> tuple:
    """Flow, certify, persist; shared by `flow` and `sweep`."""
    scenario = config.scenario()
    flow_cfg = config.flow
    if flow_cfg.t_end is None and math.isinf(scenario.singular_time):
        flow_cfg = replace(flow_cfg, t_end=GLOBAL_T_END)
    run = run_flow(scenario, flow_cfg)
    rescale = None
    if config.rescale_factor is not None:
        rescale = rescaled_run(config.rescale_factor, scenario, flow_cfg)
    report = certify_run(run, t0=config.checks_t0, rescale=rescale,
                         enabled=config.checks_enabled)
    run_dir = Path(output_root) / config.run_name()
    write_run_artifacts(run_dir, config, run, report)
    if config.plots:
        write_flow_plots(run_dir / "plots", run)
    return run_dir, run, report


def _parse_literal(text: str):
    """JSON literal when it parses, bare string otherwise."""
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _config_from_args(args) -> RunConfig:
    try:
        config = load_config(args.config) if args.config else default_config()
    except OSError as exc:
        raise CliError(f"cannot read config: {exc}")
    overrides = {}
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {item!r}")
        overrides[key.strip()] = _parse_literal(value.strip())
    if getattr(args, "plots", False):
        overrides["outputs.plots"] = True
    if overrides:
        config = config.with_overrides(**overrides)
    return config


def _output_root(args, config: RunConfig) -> Path:
    # precedence: flag, then environment, then the config itself
    root = (getattr(args, "output_root", None)
            or os.environ.get(OUTPUT_ROOT_ENV)
            or config.output_dir)
    return Path(root)


# -------------------------------------------------------------- subcommands

def cmd_nef(args) -> int:
    surface = catalog(args.surface)
    ample = DivisorClass.from_strings(args.ample.split(","))
    if ample.rank != surface.rank:
        raise CliError(
            f"{surface.name} needs {surface.rank} coefficient(s), "
            f"got {ample.rank}")
    if not is_ample(ample, surface):
        lines = [f"error: ({args.ample}) is not ample on {surface.name}"]
        for name, ray in surface.curve_rays:
            lines.append(
                f"  pairing with {name}: {intersect(ample, ray, surface)}")
        lines.append(
            f"  self-intersection: {self_intersection(ample, surface)}")
        print("\n".join(lines), file=sys.stderr)
        return 2

    info = classify_contraction(ample, surface)
    print(f"surface = {surface.name}")
    print(f"ample = {', '.join(ample.to_strings())}")
    if info.r is None:
        # canonical class already nef: the flow needs no surgery at all
        print("r = inf")
        print("T = inf")
        print("kind = none_needed")
        return 0
    print(f"r = {info.r}")
    print(f"T = log(1 + r) = {info.time:.6f}")
    print(f"kind = {info.kind}")
    if info.contracted_ray_name is not None:
        print(f"contracted ray = {info.contracted_ray_name}")
        print(f"limit class = {', '.join(info.limit_class.to_strings())}")
    if info.discrepancy is not None:
        print(f"discrepancy = {info.discrepancy}")
    return 0


def cmd_flow(args) -> int:
    config = _config_from_args(args)
    root = _output_root(args, config)
    run_dir, run, report = execute_run(config, root)
    term = run.ledger.termination
    print(f"run directory: {run_dir}")
    print(f"scenario: {config.surface} [{', '.join(config.ample)}], "
          f"N = {config.n}, scheme = {run.config.scheme}")
    print(f"terminated: {term['reason']} at t = {term['t']:.6f} "
          f"after {term['steps']} steps")
    if run.t_numeric is not None:
        print(f"t_numeric = {run.t_numeric:.6f}")
    print(report.summary())
    return 0 if report.passed else 1


def cmd_certify(args) -> int:
    config, run = load_run(args.run_dir)
    enabled = (tuple(c.strip() for c in args.checks.split(","))
               if args.checks else config.checks_enabled)
    t0 = args.t0 if args.t0 is not None else config.checks_t0
    try:
        report = certify_run(run, t0=t0, enabled=enabled)
    except ValueError as exc:
        raise CliError(str(exc))
    _dump_json(Path(args.run_dir) / "certificate.json", report.as_dict())
    print(report.summary())
    return 0 if report.passed else 1


def cmd_singularity(args) -> int:
    _, run = load_run(args.run_dir)
    try:
        locus = terminal.locate_S0(run, threshold=args.threshold, t=args.t)
    except (KeyError, ValueError) as exc:
        raise CliError(str(exc))
    out = {"scenario_fingerprint": run.scenario.fingerprint(),
           "locus": locus.as_dict()}

    window = tuple(args.window) if args.window else (-12.0, -6.0)
    fit = probe = None
    if run.scenario.contraction.kind == "divisorial":
        # bad flag values (window, rho_cut) surface as hard errors here
        fit = terminal.fit_decay(run, window=window, t=args.t)
        out["decay_fit"] = fit.as_dict()
        probe = terminal.probe_pushforward(run, rho_cut=args.rho_cut)
        out["pushforward"] = probe.as_dict()
    else:
        # nothing to fit against without a contracted divisor; record why
        reason = (f"needs a divisorial contraction, run is "
                  f"'{run.scenario.contraction.kind}'")
        out["decay_fit"] = {"skipped": reason}
        out["pushforward"] = {"skipped": reason}

    path = Path(args.run_dir) / "singularity.json"
    _dump_json(path, out)

    print(f"locus: {locus.classification} ({len(locus.nodes)} node(s) "
          f"flagged at threshold {locus.threshold:.3e})")
    if fit is not None:
        print(f"decay fit on [{window[0]:g}, {window[1]:g}]: slope = "
              f"{fit.slope:.4f} (predicted {fit.predicted_exponent:g}), "
              f"residual = {fit.residual:.4f} -> "
              f"{'pass' if fit.passed else 'FAIL'}")
    else:
        print(f"decay fit: skipped ({out['decay_fit']['skipped']})")
    if probe is not None:
        lo, hi = probe.bounds
        print(f"pushforward bounds on rho >= {probe.rho_cut:g}: "
              f"[{lo:.4f}, {hi:.4f}], d1 sup = {probe.d1_sup:.4f}, "
              f"d2 sup = {probe.d2_sup:.4f}")
    else:
        print(f"pushforward: skipped ({out['pushforward']['skipped']})")
    print(f"report: {path}")
    return 0


def _sweep_worker(payload) -> dict:
    config_data, output_root = payload
    try:
        config = from_mapping(config_data)
        run_dir, run, report = execute_run(config, Path(output_root))
        term = run.ledger.termination
        return {"run_dir": str(run_dir), "passed": bool(report.passed),
                "reason": term["reason"], "t_numeric": run.t_numeric}
    except Exception as exc:    # workers report back, they do not die
        return {"error": f"{type(exc).__name__}: {exc}"}


def cmd_sweep(args) -> int:
    base = _config_from_args(args)
    root = _output_root(args, base)
    values = [_parse_literal(v.strip()) for v in args.values.split(",")]
    if not values:
        raise CliError("--values must name at least one value")
    payloads = []
    for value in values:
        cfg = base.with_overrides(**{args.param: value})
        payloads.append((cfg.as_dict(), str(root)))

    if args.workers > 1:
        with ProcessPoolExecutor(max_workers=args.workers) as pool:
            results = list(pool.map(_sweep_worker, payloads))
    else:
        results = [_sweep_worker(p) for p in payloads]

    all_ok = True
    print(f"sweep over {args.param}: {len(values)} run(s)")
    for value, res in zip(values, results):
        if "error" in res:
            all_ok = False
            print(f"  {value!s:>10}  ERROR  {res['error']}")
            continue
        all_ok = all_ok and res["passed"]
        tag = "pass" if res["passed"] else "FAIL"
        print(f"  {value!s:>10}  {tag:>5}  {res['run_dir']}")
    return 0 if all_ok else 1


# ------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="krflow",
        description="collapsing Kahler-Ricci flow laboratory on ruled "
                    "surfaces and tori")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("nef", help="classify the polarized surface")
    p.add_argument("surface", help="catalog name: P2, F<k>, or T2")
    p.add_argument("ample", help="ample coefficients, e.g. 4,-1")
    p.set_defaults(func=cmd_nef)

    def add_run_options(p):
        p.add_argument("--config", help="TOML or JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key, e.g. grid.n=1024")
        p.add_argument("--output-root", help="directory for run outputs "
                       f"(or ${OUTPUT_ROOT_ENV})")

    p = sub.add_parser("flow", help="run the flow and certify it")
    add_run_options(p)
    p.add_argument("--plots", action="store_true",
                   help="write SVG profile plots")
    p.set_defaults(func=cmd_flow)

    p = sub.add_parser("certify", help="replay checks from stored artifacts")
    p.add_argument("run_dir", help="run directory written by `flow`")
    p.add_argument("--t0", type=float,
                   help="metric-equivalence horizon (default: config)")
    p.add_argument("--checks", help="comma list from: "
                   + ", ".join(CHECK_NAMES))
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("singularity",
                       help="terminal locus, decay fit, pushforward probe")
    p.add_argument("run_dir", help="run directory written by `flow`")
    p.add_argument("--threshold", type=float,
                   help="absolute det-ratio cutoff for the locus")
    p.add_argument("--t", type=float,
                   help="snapshot time to inspect (default: final state)")
    p.add_argument("--window", type=float, nargs=2, metavar=("A", "B"),
                   help="rho window for the decay fit (default: -12 -6)")
    p.add_argument("--rho-cut", type=float, default=0.0,
                   help="left edge of the pushforward probe window")
    p.set_defaults(func=cmd_singularity)

    p = sub.add_parser("sweep", help="run one config across several values")
    add_run_options(p)
    p.add_argument("--param", required=True,
                   help="dotted config path, e.g. grid.n")
    p.add_argument("--values", required=True,
                   help="comma-separated values for --param")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel worker processes")
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        # config validation raises ValueError with a self-explanatory text
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":      # pragma: no cover
    raise SystemExit(main())
