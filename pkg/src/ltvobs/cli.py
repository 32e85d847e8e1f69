"""Command line entry point.

    ltvobs <counterexample|pe-check|gramian|simulate> [--config PATH] [--out DIR]
           [--delta F] [--t F] [--nodes N] [--use-m] [--seed N] [--jobs N]

Exit codes: 0 success, 1 analytic failure, 2 numeric or I/O failure,
64 usage, 65 parse, 66 missing input. Log level comes from TOOL_LOG.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .errors import ConfigError, CovarianceCollapse, LtvError, ObserverDiverged
from .ltv_core import DEFAULT_DT, DEFAULT_NODES, extended_gramian, gramian, transition_matrix
from .observability import build_chain, build_counterexample, counterexample_report
from .range_localization import (
    BUNDLED_DIR,
    Scenario,
    build_lifted_system,
    build_M,
    default_grid,
    pe_check,
    uo_verdict,
)
from .riccati_observer import ObserverConfig, convergence_metrics, run_observer

EXIT_OK, EXIT_FAIL, EXIT_NUMERIC, EXIT_USAGE, EXIT_PARSE, EXIT_MISSING = 0, 1, 2, 64, 65, 66
DEFAULT_DELTAS = (1.0, 2 * math.pi, 10.0)
GRAMIAN_NULL = 1e-8
M_INTEGRAL_FLOOR = 1e-3

log = logging.getLogger("ltvobs")


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="ltvobs", description="LTV observability toolkit")
    p.add_argument("command", choices=["counterexample", "pe-check", "gramian", "simulate"])
    p.add_argument("--config", help="scenario JSON, bundled:NAME or builtin:counterexample")
    p.add_argument("--observer", help="observer config JSON (simulate)")
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--delta", type=float, action="append", help="window length (repeatable)")
    p.add_argument("--t", type=float, default=0.0, help="window start")
    p.add_argument("--nodes", type=int, default=DEFAULT_NODES)
    p.add_argument("--dt", type=float, default=DEFAULT_DT, help="RK4 step for Gramians")
    p.add_argument("--grid", help="window starts as START:STOP:COUNT")
    p.add_argument("--use-m", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--version", action="version", version=f"ltvobs {__version__}")
    return p


def _dumps(obj) -> str:
    return json.dumps(obj, indent=2) + "\n"


class Run:
    """Resolved inputs of one invocation; writes outputs and the manifest."""

    def __init__(self, args):
        self.args = args
        self.out = Path(args.out)
        self.input_hash = None
        self.config = {}

    def read_json(self, path: str) -> dict:
        p = Path(path)
        if not p.is_file():
            raise CliError(EXIT_MISSING, f"input file not found: {path}")
        raw = p.read_bytes()
        if self.input_hash is None:
            self.input_hash = hashlib.sha256(raw).hexdigest()
        try:
            return json.loads(raw)
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_PARSE, f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
        except UnicodeDecodeError as exc:
            raise CliError(EXIT_PARSE, f"{path}: {exc}") from exc

    def scenario(self) -> Scenario:
        ref = self.args.config
        if not ref:
            raise CliError(EXIT_USAGE, "--config is required")
        path = BUNDLED_DIR / f"{ref.split(':', 1)[1]}.json" if ref.startswith("bundled:") else Path(ref)
        data = self.read_json(str(path))
        try:
            sc = Scenario.from_dict(data, path.stem)
        except ConfigError as exc:
            raise CliError(EXIT_PARSE, f"{path}: {exc}") from exc
        self.config["scenario"] = sc.to_dict()
        return sc

    def write(self, name: str, text: str) -> None:
        try:
            self.out.mkdir(parents=True, exist_ok=True)
            (self.out / name).write_text(text)
        except OSError as exc:
            raise CliError(EXIT_NUMERIC, f"cannot write {self.out / name}: {exc}") from exc

    def grid(self, sc: Scenario) -> list[float]:
        if not self.args.grid:
            return default_grid(sc)
        try:
            start, stop, count = self.args.grid.split(":")
            grid = np.linspace(float(start), float(stop), int(count)).tolist()
        except ValueError as exc:
            raise CliError(EXIT_USAGE, f"--grid must be START:STOP:COUNT, got {self.args.grid!r}") from exc
        if not grid:
            raise CliError(EXIT_USAGE, "--grid must contain at least one window")
        return grid


def cmd_counterexample(run: Run) -> int:
    deltas = run.args.delta or list(DEFAULT_DELTAS)
    if any(not d > 0 for d in deltas):
        raise CliError(EXIT_USAGE, "window lengths must be positive")
    nodes, dt = run.args.nodes, run.args.dt
    run.config.update({"deltas": deltas, "nodes": nodes, "dt": dt})
    records = counterexample_report(deltas, nodes, dt)
    run.write("counterexample.json", _dumps(records))

    # output trajectory C(s) Phi(s, 0) x of the witness from the longest window
    sys_ = build_counterexample()
    longest = max(records, key=lambda r: r["delta"])
    x = np.array(longest["witness"])
    lines = ["s,y1,y2"]
    phi = np.eye(2)
    ss = np.linspace(0.0, longest["delta"], nodes)
    for i, s in enumerate(ss):
        if i:
            phi = transition_matrix(sys_, ss[i - 1], s - ss[i - 1], dt).matrix @ phi
        y = sys_.C(s) @ phi @ x
        lines.append(f"{s:.17g},{y[0]:.17g},{y[1]:.17g}")
    run.write("witness_output.csv", "\n".join(lines) + "\n")

    ok = all(r["gramian_min_eig"] <= GRAMIAN_NULL and r["m_integral_min_eig"] >= M_INTEGRAL_FLOOR
             for r in records)
    for r in records:
        log.info("delta=%.6g gramian_min_eig=%.3e m_integral_min_eig=%.6g",
                 r["delta"], r["gramian_min_eig"], r["m_integral_min_eig"])
    return EXIT_OK if ok else EXIT_FAIL


def cmd_pe_check(run: Run) -> int:
    sc = run.scenario()
    grid = run.grid(sc)
    run.config.update({"grid": grid, "nodes": run.args.nodes})
    report = pe_check(sc, grid, run.args.nodes)
    run.write("pe_report.json", _dumps(report.to_dict()))
    log.info("pe-check mu=%.6g passed=%s", report.mu, report.passed)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_gramian(run: Run) -> int:
    a = run.args
    if a.nodes < 3 or a.nodes % 2 == 0:
        raise CliError(EXIT_USAGE, f"--nodes must be odd and >= 3, got {a.nodes}")
    if a.delta and len(a.delta) > 1:
        raise CliError(EXIT_USAGE, "gramian takes a single --delta")
    if a.config == "builtin:counterexample":
        sys_ = build_counterexample()
        delta = a.delta[0] if a.delta else 2 * math.pi
        M = build_chain(sys_, 1).stacked() if a.use_m else None
        run.config["target"] = "builtin:counterexample"
    else:
        sc = run.scenario()
        sys_ = build_lifted_system(sc)
        delta = a.delta[0] if a.delta else sc.delta
        M = build_M(sc) if a.use_m else None
    if not delta > 0:
        raise CliError(EXIT_USAGE, "window length must be positive")
    run.config.update({"t": a.t, "delta": delta, "nodes": a.nodes, "dt": a.dt, "use_m": a.use_m})
    rep = gramian(sys_, a.t, delta, a.nodes, a.dt) if M is None else \
        extended_gramian(sys_, M, a.t, delta, a.nodes, a.dt)
    run.write("gramian.json", _dumps(rep.to_dict()))
    log.info("gramian min_eig=%.3e", rep.min_eig)
    return EXIT_OK


def cmd_simulate(run: Run) -> int:
    a = run.args
    sc = run.scenario()
    cfg_data = run.read_json(a.observer) if a.observer else {}
    try:
        cfg = ObserverConfig.from_dict(cfg_data, sc)
    except (ConfigError, TypeError, ValueError) as exc:
        raise CliError(EXIT_PARSE, f"observer config: {exc}") from exc
    run.config.update({"observer": cfg.to_dict(), "seed": a.seed})
    try:
        trace = run_observer(sc, cfg, a.seed)
    except (CovarianceCollapse, ObserverDiverged) as exc:
        log.error("%s", exc)
        run.write("summary.json", _dumps({"completed": False, "error": str(exc)}))
        return EXIT_FAIL
    metrics = convergence_metrics(trace)
    verdict = uo_verdict(sc, default_grid(sc), a.nodes, max(a.dt, 1e-2), jobs=a.jobs)
    summary = {
        "completed": True,
        "decay_rate": metrics["decay_rate"],
        "final_pos_err": metrics["final_pos_err"],
        "final_bias_err": metrics["final_bias_err"],
        "p_cond_peak": metrics["p_cond_peak"],
        "gramian_min_eig": verdict["gramian_min_eig"],
        "unobservable_suspected": verdict["unobservable_suspected"],
    }
    trace_path = run.out / "trace.csv"
    try:
        run.out.mkdir(parents=True, exist_ok=True)
        trace.to_csv(trace_path)
    except OSError as exc:
        raise CliError(EXIT_NUMERIC, f"cannot write {trace_path}: {exc}") from exc
    run.write("summary.json", _dumps(summary))
    log.info("simulate final_pos_err=%.3e decay_rate=%.4g", summary["final_pos_err"], summary["decay_rate"])
    return EXIT_OK


COMMANDS = {
    "counterexample": cmd_counterexample,
    "pe-check": cmd_pe_check,
    "gramian": cmd_gramian,
    "simulate": cmd_simulate,
}


def _configure_logging():
    level = os.environ.get("TOOL_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _configure_logging()
    try:
        args = build_parser().parse_args(argv)
    except CliError as exc:
        print(f"ltvobs: {exc}", file=sys.stderr)
        return exc.code
    if args.jobs < 1:
        print("ltvobs: --jobs must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    run = Run(args)
    started = time.perf_counter()
    try:
        code = COMMANDS[args.command](run)
    except CliError as exc:
        print(f"ltvobs: {exc}", file=sys.stderr)
        code = exc.code
    except LtvError as exc:
        print(f"ltvobs: numerical failure: {exc}", file=sys.stderr)
        code = EXIT_NUMERIC
    if code in (EXIT_USAGE, EXIT_PARSE, EXIT_MISSING):
        return code
    manifest = {
        "subcommand": args.command,
        "config": run.config,
        "out_dir": str(run.out),
        "version": __version__,
        "duration_s": time.perf_counter() - started,
        "input_sha256": run.input_hash,
        "exit_code": code,
    }
    try:
        run.write("manifest.json", _dumps(manifest))
    except CliError as exc:
        print(f"ltvobs: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return code


if __name__ == "__main__":
    sys.exit(main())
