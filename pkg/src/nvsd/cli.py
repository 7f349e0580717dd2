"""``nvsd`` command line: simulate, analyze, benchmark, report.

Exit codes: 0 success (an empty result is a success), 2 input or
configuration error, 3 numerical failure inside the pipeline.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import sys
import time
from pathlib import Path
from typing import List, Optional

import numpy as np

from . import __version__
from .benchmark import DEFAULT_REPLICATES, run_benchmark
from .config import BENCHMARK_MODES, RunConfig, load_config
from .detection import write_fan_csv
from .exceptions import ConfigurationError, InputFormatError, NumericalError, NVSDError, ResourceError
from .io import (
    provenance,
    read_json,
    read_signal,
    spins_to_json,
    write_csv,
    write_json,
    write_signal,
)
from .lattice import make_scenario
from .physics import SpinParams, coherence_product
from .pipeline import SpinDetector

logger = logging.getLogger("nvsd")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC = 0, 2, 3


class UsageError(NVSDError):
    """Bad command-line value (mapped to exit code 2)."""


def _parse_seed(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}")
    if not 0 <= v < 2**64:
        raise argparse.ArgumentTypeError("seed must fit in an unsigned 64-bit integer")
    return v


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text!r}")
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def resolve_threads(flag: Optional[int]) -> int:
    """``--threads`` wins, then ``NVSD_THREADS``, then 1."""
    if flag is not None:
        return flag
    env = os.environ.get("NVSD_THREADS")
    if env is None or env.strip() == "":
        return 1
    try:
        v = int(env)
    except ValueError:
        raise UsageError(f"NVSD_THREADS must be a positive integer, got {env!r}")
    if v < 1:
        raise UsageError(f"NVSD_THREADS must be a positive integer, got {env!r}")
    return v


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    return cfg


def _out_dir(args) -> Path:
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise UsageError(f"cannot create output directory {out}: {exc}")
    return out


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# -- simulate ---------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _resolve_config(args)
    out = _out_dir(args)
    scen = make_scenario(cfg.scenario)
    targets = scen.targets if cfg.targets is None else [SpinParams(a, b) for a, b in cfg.targets]
    tau = cfg.sequence.grid()
    N = cfg.sequence.N
    M = coherence_product([t.A for t in targets], [t.B for t in targets], cfg.field, N, tau)
    if len(scen.bath_A):
        M = M * coherence_product(scen.bath_A, scen.bath_B, cfg.field, N, tau)
    p_x = 0.5 * (1.0 + M)
    if not np.all(np.isfinite(p_x)):
        raise NumericalError("synthesized trace contains non-finite values")
    prov = provenance("simulate", cfg.to_dict(), seed=int(cfg.seed))
    write_signal(out / "signal.csv", tau, p_x, header=prov)
    write_json(
        out / "scenario.json",
        {
            "provenance": prov,
            "targets": spins_to_json(targets),
            "target_sites": None if cfg.targets is not None else [list(map(int, s)) for s in scen.target_sites],
            "bath": {"A_Hz": [float(a) for a in scen.bath_A], "B_Hz": [float(b) for b in scen.bath_B]},
        },
    )
    logger.info("wrote %d samples, %d targets, %d bath spins to %s", len(tau), len(targets), len(scen.bath_A), out)
    return EXIT_OK


# -- analyze ----------------------------------------------------------------


def cmd_analyze(args) -> int:
    cfg = _resolve_config(args)
    tau, p_x, _ = read_signal(args.signal)
    out = _out_dir(args)
    det = SpinDetector(cfg.pipeline).fit(tau, p_x)
    recon = det.predict()
    prov = provenance(
        "analyze",
        cfg.to_dict(),
        seed=int(cfg.seed),
        signal={"path": str(args.signal), "sha256": _sha256(args.signal)},
    )
    conf = det.configuration_
    write_json(
        out / "spins.json",
        {
            "provenance": prov,
            "spins": [{"spin_id": i + 1, **r} for i, r in enumerate(det.records())],
            "background": [c.to_record(cfg.field) for c in det.background_],
            "excluded_candidates": [
                {"A_kHz": c.params.A / 1e3, "B_kHz": c.params.B / 1e3, "rmse_increase": float(d)} for c, d in conf.excluded
            ],
            "unfittable_lines": len(det.unfittable_),
            "joint_filtered_rmse": _finite_or_none(conf.rmse),
            "reconstruction_rmse": float(np.sqrt(np.mean((recon - p_x) ** 2))),
        },
    )
    write_csv(out / "reconstruction.csv", ("tau_s", "p_x_input", "p_x_reconstructed"), zip(tau, p_x, recon), header=prov)
    write_fan_csv(out / "fan.csv", det.line_fit_.fan_, det.line_fit_.line_ids(), header=prov)
    logger.info("found %d spin(s); reconstruction RMSE %.4f", len(det.spins_), np.sqrt(np.mean((recon - p_x) ** 2)))
    return EXIT_OK


def _finite_or_none(x):
    return float(x) if x is not None and math.isfinite(x) else None


# -- benchmark --------------------------------------------------------------

HEATMAP_COLUMNS = {
    "single_spin_map": ("A_kHz", "B_kHz", "replicates", "detection_rate", "mean_error", "mean_error_misses_as_1",
                        "mean_fp_error_kHz", "reported_spins", "A_est_kHz", "B_est_kHz"),
    "two_spin_resolution": ("A2_kHz", "B2_kHz", "dip_frequency_diff_kHz", "replicates", "both_detected_rate",
                            "ref_mean_error", "second_mean_error", "max_error", "in_confidence_region"),
    "multi_spin_map": ("A_kHz", "B_kHz", "spins", "detection_rate", "mean_error", "mean_fp_error_kHz",
                       "overlap_probability"),
}


def cmd_benchmark(args) -> int:
    cfg = _resolve_config(args)
    mode = args.mode or cfg.benchmark.mode
    threads = resolve_threads(args.threads)
    replicates = args.replicates or cfg.benchmark.replicates or DEFAULT_REPLICATES[mode]
    out = _out_dir(args)
    t0 = time.perf_counter()
    rep = run_benchmark(cfg, mode=mode, replicates=replicates, threads=threads)
    elapsed = time.perf_counter() - t0
    # thread count is left out so outputs are identical for any worker count
    prov = provenance("benchmark", cfg.to_dict(), seed=int(cfg.seed), mode=mode, replicates=int(replicates))
    body = {"provenance": prov, "aggregate": rep.aggregate, "cells": rep.cells}
    if rep.spins:
        body["spins"] = rep.spins
    write_json(out / f"benchmark_{mode}.json", body)
    cols = HEATMAP_COLUMNS[mode]
    write_csv(out / f"heatmap_{mode}.csv", cols, ([c[k] for k in cols] for c in rep.cells), header=prov)
    write_json(out / f"runtime_{mode}.json", {"mode": mode, "runtime_s": elapsed, "threads": threads})
    logger.info("%s: %s (%.1f s)", mode, rep.aggregate, elapsed)
    return EXIT_OK


# -- report -----------------------------------------------------------------


def _summary_table(rows: List[dict]) -> str:
    head = f"{'spin':>4}  {'A_kHz':>9}  {'B_kHz':>9}  {'f_p_kHz':>9}  {'dips':>4}  {'rmse':>8}  flags"
    lines = [head, "-" * len(head)]
    for r in rows:
        flags = []
        if not r.get("in_confidence_region", True):
            flags.append("outside-confidence-region")
        if not r.get("converged", True):
            flags.append("not-converged")
        lines.append(
            f"{r['spin_id']:>4}  {r['A_kHz']:>9.3f}  {r['B_kHz']:>9.3f}  {r['dip_frequency_kHz']:>9.3f}  "
            f"{r['member_dips']:>4}  {r['filtered_rmse']:>8.5f}  {','.join(flags) or '-'}"
        )
    return "\n".join(lines)


def cmd_report(args) -> int:
    src = Path(args.input)
    if not src.is_dir():
        raise InputFormatError(f"report input {src} is not a directory")
    out = _out_dir(args)
    sections = []
    found = False
    spins_path = src / "spins.json"
    if spins_path.exists():
        found = True
        res = read_json(spins_path)
        rows = res.get("spins", [])
        prov = res.get("provenance", {})
        sections.append(f"Detected nuclear spins: {len(rows)}\n" + _summary_table(rows))
        recon = src / "reconstruction.csv"
        if recon.exists():
            data = np.loadtxt(recon, delimiter=",", comments="#", skiprows=2, ndmin=2)
            resid = data[:, 2] - data[:, 1]
            rmse = float(np.sqrt(np.mean(resid**2))) if len(resid) else float("nan")
            write_csv(
                out / "overlay_trace.csv",
                ("tau_s", "p_x_input", "p_x_reconstructed", "residual"),
                zip(data[:, 0], data[:, 1], data[:, 2], resid),
                header=provenance("report", prov.get("config", {}), source=str(recon), rmse=rmse),
            )
            sections.append(f"Reconstruction RMSE vs input: {rmse:.5f}")
        fan = src / "fan.csv"
        if fan.exists():
            (out / "fan_diagram.csv").write_text(fan.read_text())
    for mode in BENCHMARK_MODES:
        bpath = src / f"benchmark_{mode}.json"
        if not bpath.exists():
            continue
        found = True
        b = read_json(bpath)
        cols = HEATMAP_COLUMNS[mode]
        write_csv(out / f"heatmap_{mode}.csv", cols, ([c[k] for k in cols] for c in b["cells"]),
                  header=b.get("provenance"))
        agg = "\n".join(f"  {k}: {v}" for k, v in sorted(b["aggregate"].items()))
        sections.append(f"Benchmark {mode} ({len(b['cells'])} cells)\n{agg}")
    if not found:
        raise InputFormatError(f"{src} holds neither spins.json nor benchmark_*.json")
    text = "\n\n".join(sections) + "\n"
    (out / "summary.txt").write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point ------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nvsd", description="Detect 13C nuclear spins from NV-center CPMG traces.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", help="JSON run configuration (defaults apply when omitted)")
        sp.add_argument("--seed", type=_parse_seed, help="override the config seed (unsigned 64-bit)")
        sp.add_argument("--out", default=out_default, help=f"output directory (default: {out_default})")

    sp = sub.add_parser("simulate", help="synthesize a coherence trace and its ground truth")
    common(sp, "sim")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("analyze", help="detect spins in a signal CSV")
    sp.add_argument("signal", help="two-column CSV: tau_s,p_x")
    common(sp, "analysis")
    sp.add_argument("--threads", type=_positive_int, help="accepted for symmetry; analysis is sequential")
    sp.set_defaults(func=cmd_analyze)

    sp = sub.add_parser("benchmark", help="run a seeded performance map")
    common(sp, "bench")
    sp.add_argument("--mode", choices=BENCHMARK_MODES, help="benchmark mode (default: from config)")
    sp.add_argument("--replicates", type=_positive_int, help="replicates per cell or per map")
    sp.add_argument("--threads", type=_positive_int, help="worker processes (fallback: NVSD_THREADS)")
    sp.set_defaults(func=cmd_benchmark)

    sp = sub.add_parser("report", help="summary table and plot-data CSVs from analysis/benchmark output")
    sp.add_argument("input", help="directory written by analyze or benchmark")
    sp.add_argument("--out", default="report", help="output directory (default: report)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors already
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except InputFormatError as exc:
        print(f"nvsd: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (ConfigurationError, ResourceError, UsageError) as exc:
        print(f"nvsd: configuration error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (NumericalError, FloatingPointError, np.linalg.LinAlgError) as exc:
        print(f"nvsd: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except NVSDError as exc:
        # domain errors on user data (e.g. a non-uniform grid)
        print(f"nvsd: input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
