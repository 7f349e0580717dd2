"""Seeded performance maps: single-spin detectability, two-spin resolution, multi-spin accuracy.

Every replicate derives its own seed from the run seed, cells are evaluated
independently (optionally in worker processes) and results are reduced in a
fixed cell order, so aggregates do not depend on the worker count.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field as dc_field
from functools import lru_cache
from typing import Dict, List, Optional

import numpy as np

from .config import RunConfig
from .fitting import in_confidence_region, match_spins
from .lattice import ScenarioConfig, make_scenario, reachable_mask
from .physics import SpinParams, coherence_product, dip_frequency
from .pipeline import SpinDetector

logger = logging.getLogger(__name__)

DEFAULT_REPLICATES = {"single_spin_map": 1, "two_spin_resolution": 1, "multi_spin_map": 50}


def derive_seed(base: int, *keys: int) -> int:
    """Independent 64-bit seed for a replicate, stable across runs and workers."""
    ss = np.random.SeedSequence(entropy=int(base), spawn_key=tuple(int(k) for k in keys))
    return int(ss.generate_state(1, dtype=np.uint64)[0])


@dataclass
class BenchmarkReport:
    """Per-cell rows, aggregate statistics and wall time of one benchmark run."""

    mode: str
    cells: List[dict]
    aggregate: dict
    runtime_s: float = 0.0
    spins: List[dict] = dc_field(default_factory=list)


# -- shared helpers ---------------------------------------------------------


def _grid(lo, hi, step):
    n = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return lo + step * np.arange(n)


@lru_cache(maxsize=4)
def _bath_factor(cfg_key: tuple, seed: int) -> np.ndarray:
    cfg = _CFG_CACHE[cfg_key]
    scen = make_scenario(_bath_only(cfg, seed))
    return coherence_product(scen.bath_A, scen.bath_B, cfg.field, cfg.sequence.N, cfg.sequence.grid())


_CFG_CACHE: Dict[tuple, RunConfig] = {}


def _key(cfg: RunConfig) -> tuple:
    import json

    k = (json.dumps(cfg.to_dict(), sort_keys=True),)
    _CFG_CACHE[k] = cfg
    return k


def _bath_only(cfg: RunConfig, seed: int) -> ScenarioConfig:
    s = cfg.scenario
    return ScenarioConfig(
        n_target_spins=0,
        radius_max=s.radius_max,
        bath_site_count=s.bath_site_count if cfg.benchmark.with_bath else 0,
        bath_a_max=s.bath_a_max,
        bath_b_max=s.bath_b_max,
        bath_outer_radius=s.bath_outer_radius,
        rng_seed=seed,
        field=cfg.field,
    )


def _analyze(cfg: RunConfig, truth: List[SpinParams], bath: np.ndarray):
    tau = cfg.sequence.grid()
    M = coherence_product([t.A for t in truth], [t.B for t in truth], cfg.field, cfg.sequence.N, tau) * bath
    det = SpinDetector(cfg.pipeline).fit(tau, 0.5 * (1.0 + M))
    est = det.spin_params()
    match = match_spins(truth, est, max_fp_diff=cfg.benchmark.match_fp_gate, field=cfg.field, miss_cost=1.0)
    rows = []
    paired = {i: (j, e) for i, j, e in match.pairs}
    for i, t in enumerate(truth):
        j, e = paired.get(i, (None, float("nan")))
        fp_err = abs(dip_frequency(t, cfg.field) - dip_frequency(est[j], cfg.field)) if j is not None else float("nan")
        rows.append(
            {
                "A_kHz": t.A / 1e3,
                "B_kHz": t.B / 1e3,
                "detected": j is not None,
                "error": e,
                "fp_error_kHz": fp_err / 1e3,
                "A_est_kHz": est[j].A / 1e3 if j is not None else float("nan"),
                "B_est_kHz": est[j].B / 1e3 if j is not None else float("nan"),
            }
        )
    return rows, len(match.extras)


def _nanmean(values):
    v = np.asarray([x for x in values if not (isinstance(x, float) and math.isnan(x))], dtype=float)
    return float(v.mean()) if v.size else float("nan")


def _run_tasks(fn, tasks, threads: int):
    if threads > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(fn, tasks, chunksize=1))
    return [fn(t) for t in tasks]


# -- single spin ------------------------------------------------------------


def _single_task(args):
    cfg, a, b, rep_seed = args
    bath = _bath_factor(_key(cfg), rep_seed)
    rows, extras = _analyze(cfg, [SpinParams(a, b)], bath)
    return rows[0], extras


def single_spin_map(cfg: RunConfig, replicates: Optional[int] = None, threads: int = 1) -> BenchmarkReport:
    """Lone spin plus bath on every (A, B) grid point."""
    bc = cfg.benchmark
    reps = replicates or DEFAULT_REPLICATES["single_spin_map"]
    A = _grid(bc.a_min, bc.a_max, bc.cell)
    B = _grid(bc.b_min, bc.b_max, bc.cell)
    rep_seeds = [derive_seed(cfg.seed, 0, r) for r in range(reps)]
    tasks = [(cfg, float(a), float(b), s) for s in rep_seeds for a in A for b in B]
    out = _run_tasks(_single_task, tasks, threads)
    cells = []
    n_cells = len(A) * len(B)
    for ci in range(n_cells):
        reps_rows = [out[r * n_cells + ci][0] for r in range(reps)]
        reported = [int(row["detected"]) + out[r * n_cells + ci][1] for r, row in enumerate(reps_rows)]
        a, b = A[ci // len(B)], B[ci % len(B)]
        det = [r["detected"] for r in reps_rows]
        errs = [r["error"] for r in reps_rows if r["detected"]]
        cells.append(
            {
                "A_kHz": a / 1e3,
                "B_kHz": b / 1e3,
                "replicates": reps,
                "detection_rate": float(np.mean(det)),
                "mean_error": _nanmean(errs),
                "mean_error_misses_as_1": float(np.mean([r["error"] if r["detected"] else 1.0 for r in reps_rows])),
                "mean_fp_error_kHz": _nanmean([r["fp_error_kHz"] for r in reps_rows if r["detected"]]),
                "reported_spins": float(np.mean(reported)),
                "A_est_kHz": _nanmean([r["A_est_kHz"] for r in reps_rows]),
                "B_est_kHz": _nanmean([r["B_est_kHz"] for r in reps_rows]),
            }
        )
    agg = {
        "cells": n_cells,
        "replicates": reps,
        "detection_rate": float(np.mean([c["detection_rate"] for c in cells])),
        "mean_error_detected": _nanmean([c["mean_error"] for c in cells]),
    }
    return BenchmarkReport("single_spin_map", cells, agg)


# -- two spins --------------------------------------------------------------


def _two_task(args):
    cfg, ref, second, rep_seed = args
    bath = _bath_factor(_key(cfg), rep_seed)
    rows, extras = _analyze(cfg, [ref, second], bath)
    return rows, extras


def two_spin_resolution(cfg: RunConfig, replicates: Optional[int] = None, threads: int = 1) -> BenchmarkReport:
    """Fixed reference spin plus a second spin swept around it."""
    bc = cfg.benchmark
    reps = replicates or DEFAULT_REPLICATES["two_spin_resolution"]
    ref = SpinParams(*bc.reference)
    offs = _grid(-bc.offset_max, bc.offset_max, bc.offset_step)
    seconds = []
    for da in offs:
        for db in offs:
            if abs(da) < 1e-9 and abs(db) < 1e-9:
                continue
            if ref.B + db <= 0:
                continue
            seconds.append(SpinParams(ref.A + float(da), ref.B + float(db)))
    rep_seeds = [derive_seed(cfg.seed, 1, r) for r in range(reps)]
    tasks = [(cfg, ref, s2, s) for s in rep_seeds for s2 in seconds]
    out = _run_tasks(_two_task, tasks, threads)
    cells, fp_errs = [], []
    n = len(seconds)
    for ci, s2 in enumerate(seconds):
        rr = [out[r * n + ci][0] for r in range(reps)]
        dfp = abs(dip_frequency(ref, cfg.field) - dip_frequency(s2, cfg.field))
        both = [row[0]["detected"] and row[1]["detected"] for row in rr]
        for row in rr:
            fp_errs += [x["fp_error_kHz"] for x in row if x["detected"]]
        cells.append(
            {
                "A2_kHz": s2.A / 1e3,
                "B2_kHz": s2.B / 1e3,
                "dip_frequency_diff_kHz": dfp / 1e3,
                "replicates": reps,
                "both_detected_rate": float(np.mean(both)),
                "ref_mean_error": _nanmean([row[0]["error"] for row in rr]),
                "second_mean_error": _nanmean([row[1]["error"] for row in rr]),
                "max_error": float(max((max(row[0]["error"], row[1]["error"]) if all(x["detected"] for x in row) else 1.0) for row in rr)),
                "in_confidence_region": in_confidence_region(s2),
            }
        )
    agg = {
        "reference_kHz": [ref.A / 1e3, ref.B / 1e3],
        "cells": n,
        "replicates": reps,
        "mean_fp_error_kHz": _nanmean(fp_errs),
    }
    return BenchmarkReport("two_spin_resolution", cells, agg)


# -- many spins -------------------------------------------------------------


def _multi_task(args):
    cfg, rep_seed = args
    scen_cfg = ScenarioConfig(
        **{
            **cfg.scenario.to_dict(),
            "field": cfg.field,
            "n_target_spins": cfg.benchmark.n_spins,
            "rng_seed": rep_seed,
            "bath_site_count": cfg.scenario.bath_site_count if cfg.benchmark.with_bath else 0,
            "min_dip_separation": 0.0,
        }
    )
    scen = make_scenario(scen_cfg)
    tau = cfg.sequence.grid()
    bath = coherence_product(scen.bath_A, scen.bath_B, cfg.field, cfg.sequence.N, tau)
    rows, extras = _analyze(cfg, scen.targets, bath)
    fp = np.array([dip_frequency(t, cfg.field) for t in scen.targets])
    inr = np.array([in_confidence_region(t) for t in scen.targets])
    for i, row in enumerate(rows):
        d = np.abs(fp - fp[i])
        d[i] = np.inf
        row["overlap"] = bool(d.min() <= cfg.benchmark.overlap_window)
        row["overlap_in_region"] = bool(np.any(d[inr] <= cfg.benchmark.overlap_window))
        row["in_confidence_region"] = bool(inr[i])
    return rows, extras


def multi_spin_map(cfg: RunConfig, replicates: Optional[int] = None, threads: int = 1) -> BenchmarkReport:
    """Random lattice spins per replicate, errors binned onto the (A, B) grid."""
    bc = cfg.benchmark
    reps = replicates or DEFAULT_REPLICATES["multi_spin_map"]
    tasks = [(cfg, derive_seed(cfg.seed, 2, r)) for r in range(reps)]
    out = _run_tasks(_multi_task, tasks, threads)
    spins = []
    extras_total = 0
    for r, (rows, extras) in enumerate(out):
        extras_total += extras
        for row in rows:
            spins.append({"replicate": r, **row})

    a_edges = _grid(bc.a_min, bc.a_max + bc.cell, bc.cell) - bc.cell / 2
    b_edges = _grid(bc.b_min, bc.b_max + bc.cell, bc.cell) - bc.cell / 2
    reach = reachable_mask(a_edges, b_edges, cfg.field, cfg.scenario.radius_max)
    buckets: Dict[tuple, List[dict]] = {}
    for s in spins:
        ia = int(np.searchsorted(a_edges, s["A_kHz"] * 1e3, side="right")) - 1
        ib = int(np.searchsorted(b_edges, s["B_kHz"] * 1e3, side="right")) - 1
        if 0 <= ia < len(a_edges) - 1 and 0 <= ib < len(b_edges) - 1:
            buckets.setdefault((ia, ib), []).append(s)
    cells = []
    for ia in range(len(a_edges) - 1):
        for ib in range(len(b_edges) - 1):
            if not reach[ia, ib]:
                continue
            b = buckets.get((ia, ib), [])
            cells.append(
                {
                    "A_kHz": (a_edges[ia] + bc.cell / 2) / 1e3,
                    "B_kHz": (b_edges[ib] + bc.cell / 2) / 1e3,
                    "spins": len(b),
                    "detection_rate": float(np.mean([s["detected"] for s in b])) if b else float("nan"),
                    "mean_error": _nanmean([s["error"] for s in b if s["detected"]]),
                    "mean_fp_error_kHz": _nanmean([s["fp_error_kHz"] for s in b if s["detected"]]),
                    "overlap_probability": float(np.mean([s["overlap"] for s in b])) if b else float("nan"),
                }
            )
    inreg = [s for s in spins if s["in_confidence_region"]]
    det_in = [s for s in inreg if s["detected"]]
    agg = {
        "replicates": reps,
        "spins": len(spins),
        "spins_in_region": len(inreg),
        "detection_rate_in_region": float(len(det_in) / len(inreg)) if inreg else float("nan"),
        "mean_error_detected_in_region": _nanmean([s["error"] for s in det_in]),
        "mean_error_in_region_misses_as_1": float(np.mean([s["error"] if s["detected"] else 1.0 for s in inreg]))
        if inreg
        else float("nan"),
        "overlap_fraction_in_region": float(np.mean([s["overlap"] for s in inreg])) if inreg else float("nan"),
        "overlap_fraction_in_region_pairs": float(np.mean([s["overlap_in_region"] for s in inreg])) if inreg else float("nan"),
        "mean_fp_error_kHz": _nanmean([s["fp_error_kHz"] for s in spins if s["detected"]]),
        "unmatched_estimates": extras_total,
    }
    return BenchmarkReport("multi_spin_map", cells, agg, spins=spins)


RUNNERS = {
    "single_spin_map": single_spin_map,
    "two_spin_resolution": two_spin_resolution,
    "multi_spin_map": multi_spin_map,
}


def run_benchmark(cfg: RunConfig, mode: Optional[str] = None, replicates: Optional[int] = None, threads: int = 1):
    mode = mode or cfg.benchmark.mode
    replicates = replicates or cfg.benchmark.replicates
    return RUNNERS[mode](cfg, replicates=replicates, threads=threads)
