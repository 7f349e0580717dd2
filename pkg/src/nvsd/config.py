"""Run configuration: one JSON document covering simulation, analysis and benchmarks."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field as dc_field, fields
from pathlib import Path
from typing import List, Optional, Tuple

from .exceptions import ConfigurationError, NVSDError
from .lattice import ScenarioConfig
from .physics import FieldConfig, SequenceConfig
from .pipeline import PipelineConfig

BENCHMARK_MODES = ("single_spin_map", "two_spin_resolution", "multi_spin_map")


@dataclass
class BenchmarkConfig:
    """Grid and replicate settings for the performance maps.

    Grid edges are in Hz. ``reference`` is the fixed spin of the two-spin
    sweep and ``offset_max``/``offset_step`` the grid of (A, B) offsets of the
    second spin from it. ``replicates=None`` uses a per-mode default.
    """

    mode: str = "single_spin_map"
    replicates: Optional[int] = None
    a_min: float = -100e3
    a_max: float = 100e3
    b_min: float = 5e3
    b_max: float = 100e3
    cell: float = 5e3
    reference: Tuple[float, float] = (50e3, 50e3)
    offset_max: float = 20e3
    offset_step: float = 5e3
    n_spins: int = 20
    with_bath: bool = True
    match_fp_gate: float = 2e3
    overlap_window: float = 2e3

    def __post_init__(self):
        self.reference = tuple(float(v) for v in self.reference)
        if self.mode not in BENCHMARK_MODES:
            raise ConfigurationError(f"benchmark.mode must be one of {', '.join(BENCHMARK_MODES)}, got {self.mode!r}")
        if self.replicates is not None and int(self.replicates) < 1:
            raise ConfigurationError(f"benchmark.replicates must be >= 1, got {self.replicates!r}")
        if not self.cell > 0 or not self.offset_step > 0:
            raise ConfigurationError("benchmark.cell and benchmark.offset_step must be > 0")
        if not (self.a_max >= self.a_min and self.b_max >= self.b_min):
            raise ConfigurationError("benchmark grid bounds are inverted (max < min)")
        if int(self.n_spins) < 1:
            raise ConfigurationError("benchmark.n_spins must be >= 1")


@dataclass
class RunConfig:
    """Top-level configuration shared by every subcommand.

    ``targets`` optionally pins the simulated spins as ``[A_Hz, B_Hz]`` pairs
    instead of drawing them from the lattice.
    """

    field: FieldConfig = dc_field(default_factory=FieldConfig)
    sequence: SequenceConfig = dc_field(default_factory=SequenceConfig)
    scenario: ScenarioConfig = dc_field(default_factory=ScenarioConfig)
    pipeline: PipelineConfig = dc_field(default_factory=PipelineConfig)
    benchmark: BenchmarkConfig = dc_field(default_factory=BenchmarkConfig)
    targets: Optional[List[Tuple[float, float]]] = None
    seed: int = 0

    def to_dict(self) -> dict:
        d = {
            "field": asdict(self.field),
            "sequence": asdict(self.sequence),
            "scenario": self.scenario.to_dict(),
            "pipeline": self.pipeline.to_dict(),
            "benchmark": asdict(self.benchmark),
            "targets": None if self.targets is None else [list(t) for t in self.targets],
            "seed": int(self.seed),
        }
        d["benchmark"]["reference"] = list(self.benchmark.reference)
        # field/sequence live at the top level only
        d["scenario"].pop("field", None)
        d["pipeline"].pop("field", None)
        d["pipeline"].pop("sequence", None)
        return d

    def with_seed(self, seed: int) -> "RunConfig":
        """Copy with ``seed`` applied to the scenario and the pipeline as well."""
        d = self.to_dict()
        d["seed"] = int(seed)
        d["scenario"]["rng_seed"] = int(seed)
        d["pipeline"]["rng_seed"] = int(seed)
        return build_config(d)


def _section(cls, raw, name, **extra):
    if raw is None:
        raw = {}
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{name}: expected an object, got {type(raw).__name__}")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"{name}: unknown key(s) {', '.join(unknown)}")
    try:
        return cls(**{**raw, **extra})
    except NVSDError as exc:
        raise ConfigurationError(f"{name}: {exc}") from exc
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"{name}: {exc}") from exc


def build_config(raw: dict) -> RunConfig:
    """Validate a parsed config document; errors name the offending section."""
    if not isinstance(raw, dict):
        raise ConfigurationError("config root must be a JSON object")
    allowed = {"field", "sequence", "scenario", "pipeline", "benchmark", "targets", "seed"}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise ConfigurationError(f"unknown top-level key(s): {', '.join(unknown)}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < 2**64:
        raise ConfigurationError(f"seed: must be an unsigned 64-bit integer, got {seed!r}")
    fld = _section(FieldConfig, raw.get("field"), "field")
    seq = _section(SequenceConfig, raw.get("sequence"), "sequence")
    scen_raw = dict(raw.get("scenario") or {})
    scen_raw.setdefault("rng_seed", seed)
    scen = _section(ScenarioConfig, scen_raw, "scenario", field=fld)
    pipe_raw = dict(raw.get("pipeline") or {})
    pipe_raw.setdefault("rng_seed", seed)
    pipe = _section(PipelineConfig, pipe_raw, "pipeline", field=fld, sequence=seq)
    bench = _section(BenchmarkConfig, raw.get("benchmark"), "benchmark")
    targets = raw.get("targets")
    if targets is not None:
        try:
            targets = [(float(a), float(b)) for a, b in targets]
        except (TypeError, ValueError) as exc:
            raise ConfigurationError(f"targets: expected a list of [A_Hz, B_Hz] pairs ({exc})") from exc
        if any(b < 0 for _, b in targets):
            raise ConfigurationError("targets: B must be >= 0")
    return RunConfig(fld, seq, scen, pipe, bench, targets, seed)


def load_config(path) -> RunConfig:
    """Read and validate a JSON config file (``None`` gives all defaults)."""
    if path is None:
        return build_config({})
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {p}: {exc}") from exc
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config {p} is not valid JSON: {exc.msg} (line {exc.lineno}, column {exc.colno})")
    return build_config(raw)
