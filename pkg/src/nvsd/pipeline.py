"""End-to-end spin detection: decomposition, line grouping, fitting, selection."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field as dc_field
from typing import List, Optional

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_signal_arrays
from .decomposition import GaussianDecomposition, dip_spectrum
from .detection import CPMGLineFit
from .exceptions import ConfigurationError, DomainError, InconsistentConstraintsError, NumericalError
from .fitting import (
    A_BOUND,
    B_BOUND,
    Configuration,
    SpinEstimate,
    _model_px,
    beam_select,
    coordinate_descent,
    fit_bath_model,
    initial_estimate,
    refine,
    window_mask,
)
from .physics import FieldConfig, SequenceConfig, coherence_product, dip_frequency

logger = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    """User-tunable analysis settings. Defaults are the standard analysis settings.

    ``d_max_s`` is in seconds, ``bath_fp_tolerance`` and ``refine_xatol`` in Hz.
    ``min_dip_depth`` is the deepest dip (in ``1 - p_x``) a reported spin must
    produce on its own over the grid; ``None`` uses ``threshold``.
    ``max_residual_ratio`` bounds, inside a spin's own dip windows, the RMSE
    of the full reconstruction relative to the reconstruction without that
    spin; selected spins that explain less of their windows are not reported.
    """

    threshold: float = 0.05
    d_max_s: float = 1e-8
    M_layers: int = 3
    split_floor: Optional[float] = None
    min_members: int = 3
    beam_width: int = 8
    max_components: int = 4
    em_max_iter: int = 500
    em_tol: float = 1e-8
    count_scale: float = 20.0
    refine_max_evals: int = 2000
    refine_xatol: float = 1.0
    refine_max_outer: int = 4
    sweeps: int = 2
    bath_fp_tolerance: float = 250.0
    enforce_slope_limit: bool = False
    min_dip_depth: Optional[float] = None
    max_residual_ratio: float = 0.5
    field: FieldConfig = dc_field(default_factory=FieldConfig)
    sequence: SequenceConfig = dc_field(default_factory=SequenceConfig)
    rng_seed: int = 0

    def __post_init__(self):
        checks = [
            ("threshold", 0 < self.threshold < 1, "must lie in (0, 1)"),
            ("d_max_s", self.d_max_s > 0, "must be > 0"),
            ("M_layers", int(self.M_layers) >= 1, "must be >= 1"),
            ("min_members", int(self.min_members) >= 1, "must be >= 1"),
            ("beam_width", int(self.beam_width) >= 1, "must be >= 1"),
            ("max_components", int(self.max_components) >= 1, "must be >= 1"),
            ("refine_max_evals", int(self.refine_max_evals) >= 1, "must be >= 1"),
            ("sweeps", int(self.sweeps) >= 0, "must be >= 0"),
            ("bath_fp_tolerance", self.bath_fp_tolerance >= 0, "must be >= 0"),
            ("max_residual_ratio", self.max_residual_ratio > 0, "must be > 0"),
            ("rng_seed", 0 <= int(self.rng_seed) < 2**64, "must be an unsigned 64-bit integer"),
        ]
        if self.min_dip_depth is not None:
            checks.append(("min_dip_depth", 0 <= self.min_dip_depth < 1, "must lie in [0, 1)"))
        if self.split_floor is not None:
            checks.append(("split_floor", 0 < self.split_floor < 1, "must lie in (0, 1)"))
        for name, ok, msg in checks:
            if not ok:
                raise ConfigurationError(f"{name} {msg}, got {getattr(self, name)!r}")

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if isinstance(d.get("field"), dict):
            d["field"] = FieldConfig(**d["field"])
        if isinstance(d.get("sequence"), dict):
            d["sequence"] = SequenceConfig(**d["sequence"])
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigurationError(f"unknown pipeline setting(s): {', '.join(sorted(unknown))}")
        return cls(**d)


def _max_dip_depth(spin, field, N, tau) -> float:
    """Deepest single-spin dip ``max(1 - p_x)`` over ``tau``."""
    M = coherence_product([spin.A], [spin.B], field, N, tau)
    return float(np.max(0.5 * (1.0 - M)))


def _residual_ratio(spin, members, tau, p_x, field, N, bath) -> float:
    """Windowed RMSE with ``spin`` over the RMSE without it, others kept."""
    mask = window_mask(tau, [spin.params], field)
    rest = [c.params for c in members if c is not spin]
    without = _model_px(rest, field, N, tau[mask], bath[mask])
    with_spin = _model_px(rest + [spin.params], field, N, tau[mask], bath[mask])
    r0 = np.sqrt(np.mean((p_x[mask] - without) ** 2))
    r1 = np.sqrt(np.mean((p_x[mask] - with_spin) ** 2))
    return float(r1 / r0) if r0 > 0 else 1.0


class SpinDetector(BaseEstimator):
    """Recover nuclear-spin hyperfine pairs from a CPMG coherence trace.

    Parameters
    ----------
    config : PipelineConfig, optional
        All analysis settings; defaults when omitted.

    Attributes
    ----------
    spins_ : list of SpinEstimate
        Selected spins, ordered by dip frequency.
    background_ : list of SpinEstimate
        Selected estimates whose dip frequency coincides with the bare Larmor
        frequency; the distant bath produces such a line, so they are kept in
        the model but not reported as spins.
    candidates_ : list of SpinEstimate
        Every refined candidate the selection saw.
    unfittable_ : list of LineCandidate
        Lines whose initial estimate failed.
    shallow_ : list of SpinEstimate
        Selected estimates too weak to have produced an above-threshold dip
        by themselves (usually coincidences among bath dips). Kept in the
        model, not reported.
    unsupported_ : list of SpinEstimate
        Selected estimates that barely improve the fit inside their own dip
        windows (see ``max_residual_ratio``). Kept in the model, not reported.
    configuration_ : Configuration
    bath_ : ndarray
        Smooth background coherence over the fitted grid.
    decomposition_ : GaussianDecomposition
    line_fit_ : CPMGLineFit
    """

    def __init__(self, config: Optional[PipelineConfig] = None):
        self.config = config

    def _cfg(self) -> PipelineConfig:
        return self.config if self.config is not None else PipelineConfig()

    def fit(self, tau, p_x):
        cfg = self._cfg()
        tau, p_x = check_signal_arrays(tau, p_x, require_uniform=True)
        field, N = cfg.field, cfg.sequence.N
        self.tau_ = tau

        self.decomposition_ = GaussianDecomposition(
            threshold=cfg.threshold,
            split_floor=cfg.split_floor,
            max_components=cfg.max_components,
            max_iter=cfg.em_max_iter,
            tol=cfg.em_tol,
            count_scale=cfg.count_scale,
            random_state=cfg.rng_seed,
        ).fit(tau, dip_spectrum(p_x))
        k_max = max(1, int(np.ceil(tau[-1] / field.period)))
        self.line_fit_ = CPMGLineFit(
            period=field.period,
            k_max=k_max,
            d_max=cfg.d_max_s,
            M_layers=cfg.M_layers,
            min_members=cfg.min_members,
            enforce_slope_limit=cfg.enforce_slope_limit,
        ).fit(self.decomposition_.components_)

        initial, self.unfittable_ = [], []
        for j, line in enumerate(self.line_fit_.lines_):
            try:
                p0 = initial_estimate(line, field)
            except InconsistentConstraintsError as exc:
                logger.info("line %d unfittable: %s", j, exc)
                self.unfittable_.append(line)
                continue
            if abs(p0.A) > A_BOUND or not 0 < p0.B <= B_BOUND:
                logger.info("line %d initial estimate %s outside solver bounds", j, p0)
                self.unfittable_.append(line)
                continue
            initial.append(SpinEstimate(p0, p0, line, j, float("nan"), False))

        self.bath_ = np.ones_like(tau)
        self.candidates_ = []
        self.configuration_ = Configuration([], float("nan"), [])
        self.spins_, self.background_, self.shallow_, self.unsupported_ = [], [], [], []
        if not initial:
            return self

        self.bath_ = fit_bath_model(tau, p_x, window_mask(tau, [c.params for c in initial], field))
        kw = dict(max_outer=cfg.refine_max_outer, xatol=cfg.refine_xatol, max_evals=cfg.refine_max_evals)
        refined = []
        for c in initial:
            params, rmse, conv = refine(tau, p_x, c.params, field, N, bath=self.bath_, fp_halfwidth=0.0, **kw)
            refined.append(SpinEstimate(params, c.initial, c.line, c.line_id, rmse, conv))

        # Select, polish the chosen spins against each other, then select again
        # so that candidates are judged against the polished configuration.
        conf = beam_select(refined, tau, p_x, field, N, cfg.beam_width, bath=self.bath_)
        for _ in range(2):
            chosen = coordinate_descent(tau, p_x, conf.members, field, N, bath=self.bath_, sweeps=cfg.sweeps, **kw)
            ids = {c.line_id for c in chosen}
            refined = [c for c in refined if c.line_id not in ids] + chosen
            refined.sort(key=lambda c: c.line_id)
            conf = beam_select(refined, tau, p_x, field, N, cfg.beam_width, bath=self.bath_)
        self.candidates_ = refined
        self.configuration_ = conf

        members = sorted(conf.members, key=lambda c: dip_frequency(c.params, field))
        for c in members:
            if not all(np.isfinite([c.params.A, c.params.B, c.filtered_rmse])):
                raise NumericalError(f"non-finite estimate for line {c.line_id}")
        floor = cfg.threshold if cfg.min_dip_depth is None else cfg.min_dip_depth
        for c in members:
            if abs(dip_frequency(c.params, field) - field.f_L) <= cfg.bath_fp_tolerance:
                self.background_.append(c)
            elif _max_dip_depth(c.params, field, N, tau) < floor:
                self.shallow_.append(c)
            elif _residual_ratio(c, members, tau, p_x, field, N, self.bath_) > cfg.max_residual_ratio:
                self.unsupported_.append(c)
            else:
                self.spins_.append(c)
        return self

    def _check_fitted(self):
        if not hasattr(self, "spins_"):
            raise DomainError("SpinDetector is not fitted yet")

    def predict(self, tau=None):
        """Reconstructed ``p_x`` from the selected configuration and the background."""
        self._check_fitted()
        cfg = self._cfg()
        tau_f = self.tau_ if tau is None else np.asarray(tau, dtype=float)
        bath = np.interp(tau_f, self.tau_, self.bath_)
        params = [c.params for c in self.spins_ + self.background_ + self.shallow_ + self.unsupported_]
        return _model_px(params, cfg.field, cfg.sequence.N, tau_f, bath)

    def score(self, tau, p_x):
        """Negative RMSE of the reconstruction against ``p_x`` (higher is better)."""
        tau, p_x = check_signal_arrays(tau, p_x, require_uniform=False)
        return -float(np.sqrt(np.mean((self.predict(tau) - p_x) ** 2)))

    def spin_params(self):
        self._check_fitted()
        return [c.params for c in self.spins_]

    def records(self) -> List[dict]:
        """JSON-ready result rows for the reported spins."""
        self._check_fitted()
        return [c.to_record(self._cfg().field) for c in self.spins_]
