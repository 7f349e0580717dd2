"""Hyperfine estimation from detected lines: initial guess, filtered refinement, beam search.

The objective throughout is a *filtered* RMSE: the model trace is compared with
the measurement only inside narrow windows ``[tau_k - sigma, tau_k + sigma]``
around the predicted dips, so distant unrelated features do not pull the fit.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field as dc_field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.interpolate import make_smoothing_spline
from scipy.optimize import linear_sum_assignment, minimize

from .detection import LineCandidate
from .exceptions import DomainError
from .physics import (
    TWO_PI,
    FieldConfig,
    SpinParams,
    _coherence_factors,
    _omega_tilde,
    dip_frequency,
    dip_position,
    params_from_slope_sigma,
    sigma_from_params,
)

logger = logging.getLogger(__name__)

# Solver box, Hz.
A_BOUND = 200e3
B_BOUND = 200e3
B_MIN = 1.0

CONFIDENCE_A = (5e3, 70e3)
CONFIDENCE_B = (15e3, 80e3)


def in_confidence_region(spin: SpinParams) -> bool:
    """Strict membership in ``5 < |A| < 70`` kHz and ``15 < B < 80`` kHz."""
    return bool(
        CONFIDENCE_A[0] < abs(spin.A) < CONFIDENCE_A[1] and CONFIDENCE_B[0] < spin.B < CONFIDENCE_B[1]
    )


@dataclass
class SpinEstimate:
    """One fitted spin and the evidence behind it."""

    params: SpinParams
    initial: SpinParams
    line: Optional[LineCandidate]
    line_id: int
    filtered_rmse: float
    converged: bool

    @property
    def member_dip_count(self) -> int:
        return 0 if self.line is None else self.line.size

    @property
    def in_confidence_region(self) -> bool:
        return in_confidence_region(self.params)

    @property
    def amplitude(self) -> float:
        if self.line is None or not self.line.member_amplitude:
            return 0.0
        return float(np.median(self.line.member_amplitude))

    def to_record(self, field: FieldConfig) -> dict:
        sigma = float(np.median(self.line.member_sigma)) if self.line and self.line.member_sigma else float("nan")
        return {
            "A_kHz": self.params.A / 1e3,
            "B_kHz": self.params.B / 1e3,
            "A_init_kHz": self.initial.A / 1e3,
            "B_init_kHz": self.initial.B / 1e3,
            "slope_s_per_k": None if self.line is None else self.line.slope,
            "sigma_s": sigma,
            "dip_frequency_kHz": dip_frequency(self.params, field) / 1e3,
            "member_dips": self.member_dip_count,
            "filtered_rmse": self.filtered_rmse,
            "converged": self.converged,
            "in_confidence_region": self.in_confidence_region,
        }


@dataclass
class Configuration:
    """Selected spins and their joint filtered RMSE."""

    members: List[SpinEstimate]
    rmse: float
    excluded: List[Tuple[SpinEstimate, float]] = dc_field(default_factory=list)


def initial_estimate(line: LineCandidate, field: FieldConfig) -> SpinParams:
    """Closed-form (A, B) from the line slope and the median member width.

    Raises
    ------
    InconsistentConstraintsError
        When no real (A, B) reproduces the slope and width together.
    """
    if not line.member_sigma:
        raise DomainError("line carries no member widths")
    return params_from_slope_sigma(line.slope, float(np.median(line.member_sigma)), field)


def dip_windows(
    spin: SpinParams, field: FieldConfig, tau_max: float, sigma: Optional[float] = None, min_halfwidth: float = 0.0
):
    """Window edges ``(lo, hi)`` around every predicted dip up to ``tau_max``.

    The half-width is ``sigma`` (default: the model width of ``spin``) but
    never less than ``min_halfwidth``.
    """
    if sigma is None:
        sigma = sigma_from_params(spin, field) if spin.B > 0 else 0.0
    sigma = max(float(sigma), float(min_halfwidth))
    spacing = TWO_PI / (_omega_tilde(spin.A, spin.B, field.omega_L) + field.omega_L)
    k_top = int(np.ceil(tau_max / spacing + 0.5)) + 1
    centers = dip_position(spin, field, np.arange(1, k_top + 1))
    keep = centers - sigma <= tau_max
    centers = centers[keep]
    return centers - sigma, centers + sigma


def window_mask(tau, spins: Sequence[SpinParams], field: FieldConfig, sigmas: Optional[Sequence[float]] = None):
    """Boolean mask of samples lying inside any dip window of ``spins``.

    Windows are at least one grid step wide on each side so a very weak
    coupling still selects the samples next to its dips.
    """
    tau = np.asarray(tau, dtype=float)
    mask = np.zeros(tau.size, dtype=bool)
    if tau.size == 0:
        return mask
    step = float(np.min(np.diff(tau))) if tau.size > 1 else 0.0
    for i, spin in enumerate(spins):
        lo, hi = dip_windows(spin, field, tau[-1], None if sigmas is None else sigmas[i], step)
        a = np.searchsorted(tau, lo, side="left")
        b = np.searchsorted(tau, hi, side="right")
        diff = np.zeros(tau.size + 1, dtype=int)
        np.add.at(diff, a, 1)
        np.add.at(diff, b, -1)
        mask |= np.cumsum(diff[:-1]) > 0
    return mask


def fit_bath_model(
    tau, p_x, mask, length: float = 1e-6, lam: float = 1.0, clip: float = 3.0, max_passes: int = 5
) -> np.ndarray:
    """Smooth multiplicative background ``M_bath(tau)``.

    A cubic smoothing spline is fitted to the samples outside ``mask`` and
    mapped to coherence units via ``M = 2 p - 1``. Narrow dips the mask does
    not cover would drag the spline down, so samples lying more than ``clip``
    robust standard deviations below it are dropped and the spline refitted.
    The abscissa is measured in units of ``length`` so that ``lam`` sets a
    smoothing scale of about one ``length``.
    """
    tau = np.asarray(tau, dtype=float)
    p_x = np.asarray(p_x, dtype=float)
    free = ~np.asarray(mask, dtype=bool)
    x = tau / length
    for _ in range(max_passes):
        if free.sum() < 5:
            return np.ones_like(tau)
        spl = make_smoothing_spline(x[free], p_x[free], lam=lam)
        fit = spl(x)
        resid = p_x - fit
        scale = 1.4826 * np.median(np.abs(resid[free] - np.median(resid[free])))
        keep = free & (resid > -clip * max(scale, 1e-6))
        if np.array_equal(keep, free):
            break
        free = keep
    return np.clip(2.0 * fit - 1.0, -1.0, 1.0)


def _model_px(spins, field, N, tau, background=None):
    if len(spins):
        M = np.prod(_coherence_factors([s.A for s in spins], [s.B for s in spins], field.omega_L, N, tau), axis=0)
    else:
        M = np.ones_like(tau)
    if background is not None:
        M = M * background
    return 0.5 * (1.0 + M)


def filtered_rmse(
    tau,
    p_x,
    spins: Sequence[SpinParams],
    field: FieldConfig,
    N: int,
    bath: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
) -> float:
    """RMSE between ``p_x`` and the modelled trace inside the dip windows.

    Parameters
    ----------
    bath : ndarray, optional
        Background coherence multiplied into the model (defaults to 1).
    mask : ndarray of bool, optional
        Explicit filter; by default the union of the windows of ``spins``.

    Raises
    ------
    DomainError
        When the filter selects no sample.
    """
    tau = np.asarray(tau, dtype=float)
    p_x = np.asarray(p_x, dtype=float)
    if mask is None:
        mask = window_mask(tau, spins, field)
    if not np.any(mask):
        raise DomainError("no dip window overlaps the tau grid")
    bg = None if bath is None else np.asarray(bath, dtype=float)[mask]
    model = _model_px(list(spins), field, N, tau[mask], bg)
    return float(np.sqrt(np.mean((model - p_x[mask]) ** 2)))


def _b_scan(spin, field, tau, target, bg, N, step=1e3):
    """Best B along the curve of constant dip frequency through ``spin``."""
    w_t = float(_omega_tilde(spin.A, spin.B, field.omega_L))
    b_top = min(B_BOUND, 0.95 * w_t / TWO_PI)
    Bs = np.arange(step, b_top, step)
    if Bs.size == 0:
        return spin
    As = (np.sqrt(w_t**2 - (TWO_PI * Bs) ** 2) - field.omega_L) / TWO_PI
    ok = np.abs(As) <= A_BOUND
    Bs, As = Bs[ok], As[ok]
    if Bs.size == 0:
        return spin
    M = _coherence_factors(As, Bs, field.omega_L, N, tau)
    err = np.mean((0.5 * (1.0 + M * bg[None, :]) - target[None, :]) ** 2, axis=1)
    j = int(np.argmin(err))
    return SpinParams(float(As[j]), float(Bs[j]))


def _fp_b_scan(spin, field, tau, p_x, bg, N, halfwidth, b_step=1e3, max_shift=4e-9):
    """Best (A, B) on a grid of dip frequency and B around ``spin``.

    The dip-frequency step is small enough that a dip at the end of the grid
    moves by at most ``max_shift``; each row of the grid shares the windows of
    its dip frequency with the starting width.
    """
    w0 = float(_omega_tilde(spin.A, spin.B, field.omega_L))
    w_step = TWO_PI * max(1.0, max_shift / tau[-1] * (w0 + field.omega_L) / TWO_PI)
    offsets = np.arange(-halfwidth, halfwidth + 1e-9, w_step / TWO_PI) * TWO_PI
    Bs = np.arange(max(b_step, spin.B - halfwidth), min(B_BOUND, spin.B + halfwidth) + 1e-9, b_step)
    hw = max(sigma_from_params(spin, field), float(np.min(np.diff(tau))) if tau.size > 1 else 0.0)
    best = (np.inf, spin)
    for dw in offsets:
        w_t = w0 + dw
        B = Bs[TWO_PI * Bs < 0.95 * w_t]
        if B.size == 0:
            continue
        A = (np.sqrt(w_t**2 - (TWO_PI * B) ** 2) - field.omega_L) / TWO_PI
        ok = np.abs(A) <= A_BOUND
        A, B = A[ok], B[ok]
        if A.size == 0:
            continue
        centers = (2 * np.arange(1, int(tau[-1] * (w_t + field.omega_L) / TWO_PI) + 3) - 1) * np.pi / (
            w_t + field.omega_L
        )
        a = np.searchsorted(tau, centers - hw, side="left")
        b = np.searchsorted(tau, centers + hw, side="right")
        idx = np.concatenate([np.arange(i, j) for i, j in zip(a, b)]) if a.size else np.array([], int)
        if idx.size == 0:
            continue
        M = _coherence_factors(A, B, field.omega_L, N, tau[idx])
        err = np.sqrt(np.mean((0.5 * (1.0 + M * bg[idx][None, :]) - p_x[idx][None, :]) ** 2, axis=1))
        j = int(np.argmin(err))
        if err[j] < best[0]:
            best = (float(err[j]), SpinParams(float(A[j]), float(B[j])))
    return best[1]


def refine(
    tau,
    p_x,
    initial: SpinParams,
    field: FieldConfig,
    N: int,
    others: Optional[np.ndarray] = None,
    bath: Optional[np.ndarray] = None,
    max_outer: int = 4,
    xatol: float = 1.0,
    max_evals: int = 2000,
    b_scan: bool = True,
    fp_halfwidth: Optional[float] = None,
):
    """Minimise the filtered RMSE of one spin with everything else held fixed.

    Parameters
    ----------
    others : ndarray, optional
        Product of the coherence factors of the fixed spins over ``tau``.
    bath : ndarray, optional
        Background coherence over ``tau``.
    max_outer : int
        Window rebuilds; each outer pass runs a Nelder-Mead search on the
        windows of the current iterate.
    xatol : float
        Parameter tolerance in Hz.
    max_evals : int
        Total objective evaluations across outer passes.
    b_scan : bool
        Seed the first pass with the best B along the constant dip-frequency
        curve through ``initial``; dip depth is not monotonic in B, so a
        purely local search can lock onto the wrong branch.
    fp_halfwidth : float, optional
        Half-width in Hz of a grid search over dip frequency and B run
        before the local search (only with ``b_scan``). A start a few percent
        off in A misplaces the late dips by more than their width, which a
        local search cannot recover from. ``None`` uses 12% of ``|(A, B)|``
        of the start; 0 keeps the dip frequency of the start fixed, which is
        right when it comes from a fitted line.

    Returns
    -------
    params : SpinParams
    rmse : float
        Filtered RMSE on the windows of ``params``.
    converged : bool
    """
    tau = np.asarray(tau, dtype=float)
    p_x = np.asarray(p_x, dtype=float)
    bg_full = np.ones_like(tau)
    if others is not None:
        bg_full = bg_full * others
    if bath is not None:
        bg_full = bg_full * bath
    if abs(initial.A) > A_BOUND or not 0 < initial.B <= B_BOUND:
        raise DomainError(f"initial estimate {initial} lies outside the solver bounds")

    def setup(spin):
        m = window_mask(tau, [spin], field)
        if not m.any():
            raise DomainError("no dip window overlaps the tau grid")
        return tau[m], p_x[m], bg_full[m]

    t0, y0, b0 = setup(initial)
    rmse0 = float(np.sqrt(np.mean((_model_px([initial], field, N, t0, b0) - y0) ** 2)))
    current = initial
    if b_scan:
        # same dip frequency, so the starting windows still apply
        cand = _b_scan(initial, field, t0, y0, b0, N)
        best_r = float(np.sqrt(np.mean((_model_px([cand], field, N, t0, b0) - y0) ** 2)))
        if best_r < rmse0:
            current = cand
        else:
            best_r = rmse0
        if fp_halfwidth is None:
            fp_halfwidth = 0.12 * float(np.hypot(initial.A, initial.B))
        if fp_halfwidth > 0:
            cand = _fp_b_scan(initial, field, tau, p_x, bg_full, N, fp_halfwidth)
            tc, yc, bc = setup(cand)
            if float(np.sqrt(np.mean((_model_px([cand], field, N, tc, bc) - yc) ** 2))) < best_r:
                current = cand

    evals_left = max_evals
    converged = False
    for _ in range(max_outer):
        tw, yw, bw = setup(current)

        def obj(x):
            M = _coherence_factors([x[0] * 1e3], [x[1] * 1e3], field.omega_L, N, tw)[0]
            return float(np.sqrt(np.mean((0.5 * (1.0 + M * bw) - yw) ** 2)))

        x0 = np.array([current.A / 1e3, current.B / 1e3])
        res = minimize(
            obj,
            x0,
            method="Nelder-Mead",
            bounds=[(-A_BOUND / 1e3, A_BOUND / 1e3), (B_MIN / 1e3, B_BOUND / 1e3)],
            options={
                "xatol": xatol / 1e3,
                "fatol": 1e-12,
                "maxfev": max(evals_left, 1),
                "initial_simplex": [x0, x0 + [0.5, 0.0], x0 + [0.0, 0.5]],
            },
        )
        evals_left -= int(res.nfev)
        new = SpinParams(float(res.x[0]) * 1e3, float(res.x[1]) * 1e3)
        moved = max(abs(new.A - current.A), abs(new.B - current.B))
        current = new
        if not res.success or evals_left <= 0:
            converged = False
            break
        if moved < xatol:
            converged = True
            break
    tf, yf, bf = setup(current)
    rmse = float(np.sqrt(np.mean((_model_px([current], field, N, tf, bf) - yf) ** 2)))
    if rmse > rmse0:
        # Never hand back something worse than the starting point.
        return initial, rmse0, converged
    return current, rmse, converged


def _factor(spin, field, N, tau):
    return _coherence_factors([spin.A], [spin.B], field.omega_L, N, tau)[0]


def coordinate_descent(
    tau,
    p_x,
    estimates: List[SpinEstimate],
    field: FieldConfig,
    N: int,
    bath: Optional[np.ndarray] = None,
    sweeps: int = 2,
    **refine_kw,
) -> List[SpinEstimate]:
    """Refine each estimate against the others, deepest dips first.

    In the first sweep a spin only sees the spins refined before it; later
    sweeps see all others.
    """
    order = sorted(range(len(estimates)), key=lambda i: (-estimates[i].amplitude, i))
    est = list(estimates)
    factors: Dict[int, np.ndarray] = {}
    for sweep in range(sweeps):
        for i in order:
            others = np.ones_like(tau)
            for j, f in factors.items():
                if j != i:
                    others = others * f
            params, rmse, conv = refine(tau, p_x, est[i].params, field, N, others=others, bath=bath,
                                        b_scan=False, **refine_kw)
            est[i] = SpinEstimate(params, est[i].initial, est[i].line, est[i].line_id, rmse, conv)
            factors[i] = _factor(params, field, N, tau)
    return est


def _subset_rmse(product, target):
    return float(np.sqrt(np.mean((0.5 * (1.0 + product) - target) ** 2)))


def beam_select(
    candidates: Sequence[SpinEstimate],
    tau,
    p_x,
    field: FieldConfig,
    N: int,
    beam_width: int = 8,
    bath: Optional[np.ndarray] = None,
    mask: Optional[np.ndarray] = None,
) -> Configuration:
    """Pick the subset of candidates that best reconstructs the trace.

    Candidates are decided one at a time (most member dips first). At each
    depth every partial configuration branches on exclude/include and only the
    ``beam_width`` lowest-RMSE ones are kept. All configurations are scored on
    the same filter, by default the union of every candidate's windows, so the
    empty configuration has a well-defined RMSE too. Candidates sharing a line
    are never included together.
    """
    tau = np.asarray(tau, dtype=float)
    p_x = np.asarray(p_x, dtype=float)
    if beam_width < 1:
        raise DomainError("beam_width must be >= 1")
    cands = list(candidates)
    if not cands:
        return Configuration([], float("nan"), [])
    if mask is None:
        mask = window_mask(tau, [c.params for c in cands], field)
    if not mask.any():
        raise DomainError("no dip window overlaps the tau grid")
    tw = tau[mask]
    target = p_x[mask]
    base = np.ones_like(tw) if bath is None else np.asarray(bath, dtype=float)[mask]
    order = sorted(range(len(cands)), key=lambda i: (-cands[i].member_dip_count, i))
    facs = {i: _factor(cands[i].params, field, N, tw) for i in order}

    # state: (rmse, chosen tuple in decision order, product, lines used)
    beam = [(_subset_rmse(base, target), (), base, frozenset())]
    for i in order:
        nxt = []
        for rmse, chosen, prod, lines in beam:
            nxt.append((rmse, chosen, prod, lines))
            if cands[i].line_id in lines:
                continue
            p2 = prod * facs[i]
            nxt.append((_subset_rmse(p2, target), chosen + (i,), p2, lines | {cands[i].line_id}))
        nxt.sort(key=lambda s: (s[0], len(s[1]), s[1]))
        beam = nxt[:beam_width]
    best_rmse, chosen, prod, _ = beam[0]
    chosen_set = set(chosen)
    excluded = []
    for i in order:
        if i in chosen_set:
            continue
        excluded.append((cands[i], _subset_rmse(prod * facs[i], target) - best_rmse))
    members = [cands[i] for i in sorted(chosen_set)]
    return Configuration(members, best_rmse, excluded)


def brute_force_select(candidates, tau, p_x, field, N, bath=None, mask=None) -> Configuration:
    """Exhaustive counterpart of :func:`beam_select` (small candidate sets only)."""
    cands = list(candidates)
    tau = np.asarray(tau, dtype=float)
    p_x = np.asarray(p_x, dtype=float)
    if mask is None:
        mask = window_mask(tau, [c.params for c in cands], field)
    tw, target = tau[mask], p_x[mask]
    base = np.ones_like(tw) if bath is None else np.asarray(bath, dtype=float)[mask]
    best = None
    for r in range(len(cands) + 1):
        for sub in itertools.combinations(range(len(cands)), r):
            if len({cands[i].line_id for i in sub}) < len(sub):
                continue
            prod = base.copy()
            for i in sub:
                prod = prod * _factor(cands[i].params, field, N, tw)
            rm = _subset_rmse(prod, target)
            if best is None or rm < best[0]:
                best = (rm, sub)
    return Configuration([cands[i] for i in best[1]], best[0], [])


def error_metric(orig: SpinParams, obt: SpinParams) -> float:
    """Relative distance ``|(A, B)_orig - (A, B)_obt| / |(A, B)_orig|``."""
    den = np.hypot(orig.A, orig.B)
    if den == 0:
        raise DomainError("reference spin has A = B = 0")
    return float(np.hypot(orig.A - obt.A, orig.B - obt.B) / den)


@dataclass
class MatchResult:
    """Pairs ``(truth_index, estimate_index, error)`` and unmatched truths."""

    pairs: List[Tuple[int, int, float]]
    misses: List[int]
    extras: List[int]

    def errors(self, miss_value: Optional[float] = 1.0) -> np.ndarray:
        """Per-truth errors; misses count as ``miss_value`` (dropped if None)."""
        out = [e for _, _, e in self.pairs]
        if miss_value is not None:
            out += [miss_value] * len(self.misses)
        return np.asarray(out, dtype=float)


def match_spins(
    truth: Sequence[SpinParams],
    estimates: Sequence[SpinParams],
    max_error: float = np.inf,
    max_fp_diff: Optional[float] = None,
    field: Optional[FieldConfig] = None,
    miss_cost: Optional[float] = None,
) -> MatchResult:
    """Minimum-total-error assignment of estimates to true spins.

    Parameters
    ----------
    max_error : float
        Pairs with a larger error are split into a miss and an extra.
    max_fp_diff : float, optional
        Dip-frequency gate in Hz: a pair only counts when both spins produce
        dips within this distance, i.e. the estimate sits on the true spin's
        line. Gated-out pairs are never assigned.
    field : FieldConfig, optional
        Needed for the dip-frequency gate (defaults to :class:`FieldConfig`).
    miss_cost : float, optional
        Cost of leaving a true spin unmatched. A pair costlier than this is
        declined in favour of a miss. ``None`` maximises the number of pairs.
    """
    truth, estimates = list(truth), list(estimates)
    if not truth or not estimates:
        return MatchResult([], list(range(len(truth))), list(range(len(estimates))))
    cost = np.array([[error_metric(t, e) for e in estimates] for t in truth])
    allowed = cost <= max_error
    if max_fp_diff is not None:
        field = field or FieldConfig()
        ft = np.array([dip_frequency(t, field) for t in truth])
        fe = np.array([dip_frequency(e, field) for e in estimates])
        allowed &= np.abs(ft[:, None] - fe[None, :]) <= max_fp_diff
    big = 1e6 * (1.0 + float(np.max(cost, initial=0.0)) + (miss_cost or 0.0))
    C = np.where(allowed, cost, big)
    if miss_cost is not None:
        nt, ne = C.shape
        # dummy columns: one "miss" slot per truth; dummy rows absorb extras
        full = np.full((nt + ne, ne + nt), big)
        full[:nt, :ne] = C
        full[np.arange(nt), ne + np.arange(nt)] = miss_cost
        full[nt + np.arange(ne), np.arange(ne)] = 0.0
        full[nt:, ne:] = 0.0
        C = full
    rows, cols = linear_sum_assignment(C)
    pairs, misses, used = [], set(range(len(truth))), set()
    for r, c in zip(rows, cols):
        if r < len(truth) and c < len(estimates) and allowed[r, c]:
            pairs.append((int(r), int(c), float(cost[r, c])))
            misses.discard(int(r))
            used.add(int(c))
    extras = [j for j in range(len(estimates)) if j not in used]
    return MatchResult(sorted(pairs), sorted(misses), extras)
