"""Fan-diagram construction and greedy straight-line grouping of dips.

Each Gaussian center ``mu`` is placed in period window ``k`` (width
``T = pi / omega_L``) and marked by its offset ``delta_tau`` from the window
center. Dips of one nuclear spin then lie on a line through
``(k, delta_tau) = (0.5, 0)``. Clone layers copy every point to
``(k +- m, delta_tau -+ m T)`` so that steep lines that wrap into a
neighbouring window are still collinear.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator

from .decomposition import GaussianComponent
from .exceptions import DomainError

logger = logging.getLogger(__name__)


class DipPoint(NamedTuple):
    k: int
    delta_tau: float
    amplitude: float
    sigma: float
    clone_offset: int
    source_id: int


@dataclass
class FanDiagram:
    """Columnar store of dip points (originals and clones)."""

    k: np.ndarray
    delta_tau: np.ndarray
    amplitude: np.ndarray
    sigma: np.ndarray
    clone_offset: np.ndarray
    source_id: np.ndarray
    period: float
    k_max: int
    M_layers: int
    skipped: List[int] = field(default_factory=list)

    def __len__(self):
        return self.k.size

    @property
    def slope_limit(self) -> float:
        """Largest |slope| the clone layers can represent."""
        return (2 * self.M_layers - 1) * self.period / (2 * self.k_max)

    def points(self) -> List[DipPoint]:
        return [
            DipPoint(int(k), float(d), float(a), float(s), int(c), int(i))
            for k, d, a, s, c, i in zip(
                self.k, self.delta_tau, self.amplitude, self.sigma, self.clone_offset, self.source_id
            )
        ]

    def subset(self, mask) -> "FanDiagram":
        return FanDiagram(
            self.k[mask], self.delta_tau[mask], self.amplitude[mask], self.sigma[mask],
            self.clone_offset[mask], self.source_id[mask], self.period, self.k_max, self.M_layers, list(self.skipped),
        )


@dataclass
class LineCandidate:
    """A line through (0.5, 0) and the dips grouped on it.

    ``members`` are source ids of the matched Gaussian components and
    ``member_k`` the period index at which each one was matched;
    ``member_sigma`` and ``member_amplitude`` are copied from the components.
    """

    slope: float
    members: List[int]
    member_k: List[int]
    mean_sq_distance: float
    seed: Tuple[int, float]
    member_sigma: List[float] = field(default_factory=list)
    member_amplitude: List[float] = field(default_factory=list)

    @property
    def size(self) -> int:
        return len(self.members)


def period_index(mu, period):
    """Window index ``k`` (1-based) containing ``mu``."""
    return np.floor(np.asarray(mu, dtype=float) / period).astype(int) + 1


def fan_diagram(components: Sequence[GaussianComponent], period: float, k_max: int, M_layers: int = 3) -> FanDiagram:
    """Build the (k, delta_tau) point set with ``M_layers - 1`` clone layers on each side."""
    if not period > 0:
        raise DomainError("period must be > 0")
    if k_max < 1 or M_layers < 1:
        raise DomainError("k_max and M_layers must be >= 1")
    cols = {name: [] for name in ("k", "dt", "a", "s", "c", "id")}
    skipped = []
    for sid, comp in enumerate(components):
        k = int(period_index(comp.mu, period))
        if k < 1 or k > k_max:
            logger.warning("component %d at mu=%.6g s lies outside windows 1..%d; skipped", sid, comp.mu, k_max)
            skipped.append(sid)
            continue
        dt = comp.mu - (k - 0.5) * period
        for m in range(-(M_layers - 1), M_layers):
            kk = k + m
            if 1 <= kk <= k_max:
                cols["k"].append(kk)
                cols["dt"].append(dt - m * period)
                cols["a"].append(comp.a)
                cols["s"].append(comp.sigma)
                cols["c"].append(m)
                cols["id"].append(sid)
    return FanDiagram(
        k=np.asarray(cols["k"], dtype=int),
        delta_tau=np.asarray(cols["dt"], dtype=float),
        amplitude=np.asarray(cols["a"], dtype=float),
        sigma=np.asarray(cols["s"], dtype=float),
        clone_offset=np.asarray(cols["c"], dtype=int),
        source_id=np.asarray(cols["id"], dtype=int),
        period=float(period),
        k_max=int(k_max),
        M_layers=int(M_layers),
        skipped=skipped,
    )


def _score_many(slopes, fan: FanDiagram, d_max: float):
    """Clamped per-window distances for many slopes at once.

    Returns ``(msd, nearest)`` where ``msd[s]`` is the mean squared clamped
    distance over windows ``1..k_max`` and ``nearest[s, k-1]`` the index into
    ``fan`` of the matched point at window k (-1 when nothing lies closer than
    ``d_max``).
    """
    slopes = np.atleast_1d(np.asarray(slopes, dtype=float))
    n_s, k_max = slopes.size, fan.k_max
    dist = np.full((n_s, k_max), d_max)
    nearest = np.full((n_s, k_max), -1, dtype=int)
    if len(fan) and n_s:
        order = np.argsort(fan.k, kind="stable")
        ks = fan.k[order]
        line = slopes[:, None] * (ks[None, :] - 0.5)
        d = np.abs(fan.delta_tau[order][None, :] - line)
        uniq, starts = np.unique(ks, return_index=True)
        mins = np.minimum.reduceat(d, starts, axis=1)
        # argmin within each k-group
        ends = np.append(starts[1:], ks.size)
        for j, (kk, s0, s1) in enumerate(zip(uniq, starts, ends)):
            arg = np.argmin(d[:, s0:s1], axis=1) + s0
            hit = mins[:, j] < d_max
            dist[hit, kk - 1] = mins[hit, j]
            nearest[hit, kk - 1] = order[arg[hit]]
    msd = np.mean(dist**2, axis=1)
    return msd, nearest


def score_line(slope: float, fan: FanDiagram, d_max: float):
    """Mean squared clamped distance of one line and the indices of matched points."""
    if not d_max > 0:
        raise DomainError("d_max must be > 0")
    msd, nearest = _score_many([slope], fan, d_max)
    return float(msd[0]), nearest[0]


def _members(nearest_row, fan: FanDiagram, slope: float):
    """Matched points with one entry per source; the closest match wins."""
    best = {}
    for kk, idx in enumerate(nearest_row, start=1):
        if idx < 0:
            continue
        sid = int(fan.source_id[idx])
        dist = abs(fan.delta_tau[idx] - slope * (kk - 0.5))
        if sid not in best or dist < best[sid][1]:
            best[sid] = (idx, dist)
    return sorted((idx for idx, _ in best.values()), key=lambda i: fan.k[i])


def greedy_extract(
    fan: FanDiagram, d_max: float = 1e-8, min_members: int = 3, enforce_slope_limit: bool = False
) -> List[LineCandidate]:
    """Group dips into lines, best-scoring line first.

    Every remaining original dip proposes the line through it; the line with
    the smallest mean squared clamped distance wins (ties: smaller |slope|,
    then smaller seed k). If it gathers at least ``min_members`` dips it is
    emitted and its dips, with all their clones, are removed; otherwise only
    its seed dip is dropped. The loop ends when no original dip remains.

    With ``enforce_slope_limit`` seeds steeper than ``fan.slope_limit`` are
    dropped up front. Steeper lines are still represented by the clone
    layers up to the window where they leave the outermost layer, so by
    default they are kept and simply pay the ``d_max`` penalty beyond it.
    """
    if not d_max > 0:
        raise DomainError("d_max must be > 0")
    limit = fan.slope_limit if enforce_slope_limit else np.inf
    alive = np.ones(len(fan), dtype=bool)
    lines: List[LineCandidate] = []
    while True:
        cur = fan.subset(alive)
        seeds = np.flatnonzero(cur.clone_offset == 0)
        if seeds.size == 0:
            break
        slopes = cur.delta_tau[seeds] / (cur.k[seeds] - 0.5)
        ok = np.abs(slopes) < limit
        if not ok.any():
            break
        # Seeds whose line leaves the representable range cannot form a line.
        drop_ids = set(cur.source_id[seeds[~ok]].tolist())
        seeds, slopes = seeds[ok], slopes[ok]
        msd, nearest = _score_many(slopes, cur, d_max)
        order = np.lexsort((cur.k[seeds], np.abs(slopes), msd))
        pick = order[0]
        rows = _members(nearest[pick], cur, slopes[pick])
        seed_id = int(cur.source_id[seeds[pick]])
        if len(rows) >= min_members:
            lines.append(
                LineCandidate(
                    slope=float(slopes[pick]),
                    members=[int(cur.source_id[i]) for i in rows],
                    member_k=[int(cur.k[i]) for i in rows],
                    mean_sq_distance=float(msd[pick]),
                    seed=(int(cur.k[seeds[pick]]), float(cur.delta_tau[seeds[pick]])),
                    member_sigma=[float(cur.sigma[i]) for i in rows],
                    member_amplitude=[float(cur.amplitude[i]) for i in rows],
                )
            )
            drop_ids.update(int(cur.source_id[i]) for i in rows)
        else:
            drop_ids.add(seed_id)
        alive &= ~np.isin(fan.source_id, list(drop_ids))
    return lines


class CPMGLineFit(BaseEstimator):
    """Fan-diagram line detection on Gaussian components.

    Parameters
    ----------
    period : float
        Window width ``T`` in seconds.
    k_max : int
        Number of period windows covered by the data.
    d_max : float, default=1e-8
        Distance clamp in seconds.
    M_layers : int, default=3
    min_members : int, default=3
    enforce_slope_limit : bool, default=False
        Drop seeds whose slope leaves the fully representable range.

    Attributes
    ----------
    fan_ : FanDiagram
    lines_ : list of LineCandidate
    """

    def __init__(self, period=None, k_max=None, d_max=1e-8, M_layers=3, min_members=3, enforce_slope_limit=False):
        self.period = period
        self.k_max = k_max
        self.d_max = d_max
        self.M_layers = M_layers
        self.min_members = min_members
        self.enforce_slope_limit = enforce_slope_limit

    def fit(self, components, y=None):
        if self.period is None or self.k_max is None:
            raise DomainError("period and k_max must be set before fitting")
        self.fan_ = fan_diagram(components, self.period, self.k_max, self.M_layers)
        self.lines_ = greedy_extract(self.fan_, self.d_max, self.min_members, self.enforce_slope_limit)
        return self

    def line_ids(self) -> np.ndarray:
        """Line index per fan point (-1 when unassigned)."""
        out = np.full(len(self.fan_), -1, dtype=int)
        for j, line in enumerate(self.lines_):
            for sid, kk in zip(line.members, line.member_k):
                out[(self.fan_.source_id == sid) & (self.fan_.k == kk)] = j
        return out


def write_fan_csv(path, fan: FanDiagram, line_ids: Optional[np.ndarray] = None, header: Optional[dict] = None):
    """Fan-diagram export: k, delta_tau_s, amplitude, sigma_s, clone_offset, assigned_line_id.

    ``header`` is written as a ``#``-prefixed JSON line before the column row.
    """
    if line_ids is None:
        line_ids = np.full(len(fan), -1, dtype=int)
    with open(path, "w", newline="") as fh:
        if header is not None:
            fh.write("# " + json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["k", "delta_tau_s", "amplitude", "sigma_s", "clone_offset", "assigned_line_id"])
        for row in zip(fan.k, fan.delta_tau, fan.amplitude, fan.sigma, fan.clone_offset, line_ids):
            w.writerow([int(row[0]), repr(float(row[1])), repr(float(row[2])), repr(float(row[3])), int(row[4]), int(row[5])])
