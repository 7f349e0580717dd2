"""Fragment splitting and weighted-EM Gaussian decomposition of dip spectra.

The coherence trace is flipped into ``y = 1 - p_x`` so that dips become
peaks. The trace is cut into fragments around runs above a floor, and each
fragment is fitted as a Gaussian mixture in tau with the samples weighted by
``y``. Mixture weights are converted back to peak heights so amplitudes are
directly comparable to the pruning threshold.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import List, NamedTuple, Sequence

import numpy as np
from sklearn.base import BaseEstimator

from ._validation import check_signal_arrays
from .exceptions import DomainError

SQRT_2PI = np.sqrt(2.0 * np.pi)


class GaussianComponent(NamedTuple):
    """Peak height ``a``, center ``mu`` (s) and width ``sigma`` (s)."""

    a: float
    mu: float
    sigma: float


@dataclass(frozen=True)
class Fragment:
    """Half-open sample range ``[start, stop)`` of the tau grid."""

    start: int
    stop: int

    def __len__(self):
        return self.stop - self.start

    def bounds(self, tau):
        return float(tau[self.start]), float(tau[self.stop - 1])


@dataclass
class FragmentFit:
    fragment_id: int
    components: List[GaussianComponent]
    bic: float
    converged: bool
    residual_rmse: float


def dip_spectrum(p_x) -> np.ndarray:
    """Sign-flipped view ``1 - p_x`` in which dips are peaks."""
    return 1.0 - np.asarray(p_x, dtype=float)


def split_fragments(y, split_floor: float) -> List[Fragment]:
    """Cut a dip spectrum into disjoint fragments.

    Every maximal run with ``y > split_floor`` is a core. A core is widened
    outwards while ``y`` keeps decreasing, so it ends on the local minimum
    below the floor. Fragments shorter than three samples are merged into the
    nearest neighbouring fragment.
    """
    y = np.asarray(y, dtype=float)
    if y.size == 0:
        raise DomainError("cannot split an empty spectrum")
    above = y > split_floor
    if not above.any():
        return []
    edges = np.diff(above.astype(np.int8))
    starts = list(np.flatnonzero(edges == 1) + 1)
    stops = list(np.flatnonzero(edges == -1) + 1)
    if above[0]:
        starts.insert(0, 0)
    if above[-1]:
        stops.append(y.size)

    # Noiseless tails decay monotonically to machine zero; treat anything
    # this small as flat so a fragment does not swallow the whole baseline.
    flat = split_floor * 1e-3
    frags = []
    prev_stop = 0
    for s, e in zip(starts, stops):
        lo = s
        while lo > prev_stop and y[lo - 1] < y[lo] and y[lo] > flat:
            lo -= 1
        hi = e
        while hi < y.size and y[hi] < y[hi - 1] and y[hi - 1] > flat:
            hi += 1
        # ``hi`` may overrun the next core's left extension; the next core
        # then starts from here.
        frags.append([lo, hi])
        prev_stop = hi
    for i in range(len(frags) - 1):
        if frags[i][1] > frags[i + 1][0]:
            frags[i][1] = frags[i + 1][0]

    merged = True
    while merged and len(frags) > 1:
        merged = False
        for i, (lo, hi) in enumerate(frags):
            if hi - lo >= 3:
                continue
            left_gap = lo - frags[i - 1][1] if i > 0 else np.inf
            right_gap = frags[i + 1][0] - hi if i + 1 < len(frags) else np.inf
            j = i - 1 if left_gap <= right_gap else i + 1
            a, b = sorted((i, j))
            frags[a] = [frags[a][0], frags[b][1]]
            del frags[b]
            merged = True
            break
    return [Fragment(int(lo), int(hi)) for lo, hi in frags]


def _kmeanspp(x, w, k, rng):
    p = w / w.sum()
    centers = [x[rng.choice(x.size, p=p)]]
    for _ in range(1, k):
        d2 = np.min((x[:, None] - np.asarray(centers)[None, :]) ** 2, axis=1)
        q = w * d2
        q = p if q.sum() <= 0 else q / q.sum()
        centers.append(x[rng.choice(x.size, p=q)])
    return np.sort(np.asarray(centers, dtype=float))


def _peak_seeds(x, y, k, fallback):
    """Centers at the ``k`` highest local maxima, topped up from ``fallback``."""
    inner = (y[1:-1] >= y[:-2]) & (y[1:-1] > y[2:])
    idx = np.flatnonzero(inner) + 1
    idx = idx[np.argsort(-y[idx], kind="stable")][:k]
    centers = list(x[idx])
    for c in fallback:
        if len(centers) >= k:
            break
        centers.append(c)
    return np.sort(np.asarray(centers, dtype=float))


def em_decompose(
    tau,
    y,
    max_components: int = 4,
    max_iter: int = 500,
    tol: float = 1e-8,
    seed: int = 0,
    count_scale: float = 20.0,
) -> FragmentFit:
    """Fit one fragment as a weighted Gaussian mixture over tau.

    The samples are weighted by ``count_scale * y`` (y measured in counts of
    ``1 / count_scale``), and the number of components is picked by BIC over
    ``1..max_components`` with the total count as the sample size. Each size
    is started from k-means++ seeds and from the highest local maxima; the
    better likelihood is kept.

    Returns
    -------
    FragmentFit
        ``components`` sorted by center; ``bic`` of the selected model;
        ``converged`` False when EM hit ``max_iter``.
    """
    from ._kernels import em_weighted

    tau = np.asarray(tau, dtype=float)
    y = np.clip(np.asarray(y, dtype=float), 0.0, None)
    if tau.size < 3:
        raise DomainError("a fragment needs at least 3 samples")
    step = float(np.median(np.diff(tau)))
    mass = float(y.sum())
    if mass <= 0:
        return FragmentFit(-1, [], float("nan"), True, 0.0)
    # Work in units of the grid step so the numbers stay O(1).
    x = (tau - tau[0]) / step
    w = count_scale * y
    n_eff = float(w.sum())
    spread = float(np.sqrt(np.sum(y * (x - np.sum(y * x) / mass) ** 2) / mass))
    best = None
    for k in range(1, max_components + 1):
        if k > np.count_nonzero(y):
            break
        rng = np.random.default_rng(int(seed) * 7919 + k)
        pp = _kmeanspp(x, y, k, rng)
        sig0 = np.full(k, max(spread / k, 1.0))
        pi0 = np.full(k, 1.0 / k)
        fit = None
        for mu0 in (pp, _peak_seeds(x, y, k, pp)):
            cand = em_weighted(x, w, mu0, sig0, pi0, 0.5, max_iter, tol)
            if fit is None or cand[3] > fit[3] + 1e-12 * abs(fit[3]):
                fit = cand
        pi, mu, sigma, ll, conv = fit
        alive = pi > 0
        n_par = 3 * int(alive.sum()) - 1
        bic = -2.0 * ll + n_par * np.log(max(n_eff, 1.0 + 1e-9))
        if best is None or bic < best[0] - 1e-9 * abs(best[0]):
            best = (bic, pi[alive], mu[alive], sigma[alive], conv)
    bic, pi, mu, sigma, conv = best
    comps = [
        GaussianComponent(a=float(p * mass / (s * SQRT_2PI)), mu=float(tau[0] + m * step), sigma=float(s * step))
        for p, m, s in zip(pi, mu, sigma)
    ]
    comps.sort(key=lambda c: c.mu)
    resid = y - reconstruct(comps, tau)
    return FragmentFit(-1, comps, float(bic), bool(conv), float(np.sqrt(np.mean(resid**2))))


def prune(components: Sequence[GaussianComponent], threshold: float) -> List[GaussianComponent]:
    """Drop components whose amplitude is smaller than ``threshold``."""
    return [c for c in components if not c.a < threshold]


def reconstruct(components: Sequence[GaussianComponent], tau) -> np.ndarray:
    """Sum of ``a exp(-(tau - mu)^2 / 2 sigma^2)`` over components."""
    tau = np.asarray(tau, dtype=float)
    out = np.zeros_like(tau)
    for c in components:
        out += c.a * np.exp(-0.5 * ((tau - c.mu) / c.sigma) ** 2)
    return out


class GaussianDecomposition(BaseEstimator):
    """Decompose a dip spectrum ``y(tau)`` into Gaussian components.

    Parameters
    ----------
    threshold : float, default=0.05
        Components with a smaller peak height are discarded.
    split_floor : float or None, default=None
        Fragment floor; ``None`` means ``threshold / 2``.
    max_components : int, default=4
        Largest mixture size tried per fragment.
    max_iter : int, default=500
    tol : float, default=1e-8
        Relative log-likelihood change that stops EM.
    count_scale : float, default=20.0
        Samples enter EM as ``count_scale * y`` counts; this sets how much
        likelihood gain BIC demands per extra component.
    random_state : int, default=0
        Base seed; fragment ``i`` is seeded with ``random_state + i``.

    Attributes
    ----------
    components_ : list of GaussianComponent
        Surviving components sorted by center.
    fragments_ : list of Fragment
    fragment_fits_ : list of FragmentFit
    """

    def __init__(
        self, threshold=0.05, split_floor=None, max_components=4, max_iter=500, tol=1e-8, count_scale=20.0, random_state=0
    ):
        self.threshold = threshold
        self.split_floor = split_floor
        self.max_components = max_components
        self.max_iter = max_iter
        self.tol = tol
        self.count_scale = count_scale
        self.random_state = random_state

    def fit(self, tau, y):
        tau, y = check_signal_arrays(tau, y, require_uniform=False)
        floor = self.threshold / 2.0 if self.split_floor is None else self.split_floor
        self.fragments_ = split_fragments(y, floor)
        fits = []
        for i, frag in enumerate(self.fragments_):
            sl = slice(frag.start, frag.stop)
            if y[sl].max() < self.threshold:
                # Every component of such a fragment would be pruned.
                fits.append(FragmentFit(i, [], float("nan"), True, float(np.sqrt(np.mean(y[sl] ** 2)))))
                continue
            fit = em_decompose(
                tau[sl], y[sl], self.max_components, self.max_iter, self.tol,
                seed=self.random_state + i, count_scale=self.count_scale,
            )
            fit.fragment_id = i
            fits.append(fit)
        self.fragment_fits_ = fits
        comps = [c for f in fits for c in prune(f.components, self.threshold)]
        self.components_ = sorted(comps, key=lambda c: c.mu)
        return self

    def predict(self, tau):
        """Reconstructed dip spectrum at ``tau``."""
        return reconstruct(self.components_, tau)

    def write_debug_csv(self, path):
        """Per-fragment component table (all components, before pruning)."""
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["fragment_id", "a", "mu_s", "sigma_s", "bic", "converged"])
            for f in self.fragment_fits_:
                for c in f.components:
                    w.writerow([f.fragment_id, repr(c.a), repr(c.mu), repr(c.sigma), repr(f.bic), int(f.converged)])
