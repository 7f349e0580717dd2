"""Diamond lattice enumeration, dipolar hyperfine couplings, random scenarios.

Sites are enumerated about the vacancy, with the NV axis along [111] and the
nitrogen at ``a/4 (1, 1, 1)``. Coordinates are kept as integers in units of
``a/4`` so that ordering and filtering are exact.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field as dc_field
from typing import List, Tuple

import numpy as np

from .exceptions import ConfigurationError, DomainError, ResourceError
from .physics import FieldConfig, SpinParams

LATTICE_CONSTANT = 0.3567e-9
MU0_OVER_4PI = 1e-7
PLANCK = 6.62607015e-34
# Sign applied to d (1 - 3 cos^2 theta); +1 makes on-axis sites negative.
A_SIGN = 1.0
NV_AXIS = np.array([1.0, 1.0, 1.0]) / np.sqrt(3.0)
BATH_OUTER_RADIUS = 6e-9
MAX_SITES = 5_000_000

_FCC = np.array([[0, 0, 0], [0, 2, 2], [2, 0, 2], [2, 2, 0]])
_BASIS = np.concatenate([_FCC, _FCC + 1])  # units of a/4
_NITROGEN = (1, 1, 1)


@dataclass(frozen=True)
class LatticeSite:
    """A 13C site relative to the vacancy.

    ``index`` holds the integer coordinates in units of a/4.
    """

    index: Tuple[int, int, int]

    @property
    def r(self) -> np.ndarray:
        return np.asarray(self.index, dtype=float) * (LATTICE_CONSTANT / 4.0)

    @property
    def r_mag(self) -> float:
        return float(np.sqrt(sum(i * i for i in self.index)) * LATTICE_CONSTANT / 4.0)

    @property
    def cos_theta(self) -> float:
        n = np.sqrt(sum(i * i for i in self.index))
        return float(np.clip(sum(self.index) / (np.sqrt(3.0) * n), -1.0, 1.0))


def lattice_indices(radius_max: float, radius_min: float = 0.0, max_sites: int = MAX_SITES) -> np.ndarray:
    """Integer site coordinates (units of a/4) with ``radius_min < |r| <= radius_max``.

    Rows are sorted by |r| and then lexicographically. The vacancy and the
    nitrogen site are never returned.
    """
    if not radius_max > 0:
        raise DomainError(f"radius_max must be > 0, got {radius_max!r}")
    q = LATTICE_CONSTANT / 4.0
    r2_max = (radius_max / q) ** 2
    r2_min = (radius_min / q) ** 2 if radius_min > 0 else 0.0
    cells = int(np.ceil(radius_max / LATTICE_CONSTANT)) + 1
    estimate = 8 * (2 * cells + 1) ** 3
    if estimate > 8 * max_sites:
        raise ResourceError(f"radius {radius_max!r} m would enumerate ~{estimate} candidate sites (cap {max_sites})")
    n = np.arange(-cells, cells + 1) * 4
    tx, ty, tz = np.meshgrid(n, n, n, indexing="ij")
    trans = np.stack([tx.ravel(), ty.ravel(), tz.ravel()], axis=1)
    pts = (trans[:, None, :] + _BASIS[None, :, :]).reshape(-1, 3)
    r2 = np.einsum("ij,ij->i", pts, pts)
    keep = (r2 > 0) & (r2 <= r2_max * (1 + 1e-12)) & (r2 > r2_min * (1 + 1e-12))
    keep &= ~np.all(pts == np.array(_NITROGEN), axis=1)
    pts, r2 = pts[keep], r2[keep]
    if len(pts) > max_sites:
        raise ResourceError(f"{len(pts)} sites exceed the cap of {max_sites}")
    order = np.lexsort((pts[:, 2], pts[:, 1], pts[:, 0], r2))
    return pts[order]


def diamond_lattice(radius_max: float) -> List[LatticeSite]:
    """All lattice sites with ``0 < |r| <= radius_max`` as :class:`LatticeSite` records."""
    return [LatticeSite(tuple(int(v) for v in row)) for row in lattice_indices(radius_max)]


def hyperfine_arrays(indices, field: FieldConfig):
    """Vectorised secular dipolar couplings ``(A, B)`` in Hz for integer site rows."""
    r = np.asarray(indices, dtype=float) * (LATTICE_CONSTANT / 4.0)
    r = np.atleast_2d(r)
    # elementwise arithmetic (no BLAS) so a site gives the same bits alone or in a batch
    r_mag = np.sqrt(r[:, 0] ** 2 + r[:, 1] ** 2 + r[:, 2] ** 2)
    if np.any(r_mag == 0):
        raise DomainError("site at the vacancy (r = 0) has no dipolar coupling")
    cos_t = (r[:, 0] * NV_AXIS[0] + r[:, 1] * NV_AXIS[1] + r[:, 2] * NV_AXIS[2]) / r_mag
    cos_t = np.clip(cos_t, -1.0, 1.0)
    sin_t = np.sqrt(1.0 - cos_t**2)
    d = MU0_OVER_4PI * field.gamma_e * field.gamma_n * PLANCK / r_mag**3
    A = A_SIGN * d * (1.0 - 3.0 * cos_t**2)
    B = np.abs(3.0 * d * cos_t * sin_t)
    return A, B


def hyperfine_from_position(site: LatticeSite, field: FieldConfig) -> SpinParams:
    """Dipolar (A, B) of a 13C at ``site``; contact terms are neglected."""
    if all(i == 0 for i in site.index):
        raise DomainError("site at the vacancy (r = 0) has no dipolar coupling")
    A, B = hyperfine_arrays([site.index], field)
    return SpinParams(A=float(A[0]), B=float(B[0]))


@dataclass
class ScenarioConfig:
    """Random target spins plus a distant spin bath.

    Ranges are in Hz and apply to ``|A|`` and ``B``; both ends are inclusive.
    With ``unique_couplings`` the targets are drawn from distinct (A, B)
    values rather than from sites, so no two targets coincide.
    ``min_dip_separation`` (Hz) additionally keeps every pair of targets at
    least that far apart in dip frequency.
    """

    n_target_spins: int = 10
    a_range: Tuple[float, float] = (0.0, 100e3)
    b_range: Tuple[float, float] = (5e3, 100e3)
    radius_max: float = 2e-9
    bath_site_count: int = 50000
    bath_a_max: float = 8e3
    bath_b_max: float = 0.25e3
    bath_outer_radius: float = BATH_OUTER_RADIUS
    rng_seed: int = 0
    unique_couplings: bool = True
    min_dip_separation: float = 0.0
    field: FieldConfig = dc_field(default_factory=FieldConfig)

    def __post_init__(self):
        self.a_range = tuple(float(v) for v in self.a_range)
        self.b_range = tuple(float(v) for v in self.b_range)
        if self.n_target_spins < 0 or self.bath_site_count < 0:
            raise ConfigurationError("spin counts must be >= 0")
        for name in ("a_range", "b_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ConfigurationError(f"{name} is empty: {lo!r} > {hi!r}")
        if not self.radius_max > 0:
            raise ConfigurationError("radius_max must be > 0")
        if self.bath_site_count and not self.bath_outer_radius > self.radius_max:
            raise ConfigurationError("bath_outer_radius must exceed radius_max")
        if not self.min_dip_separation >= 0:
            raise ConfigurationError("min_dip_separation must be >= 0")
        if not 0 <= int(self.rng_seed) < 2**64:
            raise ConfigurationError("rng_seed must be an unsigned 64-bit integer")

    def to_dict(self):
        d = asdict(self)
        d["a_range"] = list(self.a_range)
        d["b_range"] = list(self.b_range)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if "field" in d and isinstance(d["field"], dict):
            d["field"] = FieldConfig(**d["field"])
        return cls(**d)


@dataclass
class Scenario:
    """Ground truth of a synthesized measurement."""

    config: ScenarioConfig
    targets: List[SpinParams]
    target_sites: List[Tuple[int, int, int]]
    bath_A: np.ndarray
    bath_B: np.ndarray

    @property
    def bath(self) -> List[SpinParams]:
        return [SpinParams(float(a), float(b)) for a, b in zip(self.bath_A, self.bath_B)]


def _target_pool(config: ScenarioConfig):
    idx = lattice_indices(config.radius_max)
    A, B = hyperfine_arrays(idx, config.field) if len(idx) else (np.empty(0), np.empty(0))
    a_lo, a_hi = config.a_range
    b_lo, b_hi = config.b_range
    ok = (np.abs(A) >= a_lo) & (np.abs(A) <= a_hi) & (B >= b_lo) & (B <= b_hi)
    idx, A, B = idx[ok], A[ok], B[ok]
    if config.unique_couplings and len(idx):
        # Symmetry-equivalent sites share (A, B); keep the first of each class
        # so two targets can never be indistinguishable.
        key = np.round(np.stack([A, B], axis=1), 3)
        _, first = np.unique(key, axis=0, return_index=True)
        first = np.sort(first)
        idx, A, B = idx[first], A[first], B[first]
    return idx, A, B


def bath_pool(config: ScenarioConfig):
    idx = lattice_indices(config.bath_outer_radius, radius_min=config.radius_max)
    A, B = hyperfine_arrays(idx, config.field)
    ok = (np.abs(A) < config.bath_a_max) & (B < config.bath_b_max)
    return A[ok], B[ok]


def _separated_pick(A, B, config: ScenarioConfig, rng):
    """Walk a random permutation of the pool, keeping sites that stay resolvable."""
    w_L = config.field.omega_L
    f_p = (np.sqrt((2 * np.pi * A + w_L) ** 2 + (2 * np.pi * B) ** 2) + w_L) / (4 * np.pi)
    chosen = []
    for i in rng.permutation(len(A)):
        if all(abs(f_p[i] - f_p[j]) >= config.min_dip_separation for j in chosen):
            chosen.append(int(i))
            if len(chosen) == config.n_target_spins:
                return np.sort(chosen)
    raise ConfigurationError(
        f"cannot place {config.n_target_spins} targets {config.min_dip_separation:g} Hz apart in dip frequency"
    )


def make_scenario(config: ScenarioConfig) -> Scenario:
    """Draw target spins and a bath deterministically from ``config.rng_seed``."""
    rng = np.random.default_rng(int(config.rng_seed))
    idx, A, B = _target_pool(config)
    if len(idx) < config.n_target_spins:
        raise ConfigurationError(
            f"only {len(idx)} lattice sites within {config.radius_max:g} m satisfy "
            f"|A| in {config.a_range} and B in {config.b_range}; {config.n_target_spins} requested"
        )
    if config.min_dip_separation > 0 and config.n_target_spins:
        pick = _separated_pick(A, B, config, rng)
    else:
        pick = np.sort(rng.choice(len(idx), size=config.n_target_spins, replace=False)) if config.n_target_spins else []
    targets = [SpinParams(float(A[i]), float(B[i])) for i in pick]
    sites = [tuple(int(v) for v in idx[i]) for i in pick]

    bath_A = bath_B = np.empty(0)
    if config.bath_site_count:
        pool_A, pool_B = bath_pool(config)
        if len(pool_A) < config.bath_site_count:
            raise ConfigurationError(
                f"only {len(pool_A)} bath sites between {config.radius_max:g} m and {config.bath_outer_radius:g} m "
                f"satisfy |A| < {config.bath_a_max:g} Hz and B < {config.bath_b_max:g} Hz; "
                f"{config.bath_site_count} requested"
            )
        # separate stream: the bath does not depend on how many targets were drawn
        bath_rng = np.random.default_rng(np.random.SeedSequence(int(config.rng_seed), spawn_key=(1,)))
        take = np.sort(bath_rng.choice(len(pool_A), size=config.bath_site_count, replace=False))
        bath_A, bath_B = pool_A[take], pool_B[take]
    return Scenario(config=config, targets=targets, target_sites=sites, bath_A=bath_A, bath_B=bath_B)


def reachable_mask(a_edges, b_edges, field: FieldConfig = FieldConfig(), radius_max: float = 2e-9) -> np.ndarray:
    """Boolean grid, True where some lattice site within ``radius_max`` falls in the (A, B) cell.

    ``a_edges`` and ``b_edges`` are bin edges in Hz; the result has shape
    ``(len(a_edges) - 1, len(b_edges) - 1)``.
    """
    A, B = hyperfine_arrays(lattice_indices(radius_max), field)
    counts, _, _ = np.histogram2d(A, B, bins=[np.asarray(a_edges), np.asarray(b_edges)])
    return counts > 0
