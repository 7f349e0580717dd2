"""Closed-form CPMG coherence physics of an NV electron coupled to 13C spins.

All hyperfine components are stored as ordinary frequencies in Hz and are
multiplied by 2*pi wherever an angular quantity enters a formula. Times are
in seconds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .exceptions import DomainError, InconsistentConstraintsError

TWO_PI = 2.0 * np.pi
FWHM_PER_SIGMA = 2.0 * np.sqrt(2.0 * np.log(2.0))

GAMMA_E_HZ_PER_T = 20824e6
GAMMA_N_HZ_PER_T = 10.708e6


@dataclass(frozen=True)
class FieldConfig:
    """Static field along the NV axis and the gyromagnetic ratios.

    Parameters
    ----------
    B0 : float
        Field in tesla (400 G = 0.04 T).
    gamma_e, gamma_n : float
        Electron and 13C gyromagnetic ratios in Hz/T.
    """

    B0: float = 0.04
    gamma_e: float = GAMMA_E_HZ_PER_T
    gamma_n: float = GAMMA_N_HZ_PER_T

    def __post_init__(self):
        for name in ("B0", "gamma_e", "gamma_n"):
            value = getattr(self, name)
            if not np.isfinite(value) or value <= 0:
                raise DomainError(f"{name} must be finite and > 0, got {value!r}")

    @property
    def f_L(self) -> float:
        """13C Larmor frequency in Hz."""
        return self.gamma_n * self.B0

    @property
    def omega_L(self) -> float:
        """13C Larmor angular frequency in rad/s."""
        return TWO_PI * self.gamma_n * self.B0

    @property
    def period(self) -> float:
        """Dip period ``T = pi / omega_L`` of an uncoupled spin, in seconds."""
        return np.pi / self.omega_L


@dataclass(frozen=True)
class SpinParams:
    """Hyperfine pair of one nuclear spin, in Hz.

    ``A`` is the signed parallel component, ``B >= 0`` the perpendicular one.
    """

    A: float
    B: float

    def __post_init__(self):
        if not (np.isfinite(self.A) and np.isfinite(self.B)):
            raise DomainError(f"hyperfine components must be finite, got A={self.A!r}, B={self.B!r}")
        if self.B < 0:
            raise DomainError(f"B must be >= 0, got {self.B!r}")

    @property
    def A_kHz(self) -> float:
        return self.A * 1e-3

    @property
    def B_kHz(self) -> float:
        return self.B * 1e-3


@dataclass(frozen=True)
class SequenceConfig:
    """CPMG pulse count and uniform tau grid (seconds)."""

    N: int = 32
    start: float = 5e-9
    stop: float = 50e-6
    step: float = 5e-9

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise DomainError(f"N must be a positive integer, got {self.N!r}")
        if not self.step > 0:
            raise DomainError(f"step must be > 0, got {self.step!r}")
        if not self.stop > self.start:
            raise DomainError(f"stop ({self.stop!r}) must exceed start ({self.start!r})")

    def grid(self) -> np.ndarray:
        n = int(round((self.stop - self.start) / self.step)) + 1
        return self.start + self.step * np.arange(n)


@dataclass(frozen=True)
class Signal:
    """A sampled coherence trace ``p_x(tau)``."""

    tau: np.ndarray
    p_x: np.ndarray

    def __post_init__(self):
        tau = np.asarray(self.tau, dtype=float)
        p_x = np.asarray(self.p_x, dtype=float)
        if tau.ndim != 1 or tau.shape != p_x.shape:
            raise DomainError("tau and p_x must be 1-D arrays of equal length")
        if tau.size > 1 and np.any(np.diff(tau) <= 0):
            raise DomainError("tau must be strictly increasing")
        object.__setattr__(self, "tau", tau)
        object.__setattr__(self, "p_x", p_x)

    @property
    def step(self) -> float:
        return float(self.tau[1] - self.tau[0]) if self.tau.size > 1 else 0.0


class RotationGeometry(NamedTuple):
    """Nuclear rotation quantities entering the coherence function."""

    alpha: np.ndarray
    beta: np.ndarray
    omega_tilde: float
    m_z: float
    m_x: float
    phi: np.ndarray
    dot_product: np.ndarray


class DipSensitivity(NamedTuple):
    depth: float
    d_depth_dB: float
    log_sensitivity: float


def _omega_tilde(A, B, omega_L):
    return np.sqrt((TWO_PI * A + omega_L) ** 2 + (TWO_PI * B) ** 2)


def rotation_geometry(spin: SpinParams, field: FieldConfig, tau) -> RotationGeometry:
    """Rotation angles and axis overlap for one spin at the given tau values."""
    tau = np.asarray(tau, dtype=float)
    w_L = field.omega_L
    w_t = float(_omega_tilde(spin.A, spin.B, w_L))
    if not np.isfinite(w_t) or w_t == 0.0:
        raise DomainError(f"effective precession frequency vanishes for {spin}")
    m_z = (TWO_PI * spin.A + w_L) / w_t
    m_x = TWO_PI * spin.B / w_t
    one_minus, cos_phi = _one_minus_dot(m_z, m_x, w_t * tau, w_L * tau)
    return RotationGeometry(
        alpha=w_t * tau,
        beta=w_L * tau,
        omega_tilde=w_t,
        m_z=m_z,
        m_x=m_x,
        phi=np.arccos(cos_phi),
        dot_product=1.0 - one_minus,
    )


def _one_minus_dot(m_z, m_x, alpha, beta):
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cos_phi = ca * cb - m_z * sa * sb
    denom = 1.0 + cos_phi
    num = m_x**2 * (1.0 - ca) * (1.0 - cb)
    # 0/0 only where both rotations are trivial; the overlap is then 1.
    one_minus = np.divide(num, denom, out=np.zeros(np.broadcast(num, denom).shape), where=denom > 1e-300)
    return np.clip(one_minus, 0.0, 2.0), np.clip(cos_phi, -1.0, 1.0)


def _coherence_factors(A, B, omega_L, N, tau):
    """``M`` for each spin (rows) at each tau (columns)."""
    A = np.asarray(A, dtype=float)[:, None]
    B = np.asarray(B, dtype=float)[:, None]
    tau = np.asarray(tau, dtype=float)[None, :]
    w_t = _omega_tilde(A, B, omega_L)
    if np.any(w_t == 0.0) or not np.all(np.isfinite(w_t)):
        raise DomainError("effective precession frequency vanishes for at least one spin")
    one_minus, cos_phi = _one_minus_dot((TWO_PI * A + omega_L) / w_t, TWO_PI * B / w_t, w_t * tau, omega_L * tau)
    return 1.0 - one_minus * np.sin(0.5 * N * np.arccos(cos_phi)) ** 2


def coherence_single(spin: SpinParams, field: FieldConfig, N: int, tau):
    """Coherence of the electron coupled to one nuclear spin.

    Returns
    -------
    M, p_x : ndarray
        The coherence function and the preserved-state probability ``(M + 1) / 2``.
    """
    _check_N(N)
    tau = np.asarray(tau, dtype=float)
    M = _coherence_factors([spin.A], [spin.B], field.omega_L, N, np.atleast_1d(tau))[0]
    M = M.reshape(tau.shape)
    return M, 0.5 * (M + 1.0)


# Above this many spins the compiled product kernel is used.
_KERNEL_MIN_SPINS = 64
_CHUNK_ELEMENTS = 2_000_000


def coherence_product(A, B, field: FieldConfig, N: int, tau) -> np.ndarray:
    """Product of ``M_i`` over spins given as parallel arrays of A and B (Hz)."""
    _check_N(N)
    A = np.asarray(A, dtype=float).ravel()
    B = np.asarray(B, dtype=float).ravel()
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    if A.shape != B.shape:
        raise DomainError("A and B arrays must have equal length")
    if A.size == 0:
        return np.ones_like(tau)
    if A.size >= _KERNEL_MIN_SPINS:
        from ._kernels import coherence_product_kernel

        return coherence_product_kernel(A, B, field.omega_L, int(N), tau)
    out = np.ones_like(tau)
    rows = max(1, _CHUNK_ELEMENTS // max(tau.size, 1))
    for start in range(0, A.size, rows):
        out *= np.prod(_coherence_factors(A[start:start + rows], B[start:start + rows], field.omega_L, N, tau), axis=0)
    return out


def coherence_multi(spins: Sequence[SpinParams], field: FieldConfig, N: int, tau) -> np.ndarray:
    """``p_x`` for independent spins, ``(1 + prod_i M_i) / 2``. Empty input gives 1."""
    A = [s.A for s in spins]
    B = [s.B for s in spins]
    return 0.5 * (1.0 + coherence_product(A, B, field, N, tau))


def dip_frequency(spin: SpinParams, field: FieldConfig) -> float:
    """Dip frequency ``(omega_tilde + omega_L) / 4 pi`` in Hz."""
    return float((_omega_tilde(spin.A, spin.B, field.omega_L) + field.omega_L) / (2.0 * TWO_PI))


def dip_position(spin: SpinParams, field: FieldConfig, k, order: str = "expanded"):
    """tau of the k-th resonance dip (k >= 1).

    ``order="linear"`` is ``(2k - 1) pi / (omega_tilde + omega_L)``; ``"expanded"``
    adds the alternating second- and fourth-order corrections in
    ``B / (f_L + A)``.
    """
    k = np.asarray(k)
    if np.any(k < 1):
        raise DomainError("dip index k must be >= 1")
    w_L = field.omega_L
    scale = np.pi / (_omega_tilde(spin.A, spin.B, w_L) + w_L)
    base = 2.0 * k - 1.0
    if order == "linear":
        return scale * base
    if order != "expanded":
        raise ValueError(f"unknown order {order!r}; expected 'linear' or 'expanded'")
    x2 = (spin.B / (field.f_L + spin.A)) ** 2
    sign = np.where(k % 2 == 1, 1.0, -1.0)
    corr = x2 / (2.0 * np.sqrt(2.0)) - x2**2 / (4.0 * np.sqrt(2.0))
    return scale * (base + sign * corr)


def _envelope_halfwidth(spin: SpinParams, field: FieldConfig) -> float:
    w_L = field.omega_L
    w_t = _omega_tilde(spin.A, spin.B, w_L)
    return float(TWO_PI * spin.B / ((w_t + w_L) * w_t))


def lorentzian_envelope(spin: SpinParams, field: FieldConfig, tau, tau_k):
    """Lorentzian approximation of ``1 - n0 . n1`` around the dip at ``tau_k``."""
    if spin.B <= 0:
        raise DomainError("the dip envelope is undefined for B = 0")
    u = (np.asarray(tau, dtype=float) - tau_k) / _envelope_halfwidth(spin, field)
    return 2.0 / (1.0 + u**2)


def sigma_from_params(spin: SpinParams, field: FieldConfig) -> float:
    """Gaussian width (seconds) whose FWHM equals the Lorentzian envelope FWHM."""
    if spin.B <= 0:
        raise DomainError("dip width is undefined for B <= 0")
    return _envelope_halfwidth(spin, field) / np.sqrt(2.0 * np.log(2.0))


def slope_from_params(spin: SpinParams, field: FieldConfig) -> float:
    """Fan-diagram slope ``d tau / d k = 2 pi / (omega_tilde + omega_L) - T``."""
    w_L = field.omega_L
    return float(TWO_PI / (_omega_tilde(spin.A, spin.B, w_L) + w_L) - field.period)


def params_from_slope_sigma(slope: float, sigma: float, field: FieldConfig) -> SpinParams:
    """Closed-form inverse of :func:`slope_from_params` and :func:`sigma_from_params`."""
    T = field.period
    if not np.isfinite(slope) or slope <= -T / 2:
        raise DomainError(f"slope must exceed -T/2 = {-T / 2:.6g} s, got {slope!r}")
    if not np.isfinite(sigma) or sigma <= 0:
        raise DomainError(f"sigma must be > 0, got {sigma!r}")
    w_L = field.omega_L
    w_sum = TWO_PI / (slope + T)
    w_t = w_sum - w_L
    if w_t <= 0:
        raise InconsistentConstraintsError(f"slope {slope!r} implies a non-positive precession frequency")
    b = sigma * np.sqrt(2.0 * np.log(2.0)) * w_sum * w_t
    if b > w_t:
        raise InconsistentConstraintsError(
            f"width {sigma!r} s is too large for slope {slope!r} s/period (no real A)"
        )
    a = math.sqrt(w_t**2 - b**2) - w_L
    return SpinParams(A=a / TWO_PI, B=b / TWO_PI)


def dip_amplitude_sensitivity(spin: SpinParams, field: FieldConfig, N: int) -> DipSensitivity:
    """Small-coupling dip depth and its sensitivity to B.

    ``depth = sin^2((N/2) 2 pi B / omega_tilde)``; ``log_sensitivity`` is the
    weak-coupling limit ``2 / B`` of ``d ln(depth) / dB``, so a fractional
    error in B doubles in the depth.
    """
    _check_N(N)
    w_L = field.omega_L
    a = TWO_PI * spin.A + w_L
    b = TWO_PI * spin.B
    w_t = math.hypot(a, b)
    x = 0.5 * N * b / w_t
    depth = math.sin(x) ** 2
    dx_dB = 0.5 * N * TWO_PI * a**2 / w_t**3
    d_depth = math.sin(2.0 * x) * dx_dB
    log_sens = 2.0 / spin.B if spin.B > 0 else math.inf
    return DipSensitivity(depth=depth, d_depth_dB=d_depth, log_sensitivity=log_sens)


def _check_N(N):
    if int(N) != N or N < 1:
        raise DomainError(f"N must be a positive integer, got {N!r}")
