"""Chirp-Z transform on unit-circle arcs, its inverse, and band power spectra.

The zoom contour is ``z_k = a * w**(-k)`` with ``a = exp(2j*pi*f_lo/fs)`` and
``w = exp(-2j*pi*delta/fs)``, so bin ``k`` sits at ``f_lo + k*delta`` Hz.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.linalg import lu_factor, lu_solve, matmul_toeplitz

HR_BAND_HZ = (0.66, 2.5)

_UNIT_TOL = 1e-12


class IllConditionedError(np.linalg.LinAlgError):
    """Raised when an exact inverse transform cannot be trusted."""

    def __init__(self, message: str, condition: float):
        super().__init__(message)
        self.condition = condition


@dataclass(frozen=True)
class ZoomSpec:
    """Contour of a unit-circle CZT covering ``[f_lo_hz, f_hi_hz)`` with ``m`` bins."""

    sample_rate_hz: float
    f_lo_hz: float
    f_hi_hz: float
    m: int
    a: complex
    w: complex

    def __post_init__(self):
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if self.m < 1:
            raise ValueError(f"m must be >= 1, got {self.m}")
        if not 0 <= self.f_lo_hz < self.f_hi_hz <= self.sample_rate_hz:
            raise ValueError(f"invalid band [{self.f_lo_hz}, {self.f_hi_hz}) Hz")
        if abs(abs(self.a) - 1) > _UNIT_TOL or abs(abs(self.w) - 1) > _UNIT_TOL:
            raise ValueError("contour must lie on the unit circle (|a| = |w| = 1)")

    @property
    def bin_spacing_hz(self) -> float:
        return (self.f_hi_hz - self.f_lo_hz) / self.m

    @property
    def freqs_hz(self) -> np.ndarray:
        return self.f_lo_hz + np.arange(self.m) * self.bin_spacing_hz

    def resolution_gain(self, n: int) -> float:
        """How many times finer the bin spacing is than an ``n``-point DFT."""
        return (self.sample_rate_hz / n) / self.bin_spacing_hz


def zoom_spec(sample_rate_hz: float, f_lo_hz: float, f_hi_hz: float, m: int) -> ZoomSpec:
    """Build the contour for a zoom on ``[f_lo_hz, f_hi_hz)`` below Nyquist."""
    if not sample_rate_hz > 0:
        raise ValueError(f"sample rate must be positive, got {sample_rate_hz}")
    if not 0 <= f_lo_hz < f_hi_hz <= sample_rate_hz / 2:
        raise ValueError(
            f"band [{f_lo_hz}, {f_hi_hz}) Hz must be increasing and inside Nyquist "
            f"({sample_rate_hz / 2} Hz)"
        )
    if int(m) != m or m < 2:
        raise ValueError(f"m must be an integer >= 2, got {m}")
    m = int(m)
    delta = (f_hi_hz - f_lo_hz) / m
    a = np.exp(2j * np.pi * f_lo_hz / sample_rate_hz)
    w = np.exp(-2j * np.pi * delta / sample_rate_hz)
    return ZoomSpec(float(sample_rate_hz), float(f_lo_hz), float(f_hi_hz), m, complex(a), complex(w))


def hr_zoom_spec(sample_rate_hz: float, m: int) -> ZoomSpec:
    """Zoom on the 0.66-2.5 Hz heart-rate band."""
    return zoom_spec(sample_rate_hz, HR_BAND_HZ[0], HR_BAND_HZ[1], m)


def full_circle_spec(n: int, sample_rate_hz: float = 1.0) -> ZoomSpec:
    """The contour on which the CZT reduces to an ``n``-point DFT."""
    return ZoomSpec(
        float(sample_rate_hz), 0.0, float(sample_rate_hz), int(n), 1 + 0j,
        complex(np.exp(-2j * np.pi / n)),
    )


def _as_signal(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 1:
        raise ValueError(f"expected a 1-D signal, got shape {x.shape}")
    if x.size == 0:
        raise ValueError("empty input")
    if not np.all(np.isfinite(x)):
        raise ValueError("input contains non-finite values")
    return x


def _contour_angles(spec: ZoomSpec, m: int) -> np.ndarray:
    # Angle of z_k, computed from the stored a and w so that hand-built specs work too.
    return np.angle(spec.a) - np.arange(m) * np.angle(spec.w)


@lru_cache(maxsize=64)
def _czt_matrix_cached(spec: ZoomSpec, n: int) -> np.ndarray:
    theta = _contour_angles(spec, spec.m)
    mat = np.exp(-1j * np.outer(theta, np.arange(n)))
    mat.setflags(write=False)
    return mat


def czt_matrix(spec: ZoomSpec, n: int) -> np.ndarray:
    """Dense ``m x n`` matrix with entries ``z_k**(-j)`` (the Vandermonde-diagonal product)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _czt_matrix_cached(spec, int(n))


def czt_direct(x, spec: ZoomSpec) -> np.ndarray:
    """Reference CZT by explicit summation over ``n`` for every bin."""
    x = _as_signal(x)
    z = np.exp(1j * _contour_angles(spec, spec.m))
    out = np.zeros(spec.m, dtype=complex)
    for k in range(spec.m):
        out[k] = np.sum(x * z[k] ** (-np.arange(x.size, dtype=float)))
    return out


def czt(x, spec: ZoomSpec) -> np.ndarray:
    """Chirp-Z transform of a real signal on the contour described by ``spec``."""
    x = _as_signal(x)
    return czt_matrix(spec, x.size) @ x


def czt_bluestein(x, spec: ZoomSpec) -> np.ndarray:
    """O((n + m) log(n + m)) evaluation via the Bluestein chirp identity."""
    x = _as_signal(x)
    n, m = x.size, spec.m
    # Chirp phases are built from angles rather than powers of w to keep accuracy at large k.
    phi_w = np.angle(spec.w)
    kn = np.arange(max(n, m), dtype=float)
    half = np.exp(1j * phi_w * kn**2 / 2)  # w**(k**2/2)
    pre = half[:n] * np.exp(-1j * np.angle(spec.a) * kn[:n]) * x
    col = np.conj(half[:m])
    row = np.conj(half[:n])
    return half[:m] * matmul_toeplitz((col, row), pre)


def dft_ref(x) -> np.ndarray:
    """Textbook DFT by direct O(n^2) summation."""
    x = _as_signal(x)
    n = x.size
    out = np.zeros(n, dtype=complex)
    for k in range(n):
        for j in range(n):
            out[k] += x[j] * np.exp(-2j * np.pi * k * j / n)
    return out


class _Factorization:
    __slots__ = ("lu", "condition")

    def __init__(self, lu, condition):
        self.lu = lu
        self.condition = condition


_fact_lock = threading.Lock()
_fact_cache: dict[tuple[ZoomSpec, int], _Factorization] = {}

# Above this the solve loses more than ~8 of the 16 available digits.
MAX_CONDITION = 1e7


def _factorization(spec: ZoomSpec, n: int) -> _Factorization:
    key = (spec, n)
    with _fact_lock:
        fact = _fact_cache.get(key)
    if fact is None:
        mat = czt_matrix(spec, n)
        fact = _Factorization(lu_factor(mat), float(np.linalg.cond(mat)))
        with _fact_lock:
            _fact_cache[key] = fact
    return fact


def iczt(X, spec: ZoomSpec, n: int) -> np.ndarray:
    """Exact inverse of :func:`czt` for square (``m == n``) transforms.

    Raises :class:`IllConditionedError` when the contour makes the system numerically
    singular; narrow zoom arcs do this at every practical length, and callers that only
    need a band-limited reconstruction should use :func:`iczt_bandlimited`.
    """
    X = np.asarray(X, dtype=complex)
    if X.ndim != 1 or X.size != spec.m:
        raise ValueError(f"expected {spec.m} bins, got shape {X.shape}")
    if spec.m != n:
        raise ValueError(f"inverse requires m == n, got m={spec.m}, n={n}")
    fact = _factorization(spec, n)
    if not fact.condition < MAX_CONDITION:
        raise IllConditionedError(
            f"CZT matrix for band [{spec.f_lo_hz}, {spec.f_hi_hz}) Hz with m=n={n} has "
            f"condition number {fact.condition:.3g}",
            fact.condition,
        )
    return lu_solve(fact.lu, X).real


@lru_cache(maxsize=32)
def bandlimited_inverse_matrix(spec: ZoomSpec, n: int, rcond: float = 1e-3) -> np.ndarray:
    """Real ``n x 2m`` operator mapping stacked ``[Re X; Im X]`` to a time signal.

    It is the truncated-SVD pseudo-inverse of the real-stacked CZT matrix: the
    minimum-norm real signal whose zoomed spectrum best matches ``X`` within the
    well-determined (in-band) subspace.
    """
    mat = czt_matrix(spec, n)
    stacked = np.vstack([mat.real, mat.imag])
    pinv = np.linalg.pinv(stacked, rcond=rcond)
    pinv.setflags(write=False)
    return pinv


def iczt_bandlimited(X, spec: ZoomSpec, n: int, rcond: float = 1e-3) -> np.ndarray:
    """Least-squares band-limited reconstruction of a length-``n`` signal from zoom bins."""
    X = np.asarray(X, dtype=complex)
    if X.shape[-1] != spec.m:
        raise ValueError(f"expected {spec.m} bins, got shape {X.shape}")
    op = bandlimited_inverse_matrix(spec, int(n), float(rcond))
    return np.concatenate([X.real, X.imag], axis=-1) @ op.T


def psd(X) -> np.ndarray:
    """Normalized power distribution ``|X[k]|**2 / sum |X|**2``."""
    X = np.asarray(X)
    if X.size == 0:
        raise ValueError("empty spectrum")
    power = np.abs(X) ** 2
    total = power.sum()
    if not total > 0:
        raise ValueError("spectrum has no energy in band")
    return power / total


def band_psd(x, spec: ZoomSpec) -> np.ndarray:
    """Normalized zoomed power spectrum of a real signal."""
    return psd(czt(x, spec))
