"""Trace preprocessing, overlap-add reconstruction and pulse post-processing."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import sparse
from scipy.signal import butter, sosfiltfilt
from scipy.sparse.linalg import spsolve

from .spectral import HR_BAND_HZ, ZoomSpec, czt, hr_zoom_spec

DETREND_LAMBDA = 100.0
DEFAULT_WINDOW = 150
EVAL_WINDOW = 300
EVAL_STRIDE = 290


@dataclass
class RgbTrace:
    """Per-frame mean skin colour, ``samples`` of shape ``[T, 3]``."""

    samples: np.ndarray
    sample_rate_hz: float
    ppg_gt: np.ndarray | None = None
    hr_gt_bpm: float | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=float)
        if self.samples.ndim != 2 or self.samples.shape[1] != 3:
            raise ValueError(f"samples must be [T, 3], got {self.samples.shape}")
        if not self.sample_rate_hz > 0:
            raise ValueError(f"sample rate must be positive, got {self.sample_rate_hz}")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("samples contain non-finite values")
        if self.ppg_gt is not None:
            self.ppg_gt = np.asarray(self.ppg_gt, dtype=float)
            if self.ppg_gt.shape != (len(self),):
                raise ValueError("ppg_gt length must match the number of frames")

    def __len__(self):
        return self.samples.shape[0]

    @property
    def duration_s(self) -> float:
        return len(self) / self.sample_rate_hz

    def crop(self, start: int, length: int) -> "RgbTrace":
        stop = start + length
        ppg = None if self.ppg_gt is None else self.ppg_gt[start:stop]
        return replace(self, samples=self.samples[start:stop], ppg_gt=ppg)

    def scaled(self, k: float) -> "RgbTrace":
        return replace(self, samples=self.samples * k)


@dataclass
class WindowedTraces:
    windows: np.ndarray  # [N, L, C]
    stride: int
    origin_length: int

    @property
    def window_len(self) -> int:
        return self.windows.shape[1]

    def __len__(self):
        return self.windows.shape[0]


@dataclass
class PulseSignal:
    values: np.ndarray
    sample_rate_hz: float
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)

    def __len__(self):
        return self.values.shape[0]


def normalize_trace(c) -> np.ndarray:
    """Divide each channel by its temporal mean and subtract one."""
    samples = c.samples if isinstance(c, RgbTrace) else np.asarray(c, dtype=float)
    mu = samples.mean(axis=0)
    if np.any(mu <= 0):
        raise ValueError(f"channel means must be positive, got {mu}")
    return samples / mu - 1


def n_windows(length: int, window_len: int, stride: int) -> int:
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if window_len > length:
        raise ValueError(f"window length {window_len} exceeds trace length {length}")
    return (length - window_len) // stride + 1


def make_windows(c_prime, window_len: int = DEFAULT_WINDOW, stride: int = 1) -> WindowedTraces:
    """Overlapping windows of a ``[T, C]`` (or ``[T]``) array, re-centred per channel."""
    x = np.asarray(c_prime, dtype=float)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    count = n_windows(x.shape[0], window_len, stride)
    view = np.lib.stride_tricks.sliding_window_view(x, window_len, axis=0)[::stride][:count]
    windows = np.moveaxis(view, -1, 1).copy()  # [N, L, C]
    windows -= windows.mean(axis=1, keepdims=True)
    if squeeze:
        windows = windows[..., 0]
    return WindowedTraces(windows, stride, x.shape[0])


def taper(window_len: int) -> np.ndarray:
    """Hann taper without the zero end-points, so every sample keeps positive weight."""
    return np.hanning(window_len + 2)[1:-1]


def overlap_add(windows, stride: int, length: int, sample_rate_hz: float = 30.0,
                standardize: bool = True) -> PulseSignal:
    """Taper, accumulate and weight-normalize ``[N, L]`` windows into a length-``length`` pulse.

    With ``standardize`` each window is centred and scaled to unit standard deviation
    first; zero-variance windows are skipped with a warning.
    """
    w = np.array(windows, dtype=float)
    if w.ndim != 2:
        raise ValueError(f"windows must be [N, L], got {w.shape}")
    count, win = w.shape
    if (count - 1) * stride + win > length:
        raise ValueError("window geometry overruns the output length")
    keep = np.ones(count, dtype=bool)
    if standardize:
        w -= w.mean(axis=1, keepdims=True)
        sd = w.std(axis=1)
        keep = sd > 0
        if not keep.any():
            raise ValueError("all windows have zero variance")
        if not keep.all():
            warnings.warn(f"skipping {int((~keep).sum())} zero-variance window(s)", stacklevel=2)
        w[keep] /= sd[keep, None]
    tap = taper(win)
    idx = np.arange(count)[:, None] * stride + np.arange(win)[None, :]
    acc = np.bincount(idx[keep].ravel(), weights=(w[keep] * tap).ravel(), minlength=length)
    weight = np.bincount(idx[keep].ravel(), weights=np.broadcast_to(tap, w[keep].shape).ravel(),
                         minlength=length)
    out = np.divide(acc, weight, out=np.zeros(length), where=weight > 0)
    return PulseSignal(out, sample_rate_hz)


def _values(p) -> tuple[np.ndarray, float | None]:
    if isinstance(p, PulseSignal):
        return p.values, p.sample_rate_hz
    return np.asarray(p, dtype=float), None


def detrend(p, lam: float = DETREND_LAMBDA):
    """Smoothness-priors detrending: subtract ``(I + lam^2 D2^T D2)^-1 p``."""
    x, fs = _values(p)
    if not lam > 0:
        raise ValueError("lambda must be positive")
    n = x.shape[0]
    if n < 3:
        raise ValueError("need at least 3 samples")
    ones = np.ones(n)
    d2 = sparse.diags([ones[:-2], -2 * ones[:-2], ones[:-2]], [0, 1, 2], shape=(n - 2, n))
    system = (sparse.identity(n) + lam**2 * (d2.T @ d2)).tocsc()
    out = x - spsolve(system, x)
    return PulseSignal(out, fs) if fs is not None else out


def bandpass(p, f_lo: float = HR_BAND_HZ[0], f_hi: float = HR_BAND_HZ[1],
             sample_rate_hz: float | None = None, order: int = 2):
    """Zero-phase Butterworth band-pass (forward-backward)."""
    x, fs = _values(p)
    fs = fs if fs is not None else sample_rate_hz
    if fs is None:
        raise ValueError("sample rate required for a plain array")
    if not 0 < f_lo < f_hi < fs / 2:
        raise ValueError(f"band [{f_lo}, {f_hi}] Hz outside (0, {fs / 2}) Hz")
    sos = butter(order, [f_lo, f_hi], btype="bandpass", fs=fs, output="sos")
    out = sosfiltfilt(sos, x)
    return PulseSignal(out, fs) if isinstance(p, PulseSignal) else out


def postprocess(p: PulseSignal, lam: float = DETREND_LAMBDA) -> PulseSignal:
    """Detrend then band-pass to the heart-rate band."""
    return bandpass(detrend(p, lam))


def estimate_hr(p, spec: ZoomSpec | None = None, sample_rate_hz: float | None = None) -> float:
    """Heart rate in BPM from the strongest zoomed CZT bin in the heart-rate band."""
    x, fs = _values(p)
    fs = fs if fs is not None else sample_rate_hz
    if spec is None:
        if fs is None:
            raise ValueError("need a ZoomSpec or a sample rate")
        spec = hr_zoom_spec(fs, x.shape[0])
    if fs is not None and fs != spec.sample_rate_hz:
        raise ValueError("ZoomSpec sample rate does not match the signal")
    if x.shape[0] < 2 * spec.sample_rate_hz:
        raise ValueError("need at least 2 s of samples")
    mag = np.abs(czt(x, spec))
    if not np.any(mag > 0):
        raise ValueError("signal has no energy in the heart-rate band")
    return 60.0 * float(spec.freqs_hz[int(np.argmax(mag))])
