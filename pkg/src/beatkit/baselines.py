"""Handcrafted rPPG references: GREEN, CHROM and POS."""

from __future__ import annotations

import numpy as np

from .signal import PulseSignal, RgbTrace, normalize_trace, overlap_add, postprocess

BASELINE_WINDOW = 48


def green(trace: RgbTrace, post: bool = True) -> PulseSignal:
    """Mean-normalized green channel, optionally detrended and band-passed."""
    g = normalize_trace(trace)[:, 1]
    out = PulseSignal(g, trace.sample_rate_hz, {"method": "green"})
    if post and np.any(g != 0):
        out = PulseSignal(postprocess(out).values, trace.sample_rate_hz, out.info)
    return out


def _window_starts(n: int, window_len: int, stride: int) -> np.ndarray:
    if window_len < 2:
        raise ValueError("window length must be at least 2")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    if n < window_len:
        raise ValueError(f"trace of {n} frames shorter than window {window_len}")
    return np.arange(0, n - window_len + 1, stride)


def _windowed(trace: RgbTrace, window_len: int, stride: int):
    samples = trace.samples
    starts = _window_starts(len(trace), window_len, stride)
    windows = np.stack([samples[s:s + window_len] for s in starts])  # [N, L, 3]
    mu = windows.mean(axis=1, keepdims=True)
    if np.any(mu <= 0):
        raise ValueError("window with non-positive channel mean (zero or invalid trace)")
    return windows / mu


def _assemble(segments: np.ndarray, keep: np.ndarray, trace: RgbTrace, window_len: int,
              stride: int, method: str) -> PulseSignal:
    segments = np.where(keep[:, None], segments, 0.0)
    segments = segments - segments.mean(axis=1, keepdims=True)
    out = overlap_add(segments, stride, len(trace), trace.sample_rate_hz, standardize=False)
    out.info.update(method=method, skipped_windows=int((~keep).sum()))
    return out


def chrom(trace: RgbTrace, window_len: int = BASELINE_WINDOW, stride: int | None = None) -> PulseSignal:
    """Chrominance projection per window with alpha tuning; windows with flat Y are dropped."""
    stride = stride or window_len // 2
    w = _windowed(trace, window_len, stride)
    r, g, b = w[..., 0], w[..., 1], w[..., 2]
    x = 3 * r - 2 * g
    y = 1.5 * r + g - 1.5 * b
    sx, sy = x.std(axis=1), y.std(axis=1)
    keep = sy > 0
    alpha = np.divide(sx, sy, out=np.zeros_like(sx), where=keep)
    s = x - alpha[:, None] * y
    return _assemble(s, keep, trace, window_len, stride, "chrom")


def pos(trace: RgbTrace, window_len: int = BASELINE_WINDOW, stride: int | None = None) -> PulseSignal:
    """Plane-orthogonal-to-skin projection per window.

    A window whose S2 is flat gets alpha = 0 (its S1 alone is used), which keeps
    pure common-mode input at exactly zero instead of failing.
    """
    stride = stride or 1
    w = _windowed(trace, window_len, stride)
    r, g, b = w[..., 0], w[..., 1], w[..., 2]
    s1 = g - b
    s2 = g + b - 2 * r
    sd1, sd2 = s1.std(axis=1), s2.std(axis=1)
    alpha = np.divide(sd1, sd2, out=np.zeros_like(sd1), where=sd2 > 0)
    h = s1 + alpha[:, None] * s2
    out = _assemble(h, np.ones(len(h), dtype=bool), trace, window_len, stride, "pos")
    out.info["flat_s2_windows"] = int((sd2 == 0).sum())
    return out


METHODS = {"green": green, "chrom": chrom, "pos": pos}
