"""Trace-level versions of the colour-space, time-flip and occlusion views used for
spectral contrastive training."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .signal import RgbTrace

VIEW_LABELS = ("original", "hsv", "lab", "flip", "occlusion")
DEFAULT_OCCLUSION = 0.3

# sRGB (D65) -> XYZ
_RGB_TO_XYZ = np.array([
    [0.412453, 0.357580, 0.180423],
    [0.212671, 0.715160, 0.072169],
    [0.019334, 0.119193, 0.950227],
])
# reference white taken as the image of RGB (1, 1, 1), so white has a* = b* = 0 exactly
_WHITE_D65 = _RGB_TO_XYZ.sum(axis=1)


@dataclass
class RegionTraceGrid:
    """Mean RGB of each skin region: ``regions`` is ``[R, T, 3]``, R = rows * cols."""

    regions: np.ndarray
    grid_dims: tuple[int, int]
    sample_rate_hz: float

    def __post_init__(self):
        self.regions = np.asarray(self.regions, dtype=float)
        rows, cols = self.grid_dims
        if self.regions.ndim != 3 or self.regions.shape[2] != 3:
            raise ValueError(f"regions must be [R, T, 3], got {self.regions.shape}")
        if rows * cols != self.regions.shape[0] or rows * cols < 1:
            raise ValueError(f"grid {self.grid_dims} does not match {self.regions.shape[0]} regions")

    @property
    def n_frames(self) -> int:
        return self.regions.shape[1]

    def mean_trace(self, **kwargs) -> RgbTrace:
        return RgbTrace(self.regions.mean(axis=0), self.sample_rate_hz, **kwargs)

    def crop(self, start: int, length: int) -> "RegionTraceGrid":
        return RegionTraceGrid(self.regions[:, start:start + length], self.grid_dims,
                               self.sample_rate_hz)


@dataclass
class ViewSet:
    views: list[tuple[str, RgbTrace]]

    @property
    def labels(self) -> list[str]:
        return [label for label, _ in self.views]

    @property
    def traces(self) -> list[RgbTrace]:
        return [trace for _, trace in self.views]

    def __len__(self):
        return len(self.views)


def _unit_range(samples: np.ndarray) -> np.ndarray:
    peak = samples.max()
    if not peak > 0:
        raise ValueError("trace has no positive intensity")
    return samples / peak


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """Hexcone HSV of ``[..., 3]`` values in [0, 1]; hue in [0, 1), 0 when achromatic."""
    rgb = np.asarray(rgb, dtype=float)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    vmax = rgb.max(axis=-1)
    vmin = rgb.min(axis=-1)
    delta = vmax - vmin
    safe = np.where(delta > 0, delta, 1.0)
    hue = np.where(
        vmax == r, ((g - b) / safe) % 6.0,
        np.where(vmax == g, (b - r) / safe + 2.0, (r - g) / safe + 4.0),
    ) / 6.0
    hue = np.where(delta > 0, hue, 0.0) % 1.0
    sat = np.where(vmax > 0, delta / np.where(vmax > 0, vmax, 1.0), 0.0)
    return np.stack([hue, sat, vmax], axis=-1)


def rgb_to_lab(rgb: np.ndarray) -> np.ndarray:
    """CIE L*a*b* (D65) of ``[..., 3]`` sRGB values in [0, 1]."""
    rgb = np.asarray(rgb, dtype=float)
    linear = np.where(rgb > 0.04045, ((rgb + 0.055) / 1.055) ** 2.4, rgb / 12.92)
    xyz = linear @ _RGB_TO_XYZ.T / _WHITE_D65
    eps = (6 / 29) ** 3
    f = np.where(xyz > eps, np.cbrt(xyz), xyz / (3 * (6 / 29) ** 2) + 4 / 29)
    lightness = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([lightness, a, b], axis=-1)


def rgb_to_hsv_trace(trace: RgbTrace) -> RgbTrace:
    """HSV of the mean colour per frame, after scaling the trace into [0, 1]."""
    return RgbTrace(rgb_to_hsv(_unit_range(trace.samples)), trace.sample_rate_hz,
                    trace.ppg_gt, trace.hr_gt_bpm)


def rgb_to_lab_trace(trace: RgbTrace) -> RgbTrace:
    """L*a*b* per frame, channels rescaled to L*/100, a*/128, b*/128."""
    lab = rgb_to_lab(_unit_range(trace.samples)) / np.array([100.0, 128.0, 128.0])
    return RgbTrace(lab, trace.sample_rate_hz, trace.ppg_gt, trace.hr_gt_bpm)


def flip_time(trace: RgbTrace) -> RgbTrace:
    ppg = None if trace.ppg_gt is None else trace.ppg_gt[::-1].copy()
    return RgbTrace(trace.samples[::-1].copy(), trace.sample_rate_hz, ppg, trace.hr_gt_bpm)


def occlude_regions(grid: RegionTraceGrid, fraction: float = DEFAULT_OCCLUSION,
                    seed: int | np.random.Generator = 0) -> RgbTrace:
    """Average the grid with ``ceil(fraction * R)`` regions hidden over a random span.

    The span is contiguous and covers 20-60 % of the frames; outside it all regions count.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    n_reg, n_frames = grid.regions.shape[:2]
    n_drop = math.ceil(fraction * n_reg)
    if n_drop >= n_reg:
        raise ValueError("occlusion would leave no visible region")
    rng = np.random.default_rng(seed)
    visible = np.ones((n_reg, n_frames), dtype=bool)
    if n_drop:
        dropped = rng.choice(n_reg, size=n_drop, replace=False)
        span = int(round(rng.uniform(0.2, 0.6) * n_frames))
        start = int(rng.integers(0, n_frames - span + 1))
        visible[np.ix_(dropped, np.arange(start, start + span))] = False
    weights = visible[..., None].astype(float)
    samples = (grid.regions * weights).sum(axis=0) / weights.sum(axis=0)
    return RgbTrace(samples, grid.sample_rate_hz)


def make_views(sample: RgbTrace | RegionTraceGrid, seed: int = 0,
               occlusion: float = DEFAULT_OCCLUSION) -> ViewSet:
    """Original, HSV, LAB, time-flipped and occluded versions of one sample.

    A plain trace has no regions to hide; its fifth view becomes a seeded
    flip of one colour-space view instead, and a warning is issued.
    """
    rng = np.random.default_rng(seed)
    if isinstance(sample, RegionTraceGrid):
        original = sample.mean_trace()
    else:
        original = sample
    views = [
        ("original", original),
        ("hsv", rgb_to_hsv_trace(original)),
        ("lab", rgb_to_lab_trace(original)),
        ("flip", flip_time(original)),
    ]
    if isinstance(sample, RegionTraceGrid):
        views.append(("occlusion", occlude_regions(sample, occlusion, rng)))
    else:
        warnings.warn("no region grid: replacing the occlusion view by a flipped colour view",
                      stacklevel=2)
        convert = rgb_to_hsv_trace if rng.random() < 0.5 else rgb_to_lab_trace
        views.append(("flip_colorspace", flip_time(convert(original))))
    return ViewSet(views)
