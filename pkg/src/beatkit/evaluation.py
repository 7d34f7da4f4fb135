"""Heart-rate metrics and the windowed evaluation protocol."""

from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .signal import EVAL_STRIDE, EVAL_WINDOW, PulseSignal, RgbTrace, estimate_hr, postprocess


@dataclass
class MetricsReport:
    mae_bpm: float
    rmse_bpm: float
    mape_pct: float
    pearson_rho: float | None
    pairs: list[dict] = field(default_factory=list)
    method: str = ""
    config: dict = field(default_factory=dict)

    @property
    def n_windows(self) -> int:
        return len(self.pairs)

    def to_dict(self) -> dict:
        return asdict(self)

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    def write_pairs_csv(self, path) -> None:
        cols = ("trace", "window", "start", "pred_hr_bpm", "gt_hr_bpm")
        with open(path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore")
            writer.writeheader()
            writer.writerows(self.pairs)


def pearson(x, y) -> float | None:
    """Pearson correlation, or ``None`` when either series is constant."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    dx, dy = x - x.mean(), y - y.mean()
    denom = math.sqrt(float(dx @ dx) * float(dy @ dy))
    if denom == 0:
        return None
    return float(np.clip(dx @ dy / denom, -1.0, 1.0))


def compute_metrics(pred_hrs, gt_hrs, method: str = "", config: dict | None = None,
                    pairs: list[dict] | None = None) -> MetricsReport:
    pred = np.asarray(pred_hrs, dtype=float)
    gt = np.asarray(gt_hrs, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError(f"prediction and ground truth lengths differ: {pred.shape} vs {gt.shape}")
    if pred.size == 0:
        raise ValueError("no heart-rate pairs to score")
    if np.any(gt <= 0):
        raise ValueError("ground-truth heart rates must be positive")
    err = pred - gt
    if pairs is None:
        pairs = [{"pred_hr_bpm": float(p), "gt_hr_bpm": float(g)} for p, g in zip(pred, gt)]
    return MetricsReport(
        mae_bpm=float(np.mean(np.abs(err))),
        rmse_bpm=float(np.sqrt(np.mean(err**2))),
        mape_pct=float(np.mean(np.abs(err) / gt) * 100),
        pearson_rho=pearson(pred, gt),
        pairs=pairs,
        method=method,
        config=config or {},
    )


@dataclass
class EvalProtocol:
    window: int = EVAL_WINDOW
    stride: int = EVAL_STRIDE
    postprocess: bool = True

    def starts(self, length: int) -> list[int]:
        if length < self.window:
            return []
        return list(range(0, length - self.window + 1, self.stride))


def window_hr(pulse, sample_rate_hz: float, post: bool = True) -> float:
    p = pulse if isinstance(pulse, PulseSignal) else PulseSignal(pulse, sample_rate_hz)
    if post:
        p = postprocess(p)
    return estimate_hr(p)


def evaluate_run(method: Callable[[RgbTrace], PulseSignal] | Callable, dataset,
                 protocol: EvalProtocol | None = None, label: str | None = None,
                 names: list[str] | None = None) -> MetricsReport:
    """Score ``method`` on every evaluation window of every trace.

    ``method`` maps a trace to a pulse; it may also accept a list of traces and
    return a list (attribute ``batched = True``), which lets the model run all
    windows at once. Ground truth comes from the stored PPG through the same
    post-processing and estimator.
    """
    protocol = protocol or EvalProtocol()
    traces = [getattr(item, "trace", item) for item in dataset]
    crops, meta = [], []
    for ti, trace in enumerate(traces):
        if trace.ppg_gt is None:
            raise ValueError(f"trace {ti} has no ground-truth PPG")
        starts = protocol.starts(len(trace))
        if not starts:
            warnings.warn(f"trace {ti} shorter than {protocol.window} frames, skipped", stacklevel=2)
            continue
        for wi, s in enumerate(starts):
            crops.append(trace.crop(s, protocol.window))
            meta.append({"trace": names[ti] if names else ti, "window": wi, "start": s})
    if not crops:
        raise ValueError("no evaluation windows")
    if getattr(method, "batched", False):
        pulses = method(crops)
    else:
        pulses = [method(c) for c in crops]
    pred, gt = [], []
    for crop, pulse, m in zip(crops, pulses, meta):
        p_hr = window_hr(pulse, crop.sample_rate_hz, protocol.postprocess)
        g_hr = window_hr(crop.ppg_gt, crop.sample_rate_hz, protocol.postprocess)
        m.update(pred_hr_bpm=p_hr, gt_hr_bpm=g_hr)
        pred.append(p_hr)
        gt.append(g_hr)
    label = label or getattr(method, "__name__", "method")
    return compute_metrics(pred, gt, method=label, config=asdict(protocol), pairs=meta)


METHOD_NAMES = ("green", "chrom", "pos", "beatformer")


def method_callable(name: str, params=None, model_cfg=None):
    """Trace-to-pulse callable for ``name``; ``beatformer`` needs parameters and config.

    Post-processing is left to the protocol so every method is filtered identically.
    """
    from . import baselines
    from .model import forward_many

    if name == "green":
        def run(trace):
            return baselines.green(trace, post=False)
    elif name in ("chrom", "pos"):
        def run(trace):
            return baselines.METHODS[name](trace)
    elif name == "beatformer":
        if params is None or model_cfg is None:
            raise ValueError("beatformer evaluation needs model parameters and config")

        def run(traces):
            return forward_many(traces, params, model_cfg, chunk=256)
        run.batched = True
    else:
        raise ValueError(f"unknown method {name!r}; choose from {METHOD_NAMES}")
    run.__name__ = name
    return run
