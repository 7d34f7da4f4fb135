"""Losses and the supervised / spectral-contrastive training loops."""

from __future__ import annotations

import csv
import itertools
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tape, Tensor
from .model import ModelConfig, ModelParams, forward_many, init_params, orthonormal_loss
from .signal import RgbTrace
from .spectral import czt_matrix, hr_zoom_spec
from .views import RegionTraceGrid, make_views

log = logging.getLogger(__name__)

MODES = ("supervised_emd", "supervised_mse", "scl")
UNIT_SUM_TOL = 1e-6


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainRunConfig:
    mode: str = "scl"
    epochs: int = 20
    batch_size: int = 2
    lr_max: float = 5e-4
    alpha: float = 0.5
    gamma: float = 1.0
    seed: int = 0
    sequence_len: int = 300
    val_fraction: float = 0.2
    train_stride: int = 5
    weight_decay: float = 0.01
    emd_norm: str = "bins"
    occlusion: float = 0.3

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.epochs < 1 or self.batch_size < 1 or self.sequence_len < 2:
            raise ValueError("epochs, batch_size and sequence_len must be positive")
        if self.mode == "scl" and self.batch_size < 2:
            raise ValueError("contrastive training needs at least 2 samples per batch")
        if not self.lr_max > 0 or self.alpha < 0 or self.gamma < 0:
            raise ValueError("lr_max must be positive; alpha and gamma non-negative")
        if not 0 <= self.val_fraction < 1:
            raise ValueError("val_fraction must lie in [0, 1)")
        if self.train_stride < 1:
            raise ValueError("train_stride must be >= 1")
        if self.emd_norm not in ("bins", "batch"):
            raise ValueError("emd_norm must be 'bins' or 'batch'")


@dataclass
class LossBreakdown:
    l_or: float = 0.0
    l_emd: float = 0.0
    l_pos: float = 0.0
    l_neg: float = 0.0
    l_scl: float = 0.0
    l_total: float = 0.0
    alpha: float = 0.5
    gamma: float = 1.0
    l_mse: float = 0.0


# ---------------------------------------------------------------- losses


def band_psd(pulse, sample_rate_hz: float) -> Tensor:
    """Unit-sum power spectrum of ``pulse`` on the zoomed heart-rate grid (m = len)."""
    pulse = ad.as_tensor(getattr(pulse, "values", pulse))
    n = pulse.shape[0]
    mat = _stacked(sample_rate_hz, n)
    parts = ad.matmul(Tensor(mat), ad.reshape(pulse, (n, 1)))
    power = ad.square(ad.reshape(parts, (2 * n,)))
    power = power[:n] + power[n:]
    total = ad.sum_(power)
    if total.data <= 0:
        raise ValueError("pulse has no energy in the heart-rate band")
    return ad.div(power, total)


@lru_cache(maxsize=8)
def _stacked(sample_rate_hz: float, n: int) -> np.ndarray:
    mat = czt_matrix(hr_zoom_spec(sample_rate_hz, n), n)
    return np.ascontiguousarray(np.vstack([mat.real, mat.imag]))


def _check_distribution(p: Tensor, label: str):
    data = p.data
    if np.any(data < -UNIT_SUM_TOL):
        raise ValueError(f"{label} has negative mass")
    total = data.sum(axis=-1)
    if np.any(np.abs(total - 1) > UNIT_SUM_TOL):
        raise ValueError(f"{label} is not normalized to unit sum (sum = {np.ravel(total)[0]:.6g})")


def _emd_rows(cdf_a: Tensor, cdf_b: Tensor) -> Tensor:
    return ad.mean(ad.square(cdf_a - cdf_b), axis=-1)


def emd_loss(p, t, norm: str = "bins") -> Tensor:
    """Squared earth mover's distance between unit-sum spectra.

    ``norm="bins"`` averages the squared CDF gap over bins. ``norm="batch"`` sums
    over bins and averages over the leading (batch) axis instead.
    """
    p, t = ad.as_tensor(p), ad.as_tensor(t)
    if p.shape != t.shape:
        raise ValueError(f"spectra shapes differ: {p.shape} vs {t.shape}")
    _check_distribution(p, "prediction")
    _check_distribution(t, "target")
    gap = ad.square(ad.cumsum(p, axis=-1) - ad.cumsum(t, axis=-1))
    if norm == "bins":
        return ad.mean(gap)
    if norm == "batch":
        batch = p.shape[0] if p.ndim > 1 else 1
        return ad.scale(ad.sum_(gap), 1.0 / batch)
    raise ValueError("norm must be 'bins' or 'batch'")


def _standardize(x: Tensor) -> Tensor:
    centred = x - ad.mean(x)
    sd = ad.sqrt(ad.mean(ad.square(centred)))
    if sd.data == 0:
        raise ValueError("cannot standardize a constant signal")
    return ad.div(centred, sd)


def mse_loss(pred, gt_ppg) -> Tensor:
    """Mean squared difference of the standardized waveforms."""
    pred = ad.as_tensor(pred.values if hasattr(pred, "values") else pred)
    gt = ad.as_tensor(np.asarray(gt_ppg, dtype=float) if not isinstance(gt_ppg, Tensor) else gt_ppg)
    if pred.shape != gt.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {gt.shape}")
    return ad.mean(ad.square(_standardize(pred) - _standardize(gt)))


def scl_loss(batch_spectra, gamma: float = 1.0):
    """Intra-sample (positive) and inter-sample (negative) EMD sums with a hinge.

    ``batch_spectra`` is ``[N, V, M]`` (tensor, array or nested lists of 1-D tensors).
    Returns ``(l_pos, l_neg, l_scl)`` as tensors.
    """
    if isinstance(batch_spectra, (list, tuple)):
        rows = [ad.concat([ad.reshape(ad.as_tensor(v), (1, -1)) for v in sample], axis=0)
                for sample in batch_spectra]
        spectra = ad.concat([ad.reshape(r, (1,) + r.shape) for r in rows], axis=0)
    else:
        spectra = ad.as_tensor(batch_spectra)
    if spectra.ndim != 3:
        raise ValueError(f"expected [N, V, M] spectra, got {spectra.shape}")
    n, v, m = spectra.shape
    if n < 2:
        raise ValueError("contrastive loss needs at least 2 samples (no negatives otherwise)")
    if v < 2:
        raise ValueError("contrastive loss needs at least 2 views per sample")
    _check_distribution(spectra, "spectrum")
    cdf = ad.reshape(ad.cumsum(spectra, axis=-1), (n * v, m))
    pos_a, pos_b, neg_a, neg_b = _pair_indices(n, v)
    l_pos = ad.sum_(_emd_rows(cdf[pos_a], cdf[pos_b]))
    l_neg = ad.sum_(_emd_rows(cdf[neg_a], cdf[neg_b]))
    l_scl = ad.scale(ad.relu_hinge(l_pos - l_neg + gamma), 1.0 / n)
    return l_pos, l_neg, l_scl


@lru_cache(maxsize=16)
def _pair_indices(n: int, v: int):
    pos = [(s * v + i, s * v + j) for s in range(n) for i, j in itertools.combinations(range(v), 2)]
    neg = [(x * v + i, y * v + j) for x, y in itertools.combinations(range(n), 2)
           for i in range(v) for j in range(v)]
    pa, pb = (np.array(c) for c in zip(*pos))
    na, nb = (np.array(c) for c in zip(*neg))
    return pa, pb, na, nb


def total_loss(primary, l_or, alpha: float = 0.5):
    return primary + alpha * l_or


# ---------------------------------------------------------------- training


@dataclass
class TrainSample:
    """One training recording: the mean trace, its region grid (optional) and PPG."""

    trace: RgbTrace
    grid: RegionTraceGrid | None = None

    @property
    def ppg(self):
        return self.trace.ppg_gt


@dataclass
class TrainResult:
    params: ModelParams
    model_config: ModelConfig
    history: list[dict]
    best_epoch: int
    best_val_loss: float
    run_config: TrainRunConfig
    meta: dict = field(default_factory=dict)


def as_train_samples(dataset) -> list[TrainSample]:
    out = []
    for item in dataset:
        if isinstance(item, TrainSample):
            out.append(item)
        elif isinstance(item, RgbTrace):
            out.append(TrainSample(item))
        else:
            out.append(TrainSample(item.trace, getattr(item, "grid", None)))
    return out


def split_dataset(samples: Sequence, val_fraction: float, seed: int):
    """Seeded shuffle into (train, validation); validation gets round(fraction * n) items."""
    order = np.random.default_rng(seed).permutation(len(samples))
    n_val = int(round(val_fraction * len(samples)))
    if len(samples) - n_val < 1:
        raise ValueError("validation split leaves no training data")
    return [samples[i] for i in order[n_val:]], [samples[i] for i in order[:n_val]]


def _crop(sample: TrainSample, start: int, length: int):
    trace = sample.trace.crop(start, length)
    grid = sample.grid.crop(start, length) if sample.grid is not None else None
    return trace, grid


def _batch_traces(samples, starts, run: TrainRunConfig, view_seeds):
    """Traces fed to the model for one batch: V views per sample in SCL, else originals."""
    traces, ppgs = [], []
    for sample, start, vseed in zip(samples, starts, view_seeds):
        trace, grid = _crop(sample, start, run.sequence_len)
        if run.mode == "scl":
            views = make_views(grid if grid is not None else trace, seed=vseed, occlusion=run.occlusion)
            traces.extend(views.traces)
        else:
            if trace.ppg_gt is None:
                raise ValueError("supervised training needs ground-truth PPG")
            traces.append(trace)
            ppgs.append(trace.ppg_gt)
    return traces, ppgs


def _objective(pulses, ppgs, params, cfg: ModelConfig, run: TrainRunConfig, n_samples: int):
    fs = cfg.sample_rate_hz
    l_or = orthonormal_loss(params, cfg)
    parts = LossBreakdown(alpha=run.alpha, gamma=run.gamma)
    if run.mode == "scl":
        spectra = [band_psd(p, fs) for p in pulses]
        m = spectra[0].shape[0]
        stacked = ad.reshape(ad.concat([ad.reshape(s, (1, m)) for s in spectra], axis=0),
                             (n_samples, len(pulses) // n_samples, m))
        l_pos, l_neg, primary = scl_loss(stacked, run.gamma)
        parts.l_pos, parts.l_neg, parts.l_scl = float(l_pos.data), float(l_neg.data), float(primary.data)
    elif run.mode == "supervised_emd":
        terms = [emd_loss(band_psd(p, fs), band_psd(np.asarray(g), fs).data, norm=run.emd_norm)
                 for p, g in zip(pulses, ppgs)]
        primary = ad.scale(_sum(terms), 1.0 / len(terms))
        parts.l_emd = float(primary.data)
    else:
        terms = [mse_loss(p, g) for p, g in zip(pulses, ppgs)]
        primary = ad.scale(_sum(terms), 1.0 / len(terms))
        parts.l_mse = float(primary.data)
    total = total_loss(primary, l_or, run.alpha)
    parts.l_or = float(l_or.data)
    parts.l_total = float(total.data)
    return total, parts


def _sum(terms):
    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out


def _validation_loss(val, params, cfg, run: TrainRunConfig) -> float:
    if not val:
        return float("nan")
    losses = []
    group = run.batch_size
    batches = [val[i:i + group] for i in range(0, len(val), group)]
    if run.mode == "scl":
        batches = [b for b in batches if len(b) >= 2] or ([val] if len(val) >= 2 else [])
        if not batches:
            return float("nan")
    for bi, batch in enumerate(batches):
        starts = [0] * len(batch)
        seeds = [run.seed + 7919 * (bi + 1) + k for k in range(len(batch))]
        traces, ppgs = _batch_traces(batch, starts, run, seeds)
        pulses = [Tensor(p.values) for p in forward_many(traces, params, cfg, chunk=256)]
        total, _ = _objective(pulses, ppgs, params, cfg, run, len(batch))
        losses.append(float(total.data))
    return float(np.mean(losses))


def train(dataset, run: TrainRunConfig | None = None, model_cfg: ModelConfig | None = None,
          loss_csv=None, init: ModelParams | None = None) -> TrainResult:
    """Train from scratch (or from ``init``) and return the best-validation parameters.

    Each epoch shuffles the training split and draws one random ``sequence_len`` crop
    per recording. Windows are taken every ``run.train_stride`` frames during training;
    the returned config keeps the inference stride of ``model_cfg``.
    """
    run = run or TrainRunConfig()
    model_cfg = model_cfg or ModelConfig()
    samples = as_train_samples(dataset)
    if not samples:
        raise ValueError("empty dataset")
    short = [i for i, s in enumerate(samples) if len(s.trace) < run.sequence_len]
    if short:
        raise ValueError(f"{len(short)} recording(s) shorter than sequence_len={run.sequence_len}")
    train_set, val_set = split_dataset(samples, run.val_fraction, run.seed)
    if run.mode == "scl" and len(train_set) < 2:
        raise ValueError("contrastive training needs at least 2 training recordings")

    train_cfg = replace(model_cfg, stride=run.train_stride)
    params = (init or init_params(model_cfg, run.seed)).copy()
    n_batches = math.ceil(len(train_set) / run.batch_size)
    total_steps = run.epochs * n_batches
    state = ad.OptimizerState(lr_max=run.lr_max, weight_decay=run.weight_decay)
    rng = np.random.default_rng(run.seed)
    history = []
    best = (math.inf, 0, params.copy())
    step = 0
    log.info("training %s: %d train / %d val recordings, %d steps", run.mode, len(train_set),
             len(val_set), total_steps)

    for epoch in range(1, run.epochs + 1):
        order = rng.permutation(len(train_set))
        sums = LossBreakdown(alpha=run.alpha, gamma=run.gamma)
        counted = 0
        for b in range(n_batches):
            batch = [train_set[i] for i in order[b * run.batch_size:(b + 1) * run.batch_size]]
            if run.mode == "scl" and len(batch) < 2:
                continue  # a lone trailing sample has no negatives
            starts = [int(rng.integers(0, len(s.trace) - run.sequence_len + 1)) for s in batch]
            seeds = [int(x) for x in rng.integers(0, 2**31, size=len(batch))]
            traces, ppgs = _batch_traces(batch, starts, run, seeds)
            tensors = {k: Tensor(v, requires_grad=True) for k, v in params.arrays.items()}
            with Tape() as tape:
                pulses = forward_many(traces, tensors, train_cfg)
                total, parts = _objective(pulses, ppgs, tensors, train_cfg, run, len(batch))
            if not math.isfinite(parts.l_total):
                raise TrainingError(f"non-finite loss at epoch {epoch}, step {step + 1}: {asdict(parts)}")
            grads = tape.backward(total)
            g = {k: grads[t] for k, t in tensors.items()}
            lr = ad.cosine_lr(step, total_steps, run.lr_max)
            try:
                new, state = ad.adamw_step(params.arrays, g, state, lr)
            except ad.NonFiniteGradientError as exc:
                raise TrainingError(f"{exc}; losses {asdict(parts)}") from exc
            params = ModelParams(new)
            step += 1
            counted += 1
            for name in ("l_or", "l_emd", "l_pos", "l_neg", "l_scl", "l_total", "l_mse"):
                setattr(sums, name, getattr(sums, name) + getattr(parts, name))
        val_loss = _validation_loss(val_set, params, model_cfg, run)
        row = {"epoch": epoch}
        for name in ("l_pos", "l_neg", "l_scl", "l_or", "l_total"):
            row[name] = getattr(sums, name) / max(counted, 1)
        row["val_loss"] = val_loss
        row["l_primary"] = (sums.l_scl if run.mode == "scl"
                            else sums.l_emd if run.mode == "supervised_emd" else sums.l_mse) / max(counted, 1)
        history.append(row)
        log.info("epoch %d: total %.5f val %.5f", epoch, row["l_total"], val_loss)
        score = val_loss if math.isfinite(val_loss) else row["l_total"]
        if score <= best[0]:
            best = (score, epoch, params.copy())

    if loss_csv is not None:
        write_loss_csv(history, loss_csv)
    meta = {
        "seed": run.seed,
        "epochs": run.epochs,
        "mode": run.mode,
        "best_epoch": best[1],
        "final_losses": history[-1],
        "run_config": asdict(run),
    }
    return TrainResult(best[2], model_cfg, history, best[1], best[0], run, meta)


LOSS_COLUMNS = ("epoch", "l_pos", "l_neg", "l_scl", "l_or", "l_total", "val_loss", "l_primary")


def write_loss_csv(history: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=LOSS_COLUMNS)
        writer.writeheader()
        for row in history:
            writer.writerow({k: row[k] for k in LOSS_COLUMNS})


# small windows keep the number of min/max extrema (and so of nearby kinks) low
GRADCHECK_CONFIG = ModelConfig(window_len=16, num_blocks=2, mlp_hidden=4, stride=16)


def scl_micro_batch_loss(seed: int = 0, model_cfg: ModelConfig = GRADCHECK_CONFIG,
                         frames: int = 64, gamma: float = 10.0, alpha: float = 0.5):
    """A 2-sample, 5-view contrastive objective as a function of the parameter tensors.

    Returns ``(loss_fn, names, arrays)``. ``gamma`` defaults high enough that the hinge
    is active, otherwise every gradient would be trivially zero.
    """
    from .data import SynthConfig, synth_trace

    samples = [synth_trace(SynthConfig(duration_s=frames / 30.0, hr_bpm=hr, motion=m, seed=seed + i))
               for i, (hr, m) in enumerate(((66.0, "drift"), (118.0, "occlusion_dropout")))]
    run = TrainRunConfig(mode="scl", gamma=gamma, alpha=alpha, sequence_len=frames,
                         train_stride=model_cfg.stride)
    traces, _ = _batch_traces([TrainSample(s.trace, s.grid) for s in samples], [0, 0], run,
                              [seed, seed + 1])
    params = init_params(model_cfg, seed)
    names = list(params.names())

    def loss_fn(*tensors):
        p = dict(zip(names, tensors))
        pulses = forward_many(traces, p, model_cfg)
        total, _ = _objective(pulses, [], p, model_cfg, run, len(samples))
        return total

    return loss_fn, names, [params[n].copy() for n in names]


def check_scl_gradients(seed: int = 0, h: float = 1e-7, kink_tol: float = 1e-4, **kwargs):
    """Finite-difference check of the contrastive objective over every trainable scalar."""
    from .autodiff import grad_check

    loss_fn, _, arrays = scl_micro_batch_loss(seed, **kwargs)
    return grad_check(loss_fn, [Tensor(a) for a in arrays], h=h, kink_tol=kink_tol)
