"""BeatFormer: zoomed orthonormal complex attention over CZT spectra of RGB traces.

Per window the pipeline is CZT -> positional encoding -> ``num_blocks`` x
(complex attention -> energy-ratio filtering) -> channel fusion -> band-limited
inverse CZT, followed by overlap-add over windows.

Spectra are carried as real arrays ``[N, 2m, 3]`` with the real part in rows
``:m`` and the imaginary part in rows ``m:``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .signal import PulseSignal, RgbTrace, make_windows, n_windows, normalize_trace, taper
from .spectral import HR_BAND_HZ, ZoomSpec, bandlimited_inverse_matrix, czt_matrix, zoom_spec

EPS = 1e-8
FIXED_ROW = np.ones(3) / np.sqrt(3.0)
CHANNELS = 3


@dataclass(frozen=True)
class ModelConfig:
    window_len: int = 150
    num_blocks: int = 2
    num_heads: int = 1
    mlp_hidden: int = 8
    band: tuple[float, float] = HR_BAND_HZ
    sample_rate_hz: float = 30.0
    stride: int = 1
    # Drop the pinned intensity feature from the attended values so that purely
    # common-mode input produces no attention output.
    reject_intensity: bool = True
    constrain_output: bool = False
    iczt_rcond: float = 0.1

    def __post_init__(self):
        if self.num_blocks < 1:
            raise ValueError("num_blocks must be >= 1")
        if self.num_heads < 1:
            raise ValueError("num_heads must be >= 1")
        if self.window_len < 2:
            raise ValueError("window_len must be >= 2")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")
        object.__setattr__(self, "band", tuple(float(b) for b in self.band))

    @property
    def czt_bins(self) -> int:
        return self.window_len

    @property
    def channels(self) -> int:
        return CHANNELS

    @property
    def zoom(self) -> ZoomSpec:
        return zoom_spec(self.sample_rate_hz, self.band[0], self.band[1], self.czt_bins)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["band"] = list(self.band)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "band" in d:
            d["band"] = tuple(d["band"])
        return cls(**d)


@dataclass
class ModelParams:
    """Named trainable arrays. Fixed first projection rows are not stored here."""

    arrays: dict[str, np.ndarray]

    def __getitem__(self, name):
        return self.arrays[name]

    def names(self):
        return list(self.arrays)

    def copy(self) -> "ModelParams":
        return ModelParams({k: v.copy() for k, v in self.arrays.items()})


@dataclass
class BlockActivations:
    attention: np.ndarray  # Z, [N, 2m, 3]
    mlp: np.ndarray  # Z', [N, 2m, 1]
    energy: np.ndarray  # S, [N, m, 1]
    filtered: np.ndarray  # F', [N, 2m, 3]
    degenerate_rows: int = 0


def _projection_names(cfg: ModelConfig, block: int) -> list[str]:
    names = []
    for head in range(cfg.num_heads):
        for which in ("q", "k", "v"):
            names.append(f"blocks.{block}.heads.{head}.raw_{which}")
    return names


def constrained_names(cfg: ModelConfig) -> list[str]:
    """Parameter names holding the trainable rows of constrained 3x3 projections."""
    out = []
    for b in range(cfg.num_blocks):
        out += _projection_names(cfg, b)
        if cfg.constrain_output:
            out.append(f"blocks.{b}.raw_o")
    return out


def _orthonormal_rows(rng: np.random.Generator, bound: float) -> np.ndarray:
    basis = [FIXED_ROW]
    rows = []
    for _ in range(2):
        v = rng.uniform(-bound, bound, size=3)
        for b in basis:
            v = v - (v @ b) * b
        v = v / np.linalg.norm(v)
        basis.append(v)
        rows.append(v)
    return np.array(rows)


def init_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    rng = np.random.default_rng(seed)
    bound = 1 / np.sqrt(CHANNELS)
    arrays: dict[str, np.ndarray] = {}
    arrays["pos_enc"] = np.zeros((2 * cfg.czt_bins, CHANNELS))
    for b in range(cfg.num_blocks):
        for name in _projection_names(cfg, b):
            arrays[name] = _orthonormal_rows(rng, bound)
        if cfg.constrain_output:
            arrays[f"blocks.{b}.raw_o"] = _orthonormal_rows(rng, bound)
        else:
            arrays[f"blocks.{b}.w_o"] = rng.uniform(-bound, bound, size=(CHANNELS, CHANNELS))
        arrays[f"blocks.{b}.esd_w1"] = rng.uniform(-bound, bound, size=(CHANNELS, cfg.mlp_hidden))
        hb = 1 / np.sqrt(cfg.mlp_hidden)
        arrays[f"blocks.{b}.esd_w2"] = rng.uniform(-hb, hb, size=(cfg.mlp_hidden, 1))
    arrays["fusion_w"] = rng.uniform(-bound, bound, size=(CHANNELS, 1))
    return ModelParams(arrays)


def materialize_projection(raw_rows) -> Tensor:
    """Stack the pinned ``[1, 1, 1] / sqrt(3)`` row above two trainable rows."""
    raw = ad.as_tensor(raw_rows)
    if raw.shape != (2, CHANNELS):
        raise ValueError(f"expected 2x3 trainable rows, got {raw.shape}")
    return ad.concat([Tensor(FIXED_ROW[None, :]), raw], axis=0)


def param_count(params: ModelParams | dict) -> int:
    arrays = params.arrays if isinstance(params, ModelParams) else params
    return int(sum(np.asarray(a).size for a in arrays.values()))


# ---------------------------------------------------------------- blocks


def _split_complex(x: Tensor, m: int) -> tuple[Tensor, Tensor]:
    return x[:, :m], x[:, m:]


def complex_attention(F, block: dict, cfg: ModelConfig, block_index: int = 0):
    """Eight-term complex attention with min-max normalized scores.

    ``F`` is ``[N, 2m, 3]``; ``block`` maps parameter names to tensors. Returns
    ``(Z, n_degenerate_rows)`` with ``Z`` of the same shape as ``F``.
    """
    F = ad.as_tensor(F)
    m = F.shape[1] // 2
    R, I = _split_complex(F, m)
    d_k = CHANNELS
    value_mask = np.array([0.0, 1.0, 1.0]) if cfg.reject_intensity else None
    zr_heads, zi_heads = [], []
    degenerate = 0
    for head in range(cfg.num_heads):
        prefix = f"blocks.{block_index}.heads.{head}"
        wq = materialize_projection(block[f"{prefix}.raw_q"])
        wk = materialize_projection(block[f"{prefix}.raw_k"])
        wv = materialize_projection(block[f"{prefix}.raw_v"])
        # rows of W act as projection directions: feature i = row_i . rgb
        q = {"R": R @ wq.T, "I": I @ wq.T}
        k = {"R": R @ wk.T, "I": I @ wk.T}
        vr, vi = R @ wv.T, I @ wv.T
        if value_mask is not None:
            vr, vi = vr * value_mask, vi * value_mask
        v_cat = ad.concat([vr, vi], axis=-1)  # [N, m, 6]
        att = {}
        for xq in ("R", "I"):
            for yk in ("R", "I"):
                out, n_deg = ad.minmax_attention(q[xq], k[yk], v_cat, scale_by=1 / np.sqrt(d_k))
                degenerate += n_deg
                att[xq + yk] = (out[..., :CHANNELS], out[..., CHANNELS:])  # (A V_R, A V_I)
        rr, ri, ir, ii = att["RR"], att["RI"], att["IR"], att["II"]
        # real: MH(RRR) - MH(RII) - MH(IRI) - MH(IIR); imag: MH(RRI) + MH(RIR) + MH(IRR) - MH(III)
        zr_heads.append(rr[0] - ri[1] - ir[1] - ii[0])
        zi_heads.append(rr[1] + ri[0] + ir[0] - ii[1])
    zr, zi = zr_heads[0], zi_heads[0]
    for extra_r, extra_i in zip(zr_heads[1:], zi_heads[1:]):
        zr, zi = zr + extra_r, zi + extra_i
    if cfg.num_heads > 1:
        zr, zi = ad.scale(zr, 1 / cfg.num_heads), ad.scale(zi, 1 / cfg.num_heads)
    if cfg.constrain_output:
        wo = materialize_projection(block[f"blocks.{block_index}.raw_o"])
    else:
        wo = block[f"blocks.{block_index}.w_o"]
    z = ad.concat([zr, zi], axis=1) @ ad.transpose(wo)
    return z, degenerate


def esd_feedforward(Z, F, block: dict, block_index: int = 0, return_parts: bool = False):
    """Energy-ratio filtering of the block input by the attention output.

    ``Z' = MLP(Z)`` (3 -> hidden -> 1, GELU), ``S = |Z'|^2 / (sum_c |F_c|^2 + eps)``
    broadcast over channels, then ``F * S`` scaled by its per-window peak magnitude.
    """
    Z, F = ad.as_tensor(Z), ad.as_tensor(F)
    m = F.shape[1] // 2
    w1 = block[f"blocks.{block_index}.esd_w1"]
    w2 = block[f"blocks.{block_index}.esd_w2"]
    zp = ad.gelu(Z @ w1) @ w2  # [N, 2m, 1]
    zr, zi = _split_complex(zp, m)
    num = ad.square(zr) + ad.square(zi)  # [N, m, 1]
    fr, fi = _split_complex(F, m)
    den = ad.sum_(ad.square(fr) + ad.square(fi), axis=-1, keepdims=True)
    s = ad.div(num, den, eps=EPS)
    gr, gi = fr * s, fi * s
    mag2 = ad.square(gr) + ad.square(gi)  # [N, m, 3]
    peak = ad.max_reduce(ad.reshape(mag2, (mag2.shape[0], -1)), axis=1, keepdims=True)
    norm = ad.reshape(_safe_sqrt(peak) + EPS, (peak.shape[0], 1, 1))
    out = ad.div(ad.concat([gr, gi], axis=1), norm)
    if return_parts:
        return out, zp, s
    return out


def _safe_sqrt(x: Tensor) -> Tensor:
    # sqrt with a zero-safe derivative: zero entries get a unit offset inside and outside.
    zero = (x.data == 0).astype(float)
    return ad.sqrt(x + zero) - zero


def _as_tensors(params) -> dict:
    arrays = params.arrays if isinstance(params, ModelParams) else params
    return {k: ad.as_tensor(v) for k, v in arrays.items()}


# ---------------------------------------------------------------- forward


@dataclass
class _Geometry:
    length: int
    count: int


def trace_spectra(trace: RgbTrace | np.ndarray, cfg: ModelConfig) -> np.ndarray:
    """Normalized, windowed, CZT-transformed trace as stacked ``[N, 2m, 3]``."""
    c_prime = normalize_trace(trace)
    windows = make_windows(c_prime, cfg.window_len, cfg.stride).windows  # [N, L, 3]
    return np.matmul(_stacked_czt(cfg.zoom, cfg.window_len), windows)


@lru_cache(maxsize=16)
def _stacked_czt(spec: ZoomSpec, n: int) -> np.ndarray:
    mat = czt_matrix(spec, n)
    return np.ascontiguousarray(np.vstack([mat.real, mat.imag]))


def spectral_blocks(F, params: dict, cfg: ModelConfig, activations: list | None = None):
    """Positional encoding plus the attention/energy blocks; returns ``(F, n_degenerate)``."""
    x = ad.add(F, params["pos_enc"])
    degenerate = 0
    for b in range(cfg.num_blocks):
        z, n_deg = complex_attention(x, params, cfg, b)
        degenerate += n_deg
        if activations is not None:
            new, zp, s = esd_feedforward(z, x, params, b, return_parts=True)
            activations.append(BlockActivations(z.data, zp.data, s.data, new.data, n_deg))
        else:
            new = esd_feedforward(z, x, params, b)
        x = new
    return x, degenerate


def windows_to_waveforms(F, params: dict, cfg: ModelConfig) -> Tensor:
    """Fuse channels and invert the zoomed spectrum of every window: ``[N, L]``."""
    w = params["fusion_w"]
    if cfg.reject_intensity:
        # keep only the fusion component orthogonal to [1, 1, 1]
        w = w - ad.mean(w, axis=0, keepdims=True)
    fused = ad.matmul(F, w)  # [N, 2m, 1]
    fused = ad.reshape(fused, (fused.shape[0], fused.shape[1]))
    inv = bandlimited_inverse_matrix(cfg.zoom, cfg.window_len, cfg.iczt_rcond)
    return ad.matmul(fused, Tensor(inv.T))


def overlap_add_tensor(waves: Tensor, stride: int, length: int) -> Tensor:
    """Differentiable counterpart of :func:`beatkit.signal.overlap_add`."""
    count, win = waves.shape
    centred = waves - ad.mean(waves, axis=1, keepdims=True)
    var = ad.mean(ad.square(centred), axis=1, keepdims=True)
    zero = (var.data == 0).astype(float)
    # eps keeps round-off residue (e.g. from common-mode input) from being blown up to unit variance
    sd = _safe_sqrt(var) + EPS
    tap = taper(win)
    acc = ad.fold(ad.mul(ad.div(centred, sd), tap), stride, length)
    live = (zero[:, 0] == 0).astype(float)
    weight = np.bincount(
        (np.arange(count)[:, None] * stride + np.arange(win)[None, :]).ravel(),
        weights=(live[:, None] * tap).ravel(), minlength=length,
    )
    return ad.div(acc, np.where(weight > 0, weight, 1.0))


def forward_many(traces, params, cfg: ModelConfig, chunk: int | None = None,
                 activations: list | None = None) -> list:
    """Run the model on several traces at once.

    Windows of all traces go through the spectral blocks as one batch. With a tape
    active the outputs are tensors (for training); otherwise :class:`PulseSignal`.
    """
    p = _as_tensors(params)
    spectra, geoms = [], []
    for tr in traces:
        arr = tr.samples if isinstance(tr, RgbTrace) else np.asarray(tr, dtype=float)
        if arr.shape[0] < cfg.window_len:
            raise ValueError(f"trace of {arr.shape[0]} frames shorter than window {cfg.window_len}")
        spec = trace_spectra(arr, cfg)
        spectra.append(spec)
        geoms.append(_Geometry(arr.shape[0], spec.shape[0]))
    F = np.concatenate(spectra, axis=0)
    recording = bool(ad.engine._active_tapes) and any(t.requires_grad for t in p.values())
    degenerate = 0
    if recording or chunk is None:
        x, degenerate = spectral_blocks(Tensor(F), p, cfg, activations)
        waves = windows_to_waveforms(x, p, cfg)
    else:
        parts = []
        for start in range(0, F.shape[0], chunk):
            x, n_deg = spectral_blocks(Tensor(F[start:start + chunk]), p, cfg, activations)
            degenerate += n_deg
            parts.append(windows_to_waveforms(x, p, cfg).data)
        waves = Tensor(np.concatenate(parts, axis=0))
    outputs = []
    offset = 0
    for tr, g in zip(traces, geoms):
        w = waves[offset:offset + g.count] if recording else Tensor(waves.data[offset:offset + g.count])
        offset += g.count
        pulse = overlap_add_tensor(w, cfg.stride, g.length)
        if recording:
            outputs.append(pulse)
        else:
            fs = tr.sample_rate_hz if isinstance(tr, RgbTrace) else cfg.sample_rate_hz
            outputs.append(PulseSignal(pulse.data, fs, {"degenerate_rows": degenerate}))
    return outputs


def forward(trace: RgbTrace, params, cfg: ModelConfig, chunk: int | None = 64):
    """rPPG pulse for one trace (a tensor when recording on a tape)."""
    if isinstance(trace, RgbTrace) and trace.sample_rate_hz != cfg.sample_rate_hz:
        raise ValueError("trace sample rate differs from the model configuration")
    return forward_many([trace], params, cfg, chunk=chunk)[0]


def orthonormal_penalty_rows(rows: list[Tensor]) -> Tensor:
    """Mean over matrices of ``(a2 . a3)^2 + sum_n (|a_n| - 1)^2`` on trainable rows."""
    terms = []
    for raw in rows:
        a2, a3 = raw[0], raw[1]
        dot = ad.sum_(a2 * a3)
        n2 = ad.sqrt(ad.sum_(ad.square(a2)))
        n3 = ad.sqrt(ad.sum_(ad.square(a3)))
        terms.append(ad.square(dot) + ad.square(n2 - 1.0) + ad.square(n3 - 1.0))
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return ad.scale(total, 1 / len(terms))


def orthonormal_loss(params, cfg: ModelConfig) -> Tensor:
    p = _as_tensors(params)
    return orthonormal_penalty_rows([p[name] for name in constrained_names(cfg)])


def materialized_projections(params, cfg: ModelConfig) -> dict[str, np.ndarray]:
    """All constrained 3x3 projections as plain arrays."""
    arrays = params.arrays if isinstance(params, ModelParams) else params
    return {
        name.replace("raw_", "w_"): np.vstack([FIXED_ROW, np.asarray(arrays[name])])
        for name in constrained_names(cfg)
    }


def windows_count(length: int, cfg: ModelConfig) -> int:
    return n_windows(length, cfg.window_len, cfg.stride)
