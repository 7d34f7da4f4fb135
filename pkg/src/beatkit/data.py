"""Synthetic traces, trace/grid file formats and model checkpoints."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .model import FIXED_ROW, ModelConfig, ModelParams, constrained_names, init_params
from .signal import RgbTrace
from .views import RegionTraceGrid

MOTION_KINDS = ("none", "drift", "common_mode", "occlusion_dropout", "mixed")
CHECKPOINT_VERSION = 1
SUPPORTED_VERSIONS = (CHECKPOINT_VERSION,)

_BASE_RGB = np.array([170.0, 120.0, 100.0])


class FormatError(ValueError):
    pass


@dataclass
class SynthConfig:
    """Generator settings. Amplitudes and noise are percentages of baseline intensity."""

    duration_s: float = 30.0
    sample_rate: float = 30.0
    hr_bpm: float = 72.0
    pulse_amplitude_rgb: tuple[float, float, float] = (0.3, 0.8, 0.5)
    # depth 0.01 keeps the stored rate within one estimator bin of the spectral peak
    hr_modulation: tuple[float, float] = (0.01, 0.1)  # (depth, rate in Hz)
    motion: str = "none"
    motion_amplitude: float = 2.0
    noise_std: float = 0.2
    seed: int = 0
    grid_dims: tuple[int, int] = (4, 4)

    def __post_init__(self):
        if not 40 <= self.hr_bpm <= 150:
            raise ValueError(f"hr_bpm must lie in [40, 150], got {self.hr_bpm}")
        if self.motion not in MOTION_KINDS:
            raise ValueError(f"motion must be one of {MOTION_KINDS}, got {self.motion!r}")
        if min(self.pulse_amplitude_rgb) < 0 or self.motion_amplitude < 0 or self.noise_std < 0:
            raise ValueError("amplitudes must be non-negative")
        if self.duration_s <= 0 or self.sample_rate <= 0:
            raise ValueError("duration and sample rate must be positive")


@dataclass
class SynthSample:
    trace: RgbTrace
    grid: RegionTraceGrid
    ppg: np.ndarray
    inst_hr_bpm: np.ndarray
    motion: str
    config: SynthConfig = field(repr=False, default=None)

    @property
    def hr_bpm(self) -> float:
        return float(self.trace.hr_gt_bpm)


def _smooth(x: np.ndarray, width: int) -> np.ndarray:
    if width <= 1:
        return x
    kernel = np.hanning(width + 2)[1:-1]
    return np.convolve(x, kernel / kernel.sum(), mode="same")


def _unit_std(x: np.ndarray) -> np.ndarray:
    x = x - x.mean()
    sd = x.std()
    return x / sd if sd > 0 else x


def _common_mode(rng, t, fs, kind) -> np.ndarray:
    n = t.size
    if kind == "drift":
        f = rng.uniform(0.02, 0.1)
        return _unit_std(0.5 * (t / t[-1] - 0.5) + np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi)))
    if kind == "common_mode":
        walk = _unit_std(_smooth(np.cumsum(rng.normal(size=n)), int(0.2 * fs)))
        # quasi-periodic sway whose rate wanders inside the heart-rate band
        rate = np.clip(rng.uniform(0.8, 2.2) + _smooth(np.cumsum(rng.normal(0, 0.02, n)), int(fs)),
                       0.7, 2.4)
        sway = np.sin(2 * np.pi * np.cumsum(rate) / fs)
        sway *= 0.5 + 0.5 * _smooth(np.abs(rng.normal(size=n)), int(2 * fs)) / 0.8
        return _unit_std(walk + 0.7 * _unit_std(sway))
    return np.zeros(n)


def _dropout(rng, n_regions, n, fs) -> np.ndarray:
    """Per-region multiplicative shading from short occlusion events."""
    gain = np.ones((n_regions, n))
    for _ in range(rng.integers(2, 5)):
        regions = rng.choice(n_regions, size=rng.integers(1, max(2, n_regions // 3)), replace=False)
        span = int(rng.uniform(1.0, 4.0) * fs)
        start = int(rng.integers(0, max(1, n - span)))
        profile = np.zeros(n)
        profile[start:start + span] = 1.0
        profile = _smooth(profile, int(0.3 * fs))
        gain[regions] *= 1 - rng.uniform(0.1, 0.3) * profile
    return gain


def synth_trace(cfg: SynthConfig) -> SynthSample:
    """Region grid, averaged trace and ground truth for one synthetic recording.

    Each region is ``base * (1 + pulse + motion) + noise``; the pulse is a frequency
    modulated fundamental with a second harmonic at 0.3 relative amplitude.
    """
    rng = np.random.default_rng(cfg.seed)
    fs = cfg.sample_rate
    n = int(round(cfg.duration_s * fs))
    t = np.arange(n) / fs
    depth, rate = cfg.hr_modulation
    inst_hr = cfg.hr_bpm * (1 + depth * np.sin(2 * np.pi * rate * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(inst_hr / 60.0) / fs + rng.uniform(0, 2 * np.pi)
    wave = np.sin(phase) + 0.3 * np.sin(2 * phase + np.pi / 4)
    ppg = _unit_std(wave)

    rows, cols = cfg.grid_dims
    n_reg = rows * cols
    base = _BASE_RGB * (1 + 0.05 * rng.normal(size=(n_reg, 3)))
    gains = rng.uniform(0.7, 1.3, size=n_reg)
    amp = np.asarray(cfg.pulse_amplitude_rgb, dtype=float) / 100.0

    kinds = ("drift", "common_mode", "occlusion_dropout") if cfg.motion == "mixed" else (cfg.motion,)
    motion = np.zeros(n)
    for kind in kinds:
        motion = motion + _common_mode(rng, t, fs, kind)
    motion *= cfg.motion_amplitude / 100.0
    shading = _dropout(rng, n_reg, n, fs) if "occlusion_dropout" in kinds else np.ones((n_reg, n))

    relative = 1 + gains[:, None, None] * wave[None, :, None] * amp + motion[None, :, None]
    regions = base[:, None, :] * relative * shading[..., None]
    regions += base[:, None, :] * rng.normal(0, cfg.noise_std / 100.0, size=regions.shape)

    grid = RegionTraceGrid(regions, (rows, cols), fs)
    trace = grid.mean_trace(ppg_gt=ppg, hr_gt_bpm=float(cfg.hr_bpm))
    return SynthSample(trace, grid, ppg, inst_hr, cfg.motion, cfg)


def synth_corpus(count: int, duration_s: float = 30.0, hr_range: tuple[float, float] = (45, 140),
                 motion: str = "mixed", seed: int = 0, sample_rate: float = 30.0,
                 **overrides) -> list[SynthSample]:
    """``count`` recordings with uniform heart rates.

    With ``motion="mixed"`` the motion kind cycles through :data:`MOTION_KINDS`
    (so the corpus has motion-free and corrupted members); any other kind is used
    for every sample.
    """
    root = np.random.SeedSequence(seed)
    rng = np.random.default_rng(root.spawn(1)[0])
    hrs = rng.uniform(hr_range[0], hr_range[1], size=count)
    seeds = root.generate_state(count)
    samples = []
    for i in range(count):
        kind = MOTION_KINDS[i % len(MOTION_KINDS)] if motion == "mixed" else motion
        cfg = SynthConfig(duration_s=duration_s, sample_rate=sample_rate, hr_bpm=float(hrs[i]),
                          motion=kind, seed=int(seeds[i]), **overrides)
        samples.append(synth_trace(cfg))
    return samples


# ---------------------------------------------------------------- trace files


def save_trace(trace: RgbTrace, path) -> None:
    """CSV with a ``# fs=<hz> [hr=<bpm>]`` line and ``frame,r,g,b[,ppg]`` header."""
    meta = f"# fs={trace.sample_rate_hz!r}"
    if trace.hr_gt_bpm is not None:
        meta += f" hr={float(trace.hr_gt_bpm)!r}"
    cols = ["frame", "r", "g", "b"] + (["ppg"] if trace.ppg_gt is not None else [])
    with open(path, "w", newline="") as fh:
        fh.write(meta + "\n")
        writer = csv.writer(fh)
        writer.writerow(cols)
        for i, row in enumerate(trace.samples):
            values = [repr(float(v)) for v in row]
            if trace.ppg_gt is not None:
                values.append(repr(float(trace.ppg_gt[i])))
            writer.writerow([i, *values])


def _parse_meta(line: str) -> dict[str, float]:
    if not line.startswith("#"):
        raise FormatError("missing '# fs=...' metadata line")
    meta = {}
    for item in line[1:].split():
        key, sep, value = item.partition("=")
        if not sep:
            raise FormatError(f"malformed metadata item {item!r}")
        try:
            meta[key] = float(value)
        except ValueError:
            raise FormatError(f"non-numeric metadata {item!r}") from None
    if "fs" not in meta:
        raise FormatError("metadata lacks fs")
    if not meta["fs"] > 0:
        raise FormatError(f"sample rate must be positive, got {meta['fs']}")
    return meta


def load_trace(path) -> RgbTrace:
    with open(path, newline="") as fh:
        meta = _parse_meta(fh.readline().strip())
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:4] != ["frame", "r", "g", "b"]:
            raise FormatError(f"expected header frame,r,g,b[,ppg], got {header}")
        has_ppg = header[4:] == ["ppg"]
        if len(header) > 4 and not has_ppg:
            raise FormatError(f"unexpected columns {header[4:]}")
        rows = []
        for lineno, row in enumerate(reader, start=3):
            if len(row) != len(header):
                raise FormatError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                rows.append([float(v) for v in row[1:]])
            except ValueError:
                raise FormatError(f"line {lineno}: non-numeric value") from None
    data = np.array(rows, dtype=float).reshape(-1, len(header) - 1)
    if not np.all(np.isfinite(data)):
        raise FormatError("trace contains NaN or infinite values")
    ppg = data[:, 3].copy() if has_ppg else None
    return RgbTrace(data[:, :3].copy(), meta["fs"], ppg, meta.get("hr"))


def save_grid(grid: RegionTraceGrid, path) -> None:
    """JSON lines: a metadata object, then ``{"frame": i, "regions": [[r, g, b], ...]}``."""
    with open(path, "w") as fh:
        fh.write(json.dumps({"fs": grid.sample_rate_hz, "grid_dims": list(grid.grid_dims)}) + "\n")
        for i in range(grid.n_frames):
            fh.write(json.dumps({"frame": i, "regions": grid.regions[:, i, :].tolist()}) + "\n")


def load_grid(path) -> RegionTraceGrid:
    with open(path) as fh:
        lines = [ln for ln in fh if ln.strip()]
    if not lines:
        raise FormatError("empty grid file")
    try:
        meta = json.loads(lines[0])
        frames = [json.loads(ln) for ln in lines[1:]]
    except json.JSONDecodeError as exc:
        raise FormatError(f"invalid JSON line: {exc}") from None
    if "fs" not in meta or "grid_dims" not in meta:
        raise FormatError("grid metadata needs fs and grid_dims")
    if not meta["fs"] > 0:
        raise FormatError("sample rate must be positive")
    dims = tuple(int(d) for d in meta["grid_dims"])
    regions = []
    for i, frame in enumerate(frames):
        if frame.get("frame") != i:
            raise FormatError(f"frame index {frame.get('frame')} out of order at {i}")
        arr = np.asarray(frame["regions"], dtype=float)
        if arr.shape != (dims[0] * dims[1], 3):
            raise FormatError(f"frame {i}: expected {dims[0] * dims[1]} [r,g,b] triples")
        regions.append(arr)
    data = np.stack(regions, axis=1)
    if not np.all(np.isfinite(data)):
        raise FormatError("grid contains NaN or infinite values")
    return RegionTraceGrid(data, dims, float(meta["fs"]))


def save_corpus(samples: list[SynthSample], out_dir) -> Path:
    """Write ``trace_XXX.csv`` / ``grid_XXX.jsonl`` pairs plus ``manifest.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, s in enumerate(samples):
        trace_name, grid_name = f"trace_{i:03d}.csv", f"grid_{i:03d}.jsonl"
        save_trace(s.trace, out / trace_name)
        save_grid(s.grid, out / grid_name)
        entries.append({"trace": trace_name, "grid": grid_name, "hr_bpm": s.hr_bpm,
                        "motion": s.motion, "seed": s.config.seed if s.config else None})
    manifest = out / "manifest.json"
    manifest.write_text(json.dumps({"count": len(entries), "items": entries}, indent=2))
    return manifest


@dataclass
class CorpusItem:
    trace: RgbTrace
    grid: RegionTraceGrid | None
    motion: str = "unknown"

    @property
    def hr_bpm(self):
        return self.trace.hr_gt_bpm


def load_corpus(path) -> list[CorpusItem]:
    """Read a corpus directory (manifest optional) or a single trace file."""
    path = Path(path)
    if path.is_file():
        return [CorpusItem(load_trace(path), None)]
    manifest = path / "manifest.json"
    items = []
    if manifest.exists():
        for entry in json.loads(manifest.read_text())["items"]:
            grid = load_grid(path / entry["grid"]) if entry.get("grid") else None
            items.append(CorpusItem(load_trace(path / entry["trace"]), grid, entry.get("motion", "unknown")))
    else:
        for trace_path in sorted(path.glob("*.csv")):
            items.append(CorpusItem(load_trace(trace_path), None))
    if not items:
        raise FormatError(f"no traces found under {path}")
    return items


# ---------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(params: ModelParams, cfg: ModelConfig, meta: dict | None, path) -> None:
    """Single JSON document; constrained projections are stored as full 3x3 matrices."""
    arrays = {}
    constrained = set(constrained_names(cfg))
    for name, arr in params.arrays.items():
        arr = np.asarray(arr, dtype=float)
        if name in constrained:
            name = name.replace("raw_", "w_")
            arr = np.vstack([FIXED_ROW, arr])
        arrays[name] = {"shape": list(arr.shape), "data": [float(v) for v in arr.ravel()]}
    doc = {
        "format_version": CHECKPOINT_VERSION,
        "model_config": cfg.to_dict(),
        "params": arrays,
        "meta": meta or {},
    }
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)


def load_checkpoint(path) -> tuple[ModelParams, ModelConfig, dict]:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"checkpoint is not valid JSON: {exc}") from None
    version = doc.get("format_version")
    if version not in SUPPORTED_VERSIONS:
        raise CheckpointError(
            f"unsupported checkpoint version {version!r}; supported: {list(SUPPORTED_VERSIONS)}")
    cfg = ModelConfig.from_dict(doc["model_config"])
    expected = init_params(cfg, 0).arrays
    constrained = set(constrained_names(cfg))
    stored = doc["params"]
    arrays = {}
    for name, template in expected.items():
        key = name.replace("raw_", "w_") if name in constrained else name
        if key not in stored:
            raise CheckpointError(f"missing parameter {key!r}")
        entry = stored[key]
        arr = np.asarray(entry["data"], dtype=float)
        shape = tuple(entry["shape"])
        if arr.size != int(np.prod(shape)):
            raise CheckpointError(f"{key}: data length does not match shape {shape}")
        arr = arr.reshape(shape)
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"{key}: non-finite values")
        if name in constrained:
            if shape != (3, 3):
                raise CheckpointError(f"{key}: expected shape (3, 3), got {shape}")
            if not np.array_equal(arr[0], FIXED_ROW):
                raise CheckpointError(f"{key}: first row is not [1, 1, 1]/sqrt(3)")
            arr = arr[1:].copy()
        if arr.shape != template.shape:
            raise CheckpointError(f"{key}: shape {arr.shape} does not match config {template.shape}")
        arrays[name] = arr
    extra = set(stored) - {n.replace("raw_", "w_") if n in constrained else n for n in expected}
    if extra:
        raise CheckpointError(f"unexpected parameters {sorted(extra)}")
    return ModelParams(arrays), cfg, doc.get("meta", {})
