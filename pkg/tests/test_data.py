import json

import numpy as np
import pytest

from beatkit.data import (
    MOTION_KINDS,
    CheckpointError,
    FormatError,
    SynthConfig,
    load_checkpoint,
    load_corpus,
    load_grid,
    load_trace,
    save_checkpoint,
    save_corpus,
    save_grid,
    save_trace,
    synth_corpus,
    synth_trace,
)
from beatkit.model import ModelConfig, forward, init_params
from beatkit.signal import RgbTrace, estimate_hr
from beatkit.spectral import hr_zoom_spec

SMALL = ModelConfig(window_len=32, mlp_hidden=4)


def test_generator_is_deterministic():
    a = synth_trace(SynthConfig(motion="mixed", seed=4))
    b = synth_trace(SynthConfig(motion="mixed", seed=4))
    assert np.array_equal(a.trace.samples, b.trace.samples)
    assert np.array_equal(a.grid.regions, b.grid.regions)
    c = synth_trace(SynthConfig(motion="mixed", seed=5))
    assert not np.array_equal(a.trace.samples, c.trace.samples)


def test_clean_72_bpm_ground_truth_within_half_bin():
    half = 60 * hr_zoom_spec(30, 900).bin_spacing_hz / 2
    for seed in range(5):
        s = synth_trace(SynthConfig(hr_bpm=72, noise_std=0, seed=seed))
        assert abs(estimate_hr(s.ppg, sample_rate_hz=30) - 72) <= half
    assert s.trace.hr_gt_bpm == 72 and len(s.trace) == 900


def test_ground_truth_within_one_bin_on_motion_free_configs():
    spacing = 60 * hr_zoom_spec(30, 900).bin_spacing_hz
    for i, hr in enumerate(np.linspace(40, 150, 23)):
        s = synth_trace(SynthConfig(hr_bpm=hr, seed=i))
        assert abs(estimate_hr(s.ppg, sample_rate_hz=30) - hr) <= spacing + 1e-9


def test_config_validation():
    for bad in ({"hr_bpm": 30}, {"hr_bpm": 160}, {"motion": "shake"},
                {"noise_std": -1}, {"pulse_amplitude_rgb": (-0.1, 0.8, 0.5)}):
        with pytest.raises(ValueError):
            SynthConfig(**bad)


def test_corpus_cycles_motion_kinds():
    corpus = synth_corpus(5, duration_s=5, seed=1)
    assert [s.motion for s in corpus] == list(MOTION_KINDS)
    assert all(45 <= s.hr_bpm <= 140 for s in corpus)
    again = synth_corpus(5, duration_s=5, seed=1)
    assert all(np.array_equal(x.trace.samples, y.trace.samples) for x, y in zip(corpus, again))


def test_trace_round_trip(tmp_path):
    s = synth_trace(SynthConfig(duration_s=4, seed=2))
    path = tmp_path / "t.csv"
    save_trace(s.trace, path)
    back = load_trace(path)
    assert np.max(np.abs(back.samples - s.trace.samples)) <= 1e-12
    assert np.max(np.abs(back.ppg_gt - s.trace.ppg_gt)) <= 1e-12
    assert back.sample_rate_hz == 30 and back.hr_gt_bpm == s.trace.hr_gt_bpm


def test_trace_without_ppg(tmp_path):
    path = tmp_path / "t.csv"
    path.write_text("# fs=25\nframe,r,g,b\n0,1,2,3\n1,1,2,3\n")
    tr = load_trace(path)
    assert tr.ppg_gt is None and tr.hr_gt_bpm is None and tr.sample_rate_hz == 25


@pytest.mark.parametrize("text", [
    "# fs=-30\nframe,r,g,b\n0,1,2,3\n",
    "frame,r,g,b\n0,1,2,3\n",
    "# fs=30\nframe,r,g\n0,1,2\n",
    "# fs=30\nframe,r,g,b\n0,1,2\n",
    "# fs=30\nframe,r,g,b\n0,1,nan,3\n",
    "# fs=30\nframe,r,g,b\n0,1,x,3\n",
    "# fs=30\nframe,r,g,b,hue\n0,1,2,3,4\n",
])
def test_malformed_trace_files_rejected(tmp_path, text):
    path = tmp_path / "bad.csv"
    path.write_text(text)
    with pytest.raises(FormatError):
        load_trace(path)


def test_grid_round_trip_and_errors(tmp_path):
    s = synth_trace(SynthConfig(duration_s=2, seed=2, grid_dims=(2, 3)))
    path = tmp_path / "g.jsonl"
    save_grid(s.grid, path)
    back = load_grid(path)
    assert np.array_equal(back.regions, s.grid.regions) and back.grid_dims == (2, 3)
    lines = path.read_text().splitlines()
    lines[2] = json.dumps({"frame": 1, "regions": [[1, 2, 3]]})
    path.write_text("\n".join(lines))
    with pytest.raises(FormatError):
        load_grid(path)


def test_corpus_round_trip(tmp_path):
    corpus = synth_corpus(3, duration_s=3, seed=7)
    save_corpus(corpus, tmp_path / "c")
    items = load_corpus(tmp_path / "c")
    assert [i.motion for i in items] == [s.motion for s in corpus]
    assert np.allclose(items[1].grid.regions, corpus[1].grid.regions)
    single = load_corpus(tmp_path / "c" / "trace_000.csv")
    assert len(single) == 1 and single[0].grid is None
    (tmp_path / "empty").mkdir()
    with pytest.raises(FormatError):
        load_corpus(tmp_path / "empty")


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    params = init_params(SMALL, seed=11)
    params.arrays["pos_enc"] += np.random.default_rng(0).normal(size=params["pos_enc"].shape)
    path = tmp_path / "m.json"
    save_checkpoint(params, SMALL, {"seed": 11, "epochs": 0}, path)
    back, cfg, meta = load_checkpoint(path)
    assert cfg == SMALL and meta["seed"] == 11
    assert all(np.array_equal(back[k], params[k]) for k in params.names())
    tr = RgbTrace(100 + np.random.default_rng(1).normal(size=(64, 3)), 30)
    assert np.array_equal(forward(tr, back, cfg).values, forward(tr, params, SMALL).values)


def _tamper(path, fn):
    doc = json.loads(path.read_text())
    fn(doc)
    path.write_text(json.dumps(doc))


def test_checkpoint_rejects_tampering(tmp_path):
    path = tmp_path / "m.json"
    save_checkpoint(init_params(SMALL), SMALL, None, path)

    def first_row(doc):
        doc["params"]["blocks.0.heads.0.w_q"]["data"][0] = 0.5

    _tamper(path, first_row)
    with pytest.raises(CheckpointError, match="first row"):
        load_checkpoint(path)

    save_checkpoint(init_params(SMALL), SMALL, None, path)
    _tamper(path, lambda d: d.update(format_version=99))
    with pytest.raises(CheckpointError, match=r"supported: \[1\]"):
        load_checkpoint(path)

    save_checkpoint(init_params(SMALL), SMALL, None, path)
    _tamper(path, lambda d: d["params"]["pos_enc"].update(shape=[2, 3], data=[0.0] * 6))
    with pytest.raises(CheckpointError):
        load_checkpoint(path)

    save_checkpoint(init_params(SMALL), SMALL, None, path)
    _tamper(path, lambda d: d["params"].pop("fusion_w"))
    with pytest.raises(CheckpointError, match="missing"):
        load_checkpoint(path)
