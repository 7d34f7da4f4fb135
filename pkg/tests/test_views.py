import numpy as np
import pytest
from skimage import color

from beatkit.data import SynthConfig, synth_trace
from beatkit.signal import RgbTrace
from beatkit.spectral import band_psd, czt, hr_zoom_spec
from beatkit import views
from beatkit.views import (
    VIEW_LABELS,
    RegionTraceGrid,
    flip_time,
    make_views,
    occlude_regions,
    rgb_to_hsv,
    rgb_to_hsv_trace,
    rgb_to_lab,
    rgb_to_lab_trace,
)

rng = np.random.default_rng(11)
_MATRIX = views._RGB_TO_XYZ
_WHITE = views._WHITE_D65


def test_hsv_reference_colours():
    assert np.allclose(rgb_to_hsv([1.0, 0, 0]), [0, 1, 1])
    assert np.allclose(rgb_to_hsv([0.5, 0.5, 0.5]), [0, 0, 0.5])


def test_hsv_matches_skimage_and_round_trips():
    rgb = rng.uniform(0, 1, size=(200, 3))
    hsv = rgb_to_hsv(rgb)
    assert np.allclose(hsv, color.rgb2hsv(rgb[None])[0], atol=1e-12)
    assert np.max(np.abs(color.hsv2rgb(hsv[None])[0] - rgb)) < 1e-6
    assert np.all((hsv[:, 0] >= 0) & (hsv[:, 0] < 1))


def _lab_to_rgb(lab):
    # inverse formulas: L*a*b* -> XYZ -> linear RGB -> sRGB
    fy = (lab[..., 0] + 16) / 116
    f = np.stack([fy + lab[..., 1] / 500, fy, fy - lab[..., 2] / 200], axis=-1)
    delta = 6 / 29
    xyz = np.where(f > delta, f**3, 3 * delta**2 * (f - 4 / 29)) * _WHITE
    linear = xyz @ np.linalg.inv(_MATRIX).T
    return np.where(linear > 0.0031308, 1.055 * np.abs(linear) ** (1 / 2.4) - 0.055, 12.92 * linear)


def test_lab_reference_points_and_round_trip():
    assert np.allclose(rgb_to_lab([1.0, 1.0, 1.0]), [100, 0, 0], atol=1e-9)
    assert np.allclose(rgb_to_lab([0.0, 0, 0]), [0, 0, 0], atol=1e-12)
    rgb = rng.uniform(0, 1, size=(200, 3))
    lab = rgb_to_lab(rgb)
    assert np.max(np.abs(_lab_to_rgb(lab) - rgb)) < 1e-4
    # independent implementation agrees up to its slightly different white point
    assert np.max(np.abs(color.rgb2lab(rgb[None])[0] - lab)) < 0.05


def test_conversions_are_frame_local():
    tr = RgbTrace(rng.uniform(50, 200, size=(40, 3)), 30)
    perm = rng.permutation(40)
    permuted = RgbTrace(tr.samples[perm], 30)
    assert np.allclose(rgb_to_hsv_trace(permuted).samples, rgb_to_hsv_trace(tr).samples[perm])
    assert np.allclose(rgb_to_lab_trace(permuted).samples, rgb_to_lab_trace(tr).samples[perm])


def test_lab_trace_rescaling():
    tr = RgbTrace(np.full((5, 3), 200.0), 30)
    assert np.allclose(rgb_to_lab_trace(tr).samples, [1.0, 0, 0], atol=1e-9)


def test_flip_examples():
    tr = RgbTrace(np.array([[1.0] * 3, [2.0] * 3, [3.0] * 3]), 30, ppg_gt=np.array([1.0, 2, 3]))
    assert flip_time(tr).samples[:, 0].tolist() == [3, 2, 1]
    assert flip_time(tr).ppg_gt.tolist() == [3, 2, 1]
    assert np.array_equal(flip_time(flip_time(tr)).samples, tr.samples)


def test_flip_preserves_zoomed_magnitude():
    x = rng.normal(size=(150, 3)) + 10
    tr = RgbTrace(x, 30)
    spec = hr_zoom_spec(30, 150)
    for ch in range(3):
        a = np.abs(czt(tr.samples[:, ch], spec))
        b = np.abs(czt(flip_time(tr).samples[:, ch], spec))
        assert np.max(np.abs(a - b)) < 1e-9


def _grid(regions=None):
    if regions is None:
        regions = rng.uniform(80, 120, size=(16, 120, 3))
    return RegionTraceGrid(regions, (4, 4), 30)


def test_grid_mean_reproduces_trace():
    g = _grid()
    assert np.allclose(g.mean_trace().samples, g.regions.mean(axis=0), atol=1e-9)
    with pytest.raises(ValueError):
        RegionTraceGrid(np.ones((5, 10, 3)), (2, 2), 30)


def test_occlusion_fraction_zero_and_homogeneous_grid():
    g = _grid()
    assert np.allclose(occlude_regions(g, 0.0, seed=1).samples, g.mean_trace().samples)
    base = rng.uniform(80, 120, size=(120, 3))
    homog = _grid(np.repeat(base[None], 16, axis=0))
    assert np.allclose(occlude_regions(homog, 0.3, seed=2).samples, base)
    with pytest.raises(ValueError):
        occlude_regions(g, 1.0)
    with pytest.raises(ValueError):
        occlude_regions(RegionTraceGrid(np.ones((1, 10, 3)), (1, 1), 30), 0.5)


def test_occlusion_is_seeded_and_partial():
    g = _grid()
    a = occlude_regions(g, 0.3, seed=5).samples
    b = occlude_regions(g, 0.3, seed=5).samples
    assert np.array_equal(a, b)
    differs = np.any(np.abs(a - g.mean_trace().samples) > 1e-12, axis=1)
    assert 0.2 * 120 - 1 <= differs.sum() <= 0.6 * 120 + 1


def test_occluded_synthetic_trace_keeps_pulse_spectrum():
    s = synth_trace(SynthConfig(duration_s=10, hr_bpm=80, seed=4))
    occ = occlude_regions(s.grid, 0.3, seed=9)
    spec = hr_zoom_spec(30, 300)
    g0 = s.trace.samples[:, 1] - s.trace.samples[:, 1].mean()
    g1 = occ.samples[:, 1] - occ.samples[:, 1].mean()
    assert np.corrcoef(band_psd(g0, spec), band_psd(g1, spec))[0, 1] > 0.8


def test_make_views_from_grid_and_trace():
    s = synth_trace(SynthConfig(duration_s=10, seed=3))
    vs = make_views(s.grid, seed=1)
    assert tuple(vs.labels) == VIEW_LABELS
    assert all(len(t) == 300 and t.sample_rate_hz == 30 for t in vs.traces)
    with pytest.warns(UserWarning):
        fallback = make_views(s.trace, seed=1)
    assert fallback.labels[-1] == "flip_colorspace" and len(fallback) == 5
    again = make_views(s.grid, seed=1)
    assert np.array_equal(again.traces[-1].samples, vs.traces[-1].samples)
