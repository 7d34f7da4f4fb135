import csv
import itertools

import numpy as np
import pytest

import beatkit.autodiff as ad
from beatkit.autodiff import Tape, Tensor, grad_check
from beatkit.data import synth_corpus
from beatkit.model import ModelConfig, init_params, orthonormal_loss, orthonormal_penalty_rows
from beatkit.training import (
    LOSS_COLUMNS,
    TrainRunConfig,
    band_psd,
    emd_loss,
    mse_loss,
    scl_loss,
    split_dataset,
    total_loss,
    train,
)

rng = np.random.default_rng(21)


def _one_hot(k, n=10):
    v = np.zeros(n)
    v[k] = 1
    return v


def _dist(n=12, size=()):
    x = rng.uniform(0.01, 1, size=size + (n,))
    return x / x.sum(axis=-1, keepdims=True)


@pytest.mark.parametrize("rows,expected", [
    ([[1, -1, 0] / np.sqrt(2), [1, 1, -2] / np.sqrt(6)], 0.0),
    ([[1, 0, 0], [1, 0, 0]], 1.0),
    ([[2, 0, 0], [0, 1, 0]], 1.0),
])
def test_orthonormal_penalty_examples(rows, expected):
    assert float(orthonormal_penalty_rows([Tensor(np.array(rows, float))]).data) == pytest.approx(expected, abs=1e-15)


def test_orthonormal_loss_averages_over_matrices():
    cfg = ModelConfig(window_len=16, num_blocks=2)
    p = init_params(cfg).arrays
    p["blocks.0.heads.0.raw_q"] = np.array([[1.0, 0, 0], [1.0, 0, 0]])
    assert float(orthonormal_loss(p, cfg).data) == pytest.approx(1.0 / 6)


def test_emd_examples():
    assert float(emd_loss([1.0, 0.0], [0.0, 1.0]).data) == pytest.approx(0.5)
    p = _dist()
    assert float(emd_loss(p, p).data) == 0
    with pytest.raises(ValueError):
        emd_loss([0.5, 0.6], [0.5, 0.5])
    with pytest.raises(ValueError):
        emd_loss([1.0, 0.0], [1.0, 0.0, 0.0])


def test_emd_monotone_in_transport_distance_on_ten_bins():
    for start in range(10):
        losses = [float(emd_loss(_one_hot(start), _one_hot(end)).data) for end in range(start, 10)]
        assert losses[0] == 0 and all(b > a for a, b in zip(losses, losses[1:]))


def test_emd_symmetric_nonnegative_and_batch_norm():
    p, t = _dist(size=(3,)), _dist(size=(3,))
    a, b = float(emd_loss(p, t).data), float(emd_loss(t, p).data)
    assert a == pytest.approx(b) and a > 0
    assert float(emd_loss(p, t, norm="batch").data) == pytest.approx(a * 12)


def test_mse_examples():
    gt = rng.normal(size=200)
    gt = (gt - gt.mean()) / gt.std()
    assert float(mse_loss(gt, gt).data) == pytest.approx(0, abs=1e-20)
    assert float(mse_loss(-gt, gt).data) == pytest.approx(4)
    assert float(mse_loss(gt + 3.0, gt).data) == pytest.approx(0, abs=1e-20)
    with pytest.raises(ValueError):
        mse_loss(gt[:-1], gt)


def test_scl_identical_views_give_gamma_over_n():
    p = _dist()
    spectra = np.broadcast_to(p, (3, 4, 12)).copy()
    l_pos, l_neg, l_scl = scl_loss(spectra, gamma=1.0)
    assert float(l_pos.data) == 0 and float(l_neg.data) == 0
    assert float(l_scl.data) == pytest.approx(1 / 3)


def test_scl_hinge_clamps():
    # l_pos = 0.2, l_neg = 1.5, gamma = 1 -> clamped to zero
    assert float(ad.relu_hinge(Tensor(0.2 - 1.5 + 1.0)).data) == 0
    spectra = np.stack([np.stack([_one_hot(0), _one_hot(0)]), np.stack([_one_hot(9), _one_hot(9)])])
    _, l_neg, l_scl = scl_loss(spectra, gamma=1.0)
    assert float(l_neg.data) > 1 and float(l_scl.data) == 0


def test_scl_pair_counts_for_two_by_two():
    spectra = np.stack([np.stack([_one_hot(0), _one_hot(1)]), np.stack([_one_hot(5), _one_hot(6)])])
    l_pos, l_neg, _ = scl_loss(spectra)
    d = lambda i, j: float(emd_loss(_one_hot(i), _one_hot(j)).data)
    assert float(l_pos.data) == pytest.approx(d(0, 1) + d(5, 6))
    assert float(l_neg.data) == pytest.approx(d(0, 5) + d(0, 6) + d(1, 5) + d(1, 6))
    with pytest.raises(ValueError):
        scl_loss(spectra[:1])
    with pytest.raises(ValueError):
        scl_loss(spectra[:, :1])


def test_scl_permutation_invariance():
    spectra = _dist(size=(3, 4))
    ref = [float(t.data) for t in scl_loss(spectra, 2.0)]
    for perm in itertools.islice(itertools.permutations(range(4)), 6):
        got = [float(t.data) for t in scl_loss(spectra[:, list(perm)], 2.0)]
        assert np.allclose(got, ref, rtol=1e-12)
    got = [float(t.data) for t in scl_loss(spectra[[2, 0, 1]], 2.0)]
    assert np.allclose(got, ref, rtol=1e-12)


def test_scl_zero_gradient_in_hinge_region():
    spectra = Tensor(np.stack([np.stack([_one_hot(1), _one_hot(2)]),
                               np.stack([_one_hot(8), _one_hot(9)])]) * 0.9 + 0.01,
                     requires_grad=True)
    with Tape() as tape:
        _, l_neg, l_scl = scl_loss(spectra, gamma=0.5)
    assert float(l_scl.data) == 0
    assert np.all(tape.backward(l_scl)[spectra] == 0)


def test_total_loss_examples():
    assert total_loss(0.4, 0.2, 0.5) == pytest.approx(0.5)
    assert total_loss(0.4, 0.2, 0.0) == 0.4
    assert TrainRunConfig().alpha == 0.5 and TrainRunConfig().gamma == 1.0


def test_two_sample_two_view_scl_gradient_matches_finite_differences():
    pulses = [Tensor(np.sin(2 * np.pi * f * np.arange(64) / 30) + 0.3 * rng.normal(size=64))
              for f in (1.0, 1.1, 2.0, 1.9)]

    def loss(*xs):
        spectra = [[band_psd(xs[0], 30), band_psd(xs[1], 30)], [band_psd(xs[2], 30), band_psd(xs[3], 30)]]
        return scl_loss(spectra, gamma=10.0)[2]

    assert grad_check(loss, pulses, h=1e-6).max_rel_error < 1e-4


def test_band_psd_unit_sum_and_peak():
    x = np.sin(2 * np.pi * 1.5 * np.arange(300) / 30)
    p = band_psd(x, 30).data
    assert p.sum() == pytest.approx(1) and int(np.argmax(p)) == 137
    with pytest.raises(ValueError):
        band_psd(np.zeros(64), 30)


def test_split_is_seeded_eighty_twenty():
    items = list(range(10))
    tr, va = split_dataset(items, 0.2, 3)
    assert len(tr) == 8 and len(va) == 2 and sorted(tr + va) == items
    assert split_dataset(items, 0.2, 3) == (tr, va)


def test_run_config_validation():
    with pytest.raises(ValueError):
        TrainRunConfig(mode="adversarial")
    with pytest.raises(ValueError):
        TrainRunConfig(batch_size=0)
    d = TrainRunConfig()
    assert (d.epochs, d.batch_size, d.lr_max, d.sequence_len) == (20, 2, 5e-4, 300)


@pytest.fixture(scope="module")
def tiny_corpus():
    return synth_corpus(5, duration_s=4, seed=2)


TINY = ModelConfig(window_len=16, num_blocks=1, mlp_hidden=4, stride=8)


@pytest.mark.parametrize("mode", ["scl", "supervised_emd", "supervised_mse"])
def test_short_runs_are_deterministic(tiny_corpus, mode, tmp_path):
    run = TrainRunConfig(mode=mode, epochs=2, sequence_len=64, train_stride=8, seed=4)
    a = train(tiny_corpus, run, TINY, loss_csv=tmp_path / "loss.csv")
    b = train(tiny_corpus, run, TINY)
    assert [r["l_total"] for r in a.history] == [r["l_total"] for r in b.history]
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params.names())
    with open(tmp_path / "loss.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert tuple(rows[0]) == LOSS_COLUMNS and len(rows) == 2
    assert 1 <= a.best_epoch <= 2


def test_training_rejects_bad_datasets(tiny_corpus):
    with pytest.raises(ValueError):
        train([], TrainRunConfig(epochs=1), TINY)
    with pytest.raises(ValueError):
        train(tiny_corpus, TrainRunConfig(epochs=1, sequence_len=600), TINY)
