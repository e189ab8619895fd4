import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from spherical_frustum.errors import BadLabel, ShapeMismatch
from spherical_frustum.geometry import PointCloud, SphericalConfig
from spherical_frustum.losses import (LossConfig, lovasz_softmax, multi_layer_loss, read_class_frequencies,
                                      softmax, weighted_cross_entropy)
from spherical_frustum.metrics import (ConfusionMatrix, conventional_projection, conventional_projection_uv,
                                       drop_stats, knn_restore, miou)

import oracles
from conftest import random_uvr


# losses ---------------------------------------------------------------------


def one_hot_logits(labels, n, margin=30.0):
    logits = np.full((len(labels), n), -margin)
    logits[np.arange(len(labels)), labels] = margin
    return logits


def test_weights():
    cfg = LossConfig((0.5, 0.25, 0.25), epsilon=0.5)
    assert cfg.weights.tolist() == [1.0, 1 / 0.75, 1 / 0.75]
    with pytest.raises(ValueError):
        LossConfig((0.5, 0.6))
    with pytest.raises(ValueError):
        LossConfig((1.0,), epsilon=0.0)


@pytest.mark.parametrize("n", [2, 3, 7, 20])
def test_wce_uniform_logits_is_log_n(rng, n):
    labels = rng.integers(0, n, 50)
    freqs = rng.dirichlet(np.ones(n))
    value = weighted_cross_entropy(np.full((50, n), 0.7), labels, LossConfig(tuple(freqs)))
    assert value == math.log(n)


def test_wce_perfect():
    labels = np.array([0, 2, 1, 1])
    assert weighted_cross_entropy(one_hot_logits(labels, 3), labels, LossConfig.uniform(3)) < 1e-9


def test_wce_scalar_reference():
    logits = [[2.0, -1.0], [0.5, 0.25], [-1.0, 3.0]]
    labels = [0, 1, 0]
    freqs = (0.7, 0.3)
    cfg = LossConfig(freqs, epsilon=1e-3)
    num = den = 0.0
    for row, y in zip(logits, labels):
        log_p = row[y] - math.log(sum(math.exp(z) for z in row))
        w = 1.0 / (freqs[y] + 1e-3)
        num += -w * log_p
        den += w
    assert abs(weighted_cross_entropy(logits, labels, cfg) - num / den) < 1e-12


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 6), st.integers(1, 20), st.floats(-50, 50), st.integers(0, 2 ** 31))
def test_wce_shift_invariant(n, N, shift, seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(N, n))
    labels = r.integers(0, n, N)
    cfg = LossConfig.uniform(n)
    a = weighted_cross_entropy(logits, labels, cfg)
    assert a >= 0
    assert abs(a - weighted_cross_entropy(logits + shift, labels, cfg)) < 1e-9
    perm = r.permutation(N)
    assert abs(a - weighted_cross_entropy(logits[perm], labels[perm], cfg)) < 1e-9


def test_bad_labels():
    with pytest.raises(BadLabel):
        weighted_cross_entropy(np.zeros((2, 3)), [0, 3], LossConfig.uniform(3))
    with pytest.raises(BadLabel):
        lovasz_softmax(np.full((2, 3), 1 / 3), [-1, 0])


def test_lovasz_examples():
    labels = np.array([0, 1, 1, 2])
    assert lovasz_softmax(np.eye(3)[labels], labels) == 0.0
    assert lovasz_softmax(np.array([[0.0, 1.0]]), np.array([0])) == 1.0


def test_lovasz_matches_extension_oracle_exhaustively(rng):
    checked = 0
    for p in range(1, 9):
        for labels in itertools.product((0, 1), repeat=p):
            labels = np.array(labels)
            for draw in range(2):
                if draw == 0:
                    q = rng.integers(0, 5, p) / 4.0  # coarse values produce ties
                else:
                    q = rng.uniform(size=p)
                probs = np.column_stack([1 - q, q])
                assert abs(lovasz_softmax(probs, labels) - oracles.lovasz_softmax(probs, labels)) < 1e-9
                checked += 1
    assert checked == 2 * (2 ** 9 - 2)


def test_lovasz_multiclass_oracle(rng):
    for _ in range(50):
        N, n = int(rng.integers(1, 9)), int(rng.integers(2, 5))
        probs = rng.dirichlet(np.ones(n), size=N)
        labels = rng.integers(0, n, N)
        value = lovasz_softmax(probs, labels)
        assert abs(value - oracles.lovasz_softmax(probs, labels)) < 1e-9
        assert 0.0 <= value <= 1.0
        perm = rng.permutation(N)
        assert abs(value - lovasz_softmax(probs[perm], labels[perm])) < 1e-12


def test_lovasz_all_classes_variant():
    probs = np.array([[1.0, 0.0, 0.0]])
    assert lovasz_softmax(probs, [0], classes_present_only=True) == 0.0
    assert lovasz_softmax(probs, [0], classes_present_only=False) == 0.0
    probs = np.array([[0.5, 0.5, 0.0]])
    # class 1 is absent: its false positive only counts in the all-classes variant
    assert lovasz_softmax(probs, [0], classes_present_only=True) == 0.5
    assert lovasz_softmax(probs, [0], classes_present_only=False) == pytest.approx((0.5 + 0.5 + 0.0) / 3)


def test_multi_layer(rng):
    labels = rng.integers(0, 4, 30)
    cfg = LossConfig.uniform(4)
    perfect = one_hot_logits(labels, 4)
    assert multi_layer_loss([perfect] * 4, labels, cfg) < 1e-9
    logits = rng.normal(size=(30, 4))
    single = weighted_cross_entropy(logits, labels, cfg) + lovasz_softmax(softmax(logits), labels)
    assert abs(multi_layer_loss([logits] * 4, labels, cfg) - 4 * single) < 1e-12
    layers = [rng.normal(size=(30, 4)) for _ in range(3)] + [logits]
    expect = sum(weighted_cross_entropy(x, labels, cfg) + lovasz_softmax(softmax(x), labels) for x in layers)
    assert abs(multi_layer_loss(layers, labels, cfg) - expect) < 1e-12
    with pytest.raises(ShapeMismatch):
        multi_layer_loss(layers[:3], labels, cfg)
    with pytest.raises(ShapeMismatch):
        multi_layer_loss(layers[:3] + [logits[:5]], labels, cfg)


def test_frequency_file(tmp_path):
    path = tmp_path / "freq.txt"
    path.write_text("# id freq\n0 0.25\n2 0.75\n")
    cfg = read_class_frequencies(path)
    assert cfg.frequencies == (0.25, 0.0, 0.75)
    assert cfg.weights[1] == 1 / 1e-3


# metrics --------------------------------------------------------------------


def test_miou_perfect_and_ratio():
    labels = np.array([1, 2, 2, 3, 0])
    per, mean = miou(ConfusionMatrix.from_labels(labels, labels, 4))
    assert per == [None, 1.0, 1.0, 1.0] and mean == 1.0
    # class 1: TP=2, FP=1, FN=1
    labels = np.array([1, 1, 1, 2])
    preds = np.array([1, 1, 2, 1])
    per, _ = miou(ConfusionMatrix.from_labels(labels, preds, 3))
    assert per[1] == 0.5


def test_miou_matches_set_counting(rng):
    for _ in range(100):
        n = int(rng.integers(2, 8))
        N = int(rng.integers(1, 60))
        labels = rng.integers(0, n, N)
        preds = rng.integers(0, n, N)
        cm = ConfusionMatrix.from_labels(labels, preds, n)
        per, mean = miou(cm)
        eper, emean = oracles.iou_by_sets(labels.tolist(), preds.tolist(), n)
        assert per == eper
        assert (mean == emean) or (math.isnan(mean) and math.isnan(emean))
        assert cm.total == int(np.sum(labels != 0))


def test_miou_full_iff_no_confusion(rng):
    labels = rng.integers(1, 5, 40)
    preds = labels.copy()
    assert miou(ConfusionMatrix.from_labels(labels, preds, 5))[1] == 1.0
    preds[3] = (preds[3] % 4) + 1
    assert miou(ConfusionMatrix.from_labels(labels, preds, 5))[1] < 1.0


def test_confusion_validation():
    with pytest.raises(ValueError):
        ConfusionMatrix.from_labels([1, 2], [1], 3)
    with pytest.raises(ValueError):
        ConfusionMatrix.from_labels([1, 5], [1, 1], 3)


def test_conventional_projection_examples():
    kept, dropped = conventional_projection_uv(np.array([0, 1, 2]), np.array([0, 0, 0]), np.ones(3), 4)
    assert kept.tolist() == [0, 1, 2] and dropped.tolist() == []
    kept, dropped = conventional_projection_uv(np.array([1, 1]), np.array([0, 0]), np.array([7.0, 5.0]), 4)
    assert kept.tolist() == [1] and dropped.tolist() == [0]
    kept, _ = conventional_projection_uv(np.array([1, 1, 1]), np.array([0, 0, 0]), np.array([5.0, 3.0, 3.0]), 4)
    assert kept.tolist() == [1]


def test_conventional_projection_oracle(rng):
    for _ in range(20):
        u, v, r = random_uvr(rng, 200, 8, 16, cells=50, tie_ranges=True)
        kept, dropped = conventional_projection_uv(u, v, r, 16)
        expect = sorted(min(ids, key=lambda k: (r[k], k)) for ids in oracles.buckets(u, v).values())
        assert kept.tolist() == expect
        assert sorted(kept.tolist() + dropped.tolist()) == list(range(200))


def test_knn_examples():
    u = np.array([3, 3])
    v = np.array([2, 2])
    r = np.array([1.0, 2.0])
    out = knn_restore(np.array([0]), np.array([7]), np.array([1]), u, v, r, K=1, window=5, H=4, W=8)
    assert out.tolist() == [7, 7]
    out = knn_restore(np.array([0, 1]), np.array([4, 5]), np.array([], dtype=int), u, v, r)
    assert out.tolist() == [4, 5]


@pytest.mark.parametrize("K,window,wrap", [(3, 5, True), (5, 5, True), (1, 3, False), (4, 3, True)])
def test_knn_matches_brute_force(rng, K, window, wrap):
    for _ in range(10):
        u, v, r = random_uvr(rng, 150, 8, 16, cells=40, tie_ranges=True)
        kept, dropped = conventional_projection_uv(u, v, r, 16)
        kept_pred = rng.integers(0, 4, kept.shape[0])
        out = knn_restore(kept, kept_pred, dropped, u, v, r, K=K, window=window, H=8, W=16,
                          wrap_azimuth=wrap)
        expect = oracles.knn_vote(kept.tolist(), kept_pred.tolist(), dropped.tolist(), u, v, r,
                                  K, window, 8, 16, wrap)
        assert out[kept].tolist() == kept_pred.tolist()
        assert {int(d): int(out[d]) for d in dropped} == expect
        assert np.all(out >= 0)


def test_drop_stats():
    cfg = SphericalConfig(8, 16)
    az = np.linspace(-3, 3, 10)
    injective = PointCloud(np.column_stack([np.cos(az), np.sin(az), np.zeros(10)]), np.zeros(10))
    assert drop_stats(injective, cfg)["fraction"] == 1.0
    same = PointCloud(np.outer(np.arange(1, 6), [1.0, 0.0, 0.0]), np.zeros(5), labels=[1, 1, 2, 2, 2])
    stats = drop_stats(same, cfg)
    assert stats["preserved"] == 1 and stats["N"] == 5 and stats["fraction"] == 0.2
    assert stats["per_class_drop"] == {"1": 0.5, "2": 1.0}
    kept, _ = conventional_projection(same, cfg)
    assert kept.tolist() == [0]
