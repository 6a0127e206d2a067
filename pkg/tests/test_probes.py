import numpy as np
import pytest
from scipy.special import log_softmax

from gridlens import gridworld as gw
from gridlens import numerics as nx
from gridlens import probes as pr


@pytest.fixture(scope="module")
def datasets(planted_weights):
    tags = ["embedding", "layer0", "layer7"]
    train = pr.collect_activations(planted_weights, gw.generate_scenes(60, 100), tags)
    test = pr.collect_activations(planted_weights, gw.generate_scenes(30, 200), tags)
    return train, test


def test_loss_matches_direct_cross_entropy():
    rng = np.random.default_rng(0)
    X, W, b = rng.normal(size=(20, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
    y = rng.integers(0, 4, 20)
    want = -log_softmax(X @ W + b, axis=1)[np.arange(20), y].mean() + pr.L2 * np.sum(W ** 2)
    got = pr._loss(nx.asarray(W), nx.asarray(b), nx.asarray(X), y)
    assert float(got.data) == pytest.approx(want, rel=1e-12)


def test_separable_synthetic_data_is_learned():
    rng = np.random.default_rng(1)
    y = rng.integers(0, 4, 400)
    X = np.eye(4)[y] * 3 + rng.normal(scale=0.1, size=(400, 4))
    spec = pr.train_probe(X, y, 4, epochs=5)
    assert np.mean(spec.predict(X) == y) == 1.0
    assert spec.train_loss[-1] < spec.train_loss[0]


def test_single_class_rejected():
    with pytest.raises(pr.ProbeError):
        pr.train_probe(np.zeros((5, 3)), np.zeros(5, dtype=int), 8)


def test_unknown_tag_and_axis(planted_weights, datasets):
    with pytest.raises(pr.ProbeError):
        pr.collect_activations(planted_weights, gw.generate_scenes(1, 0), ["layer99"])
    with pytest.raises(pr.ProbeError):
        datasets[0].labels("depth")


def test_dataset_layout(datasets):
    train, _ = datasets
    assert len(train) == 60 * 64
    assert np.array_equal(train.cells, train.rows * 8 + train.columns)
    assert train.activations["embedding"].shape == (60 * 64, 96)


def test_embedding_probe_is_perfect_on_planted(datasets):
    res = pr.evaluate_layer(*datasets, "embedding")
    assert res.row_acc == res.column_acc == res.joint_acc == 1.0


def test_shuffled_labels_near_chance(datasets):
    res = pr.evaluate_layer(*datasets, "embedding", shuffle_labels=True)
    assert abs(res.row_acc - 1 / 8) <= 0.03
    assert abs(res.column_acc - 1 / 8) <= 0.03


@pytest.mark.parametrize("tag", ["embedding", "layer7"])
def test_heatmap_mean_is_joint_accuracy(datasets, tag):
    res = pr.evaluate_layer(*datasets, tag, epochs=2)
    assert res.heatmap.shape == (8, 8)
    assert abs(res.heatmap.mean() - res.joint_acc) < 1e-12


def test_probe_curve_best_tag_and_metadata(planted_weights):
    curve = pr.probe_curve(planted_weights, gw.generate_scenes(20, 1), gw.generate_scenes(10, 2),
                           tags=["embedding", "layer0"], epochs=2)
    assert curve.tags == ("embedding", "layer0")
    assert curve.joint[curve.tags.index(curve.best_tag)] == max(curve.joint)
    assert curve.metadata["n_train_scenes"] == 20
    assert pr.default_tags(2) == ["projection", "embedding", "layer0", "layer1"]
