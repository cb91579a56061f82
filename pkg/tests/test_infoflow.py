import numpy as np
import pytest

import oracles
from flowkd.data import make_blob_draw, make_blobs
from flowkd.infoflow import FlowVector, LabelBatch, flow_divergence, flow_vector, match_layers, ncc_probe, qmi_estimate
from flowkd.kernels import COSINE, TSTUDENT
from flowkd.nn import Dense, LayerGraph, ReLU


def test_one_class_is_zero():
    y = np.random.default_rng(0).standard_normal((7, 3))
    assert qmi_estimate(y, np.zeros(7, int)) == pytest.approx(0.0, abs=1e-15)


def test_identical_rows_are_zero():
    y = np.ones((6, 2))
    assert qmi_estimate(y, [0, 0, 0, 1, 1, 1]) == pytest.approx(0.0, abs=1e-15)


@pytest.mark.parametrize("kernel", [TSTUDENT, COSINE])
def test_qmi_matches_triple_loop(kernel):
    rng = np.random.default_rng(1)
    y = rng.standard_normal((6, 2))
    labels = np.array([0, 1, 0, 1, 1, 0])
    fn = oracles.k_t if kernel is TSTUDENT else oracles.k_cos
    assert qmi_estimate(y, labels, kernel) == pytest.approx(oracles.qmi(y.tolist(), labels, fn), abs=1e-12)


def test_qmi_separated_beats_shuffled():
    data = make_blobs(20, 3, 4, 0.3, seed=2)
    rng = np.random.default_rng(2)
    wins = sum(qmi_estimate(data.x, data.y) > qmi_estimate(data.x, rng.permutation(data.y)) for _ in range(20))
    assert wins >= 19


def test_label_batch_checks_range():
    with pytest.raises(ValueError):
        LabelBatch([0, 3], n_classes=3)
    assert len(LabelBatch([0, 2], n_classes=3)) == 2


def _mlp(points):
    rng = np.random.default_rng(3)
    layers = [Dense(2, 6, rng=rng), ReLU(), Dense(6, 3, rng=rng)]
    return LayerGraph((2,), layers, points)


def test_flow_vector_single_point():
    data = make_blobs(10, 2, 2, 0.5, seed=3)
    model = _mlp([2])
    omega = flow_vector(model, data.x, data.y).omega
    assert omega.shape == (1,)
    assert omega[0] == pytest.approx(qmi_estimate(model.representations(data.x)[0], data.y), abs=1e-15)


def test_flow_vector_matches_per_layer_oracle():
    data = make_blobs(8, 2, 2, 0.3, seed=4)
    model = _mlp([0, 1, 2])
    reps = model.representations(data.x)
    omega = flow_vector(model, data.x, data.y, batch_size=128).omega
    for w, r in zip(omega, reps):
        assert w == pytest.approx(oracles.qmi(r.tolist(), data.y, oracles.k_t), abs=1e-12)


def test_flow_vector_averages_batches():
    data = make_blobs(10, 2, 2, 0.5, seed=5)
    model = _mlp([2])
    rep = model.representations(data.x)[0]
    expected = np.mean([qmi_estimate(rep[:8], data.y[:8]), qmi_estimate(rep[8:16], data.y[8:16]),
                        qmi_estimate(rep[16:], data.y[16:])])
    assert flow_vector(model, data.x, data.y, batch_size=8).omega[0] == pytest.approx(expected, abs=1e-15)


def test_duplicate_point_duplicates_entry():
    data = make_blobs(10, 2, 2, 0.5, seed=6)
    rng = np.random.default_rng(6)
    layers = [Dense(2, 4, rng=rng), ReLU(), ReLU()]
    omega = flow_vector(LayerGraph((2,), layers, [1, 2]), data.x, data.y).omega
    assert omega[0] == omega[1]


def test_match_layers_examples():
    assert list(match_layers([0.1, 0.5, 0.9], [0.0, 0.45, 0.8, 0.95])) == [0, 1, 3]
    assert list(match_layers([0.1, 0.3, 0.6], [0.1, 0.3, 0.6])) == [0, 1, 2]
    assert match_layers([0.9, 0.9], [0.9, 0.1, 0.2])[-1] == 2
    assert list(match_layers([0.5, 1.0], [0.4, 0.6, 0.0])) == [0, 2]  # tie -> lowest index
    with pytest.raises(ValueError):
        match_layers([], [1.0])


def test_flow_divergence_examples():
    assert flow_divergence([1.0, 2.0], [0.0, 0.0], [0, 1]) == 5.0
    w = FlowVector([0.2, 0.4, 0.7])
    assert flow_divergence(w, w, [0, 1, 2]) == 0.0
    with pytest.raises(IndexError):
        flow_divergence([1.0, 2.0], [0.0], [0, 1])
    with pytest.raises(IndexError):
        flow_divergence([1.0, 2.0], [0.0, 1.0], [0])


def test_flow_vector_rejects_nan():
    with pytest.raises(ValueError):
        FlowVector([0.1, np.nan])


def test_ncc_examples():
    x = np.array([[0.0, 0.0], [10.0, 10.0]])
    assert ncc_probe(x, [0, 1], x, [0, 1]) == 1.0
    mid = np.array([[5.0, 5.0]])
    assert ncc_probe(x, [0, 1], mid, [0]) == 1.0
    assert ncc_probe(x, [0, 1], mid, [1]) == 0.0
    with pytest.raises(ValueError):
        ncc_probe(x, [0, 1], mid, [2])


def test_ncc_blobs_accurate():
    train = make_blobs(30, 3, 3, 0.2, seed=7)
    test = make_blob_draw(30, 3, 3, 0.2, seed=7, draw=1)
    assert ncc_probe(train.x, train.y, test.x, test.y) >= 0.95
