import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline

from shipgate.cli import synthetic_images
from shipgate.estimators import GateClassifier, ImageDownsampler, RLEBoxExtractor, check_image_batch
from shipgate.exceptions import InvalidInputError, ShapeMismatchError
from shipgate.netdef import build_akidanet05, save_model, synth_weights


@pytest.fixture(scope="module")
def batch():
    return synthetic_images(6, 32, seed=4)


def test_params_and_clone():
    est = GateClassifier(input_size=32, seed=3, threshold=0.2)
    params = est.get_params()
    assert params["input_size"] == 32 and params["threshold"] == 0.2
    twin = clone(est)
    assert twin.get_params() == params
    assert not hasattr(twin, "graph_")


def test_fit_predict_shapes(batch):
    X, y = batch
    est = GateClassifier(input_size=32, seed=1).fit(X)
    proba = est.predict_proba(X)
    assert proba.shape == (6, 2)
    np.testing.assert_allclose(proba.sum(axis=1), 1.0)
    assert set(est.predict(X)) <= {0, 1}
    assert est.decision_function(X).shape == (6,)


def test_dense_and_event_scores_identical(batch):
    X, _ = batch
    a = GateClassifier(input_size=32, seed=2, mode="events").fit(X)
    b = GateClassifier(input_size=32, seed=2, mode="dense").fit(X)
    np.testing.assert_array_equal(a.decision_function(X), b.decision_function(X))


def test_target_recall_tunes_threshold(batch):
    X, y = batch
    y = np.array([1, 0, 1, 0, 0, 1])
    est = GateClassifier(input_size=32, seed=2, target_recall=1.0).fit(X, y)
    flagged = est.predict(X)
    assert flagged[y == 1].all()


def test_loads_model_file(tmp_path, batch):
    X, _ = batch
    g = synth_weights(build_akidanet05(32), 5)
    path = save_model(g, tmp_path / "m.aknw")
    a = GateClassifier(model_path=str(path)).fit(X)
    b = GateClassifier(input_size=32, seed=5, sparsity_bias=0.0).fit(X)
    np.testing.assert_array_equal(a.decision_function(X), b.decision_function(X))


def test_downsampled_pipeline(batch):
    X, _ = batch
    big = np.repeat(np.repeat(X, 3, axis=2), 3, axis=3)
    np.testing.assert_array_equal(ImageDownsampler(3).fit_transform(big), X)
    pipe = make_pipeline(ImageDownsampler(3), GateClassifier(input_size=32, seed=1))
    pipe.fit(big)
    direct = GateClassifier(input_size=32, seed=1).fit(X)
    np.testing.assert_array_equal(pipe.predict_proba(big), direct.predict_proba(X))


def test_layer_stats_one_row_per_layer(batch):
    X, _ = batch
    est = GateClassifier(input_size=32).fit(X)
    assert len(est.layer_stats(X[:2])) == len(est.graph_.layers)


def test_rle_box_extractor():
    out = RLEBoxExtractor(4, 4).fit_transform(["1 3", "", None, "5 2"])
    np.testing.assert_array_equal(out[0], [0, 0, 0, 2])
    assert np.isnan(out[1]).all() and np.isnan(out[2]).all()
    np.testing.assert_array_equal(out[3], [1, 0, 1, 1])


def test_batch_validation():
    with pytest.raises(ShapeMismatchError):
        check_image_batch(np.zeros((2, 1, 4, 4)))
    with pytest.raises(InvalidInputError):
        check_image_batch(np.full((1, 3, 4, 4), 300))
    with pytest.raises(ShapeMismatchError):
        GateClassifier(input_size=32).fit(np.zeros((1, 3, 40, 40), dtype=np.uint8))


def test_default_synthetic_gate_is_not_constant():
    # default bias must leave enough deep activity for scores to depend on the image
    X, _ = synthetic_images(12, 64, seed=3)
    est = GateClassifier(input_size=64).fit(X)
    assert len(np.unique(est.predict_proba(X)[:, 1])) > 1
    deep = est.layer_stats(X[:4])[-3].input_density
    assert 0 < deep < est.layer_stats(X[:4])[1].input_density
