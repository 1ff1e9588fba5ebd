import numpy as np
import pytest
from sklearn.base import clone

from mlap.estimator import GraphClassifier, check_graphs
from mlap.exceptions import ConfigError, DatasetError
from mlap.graphs import SyntheticSpec, gen_synthetic_dataset


@pytest.fixture(scope="module")
def graphs():
    return gen_synthetic_dataset(SyntheticSpec(per_class_count=3, seed=2))


def tiny(**kw):
    return GraphClassifier(**{**dict(layers=2, dim=8, epochs=2, batch_size=9), **kw})


def test_get_params_and_clone():
    est = tiny(arch="jk", aggregator="concat", seed=4)
    params = est.get_params()
    assert params["arch"] == "jk" and params["dim"] == 8 and params["num_classes"] is None
    twin = clone(est)
    assert twin.get_params() == params and twin is not est


def test_fit_predict_transform(graphs):
    est = tiny().fit(graphs)
    assert est.classes_.tolist() == list(range(9))
    proba = est.predict_proba(graphs)
    assert proba.shape == (27, 9)
    np.testing.assert_allclose(proba.sum(1), 1.0, atol=1e-12)
    assert est.predict(graphs).shape == (27,)
    assert est.transform(graphs).shape == (27, 8)
    dump = est.layer_representations(graphs)
    assert dump.num_layers == 2
    assert 0.0 <= est.score(graphs, [g.label for g in graphs]) <= 1.0
    assert est.evaluate(graphs) == pytest.approx(1 - est.score(graphs, [g.label for g in graphs]))


def test_fit_is_deterministic(graphs):
    a = tiny(dropout=0.5).fit(graphs).predict_proba(graphs)
    b = tiny(dropout=0.5).fit(graphs).predict_proba(graphs)
    assert a.tobytes() == b.tobytes()


def test_binary_head(graphs):
    y = np.array([g.label % 2 for g in graphs])
    est = tiny(head="binary").fit(graphs, y)
    assert est.predict_proba(graphs).shape == (27, 2)
    assert 0.0 <= est.evaluate(graphs[:10] + graphs[-10:], "accuracy") <= 1.0


def test_binary_head_rejects_multiclass_labels(graphs):
    with pytest.raises(ConfigError):
        tiny(head="binary").fit(graphs)


def test_unfitted_raises(graphs):
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        tiny().predict(graphs)


def test_check_graphs_validation(graphs):
    with pytest.raises(DatasetError):
        check_graphs(graphs[0])
    with pytest.raises(DatasetError):
        check_graphs([])
    with pytest.raises(DatasetError):
        check_graphs([graphs[0], "graph"])
    with pytest.raises(DatasetError):
        check_graphs(graphs[:2], [0])
    with pytest.raises(DatasetError):
        check_graphs(graphs[:2], [0, -1])
    relabelled = check_graphs(graphs[:2], [5, 6])
    assert [g.label for g in relabelled] == [5, 6]
