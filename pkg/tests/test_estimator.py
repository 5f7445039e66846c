import numpy as np
import pytest
from sklearn.base import clone
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler
from sklearn.utils.estimator_checks import parametrize_with_checks

from openfl_stability.estimator import OpenFederatedClassifier
from openfl_stability.objectives import generate_synthetic_dataset


@pytest.fixture(scope="module")
def data():
    ds = generate_synthetic_dataset(5, 400, 1.0, 0)
    return ds.features, np.where(ds.labels > 0, "yes", "no")


def test_params_round_trip_and_clone():
    est = OpenFederatedClassifier(lam=0.1, optimizer="adam", eta=0.05, p=0.5, random_state=3)
    params = est.get_params()
    assert params["lam"] == 0.1 and params["optimizer"] == "adam"
    twin = clone(est)
    assert twin.get_params() == params
    est.set_params(n_rounds=7)
    assert est.n_rounds == 7


def test_fit_predict(data):
    X, y = data
    est = OpenFederatedClassifier(lam=0.01, eta=0.5, p=0.3, n_rounds=30, random_state=0).fit(X, y)
    assert est.coef_.shape == (5,)
    assert set(est.predict(X)) <= {"no", "yes"}
    assert est.score(X, y) > 0.9
    proba = est.predict_proba(X)
    assert proba.shape == (400, 2) and np.allclose(proba.sum(axis=1), 1.0)
    assert len(est.history_.rounds) == 30


@pytest.mark.parametrize("optimizer", ["sgd", "adam"])
def test_fit_is_reproducible(data, optimizer):
    X, y = data
    kw = dict(optimizer=optimizer, eta=0.1, p=1.0, n_rounds=10, random_state=5)
    a = OpenFederatedClassifier(**kw).fit(X, y).coef_
    b = OpenFederatedClassifier(**kw).fit(X, y).coef_
    assert a.tobytes() == b.tobytes()


def test_pipeline(data):
    X, y = data
    pipe = make_pipeline(StandardScaler(), OpenFederatedClassifier(eta=0.5, n_rounds=20, random_state=0))
    assert pipe.fit(X, y).score(X, y) > 0.9


def test_full_batch_fallback_for_small_shards(data):
    X, y = data
    est = OpenFederatedClassifier(n_clients=20, batch_size=100, eta=0.5, n_rounds=5, random_state=0).fit(X, y)
    assert np.all(np.isfinite(est.coef_))


def test_input_validation(data):
    X, y = data
    with pytest.raises(ValueError):
        OpenFederatedClassifier().fit(X, np.arange(len(y)) % 3)
    with pytest.raises(ValueError, match="one class"):
        OpenFederatedClassifier().fit(X, np.zeros(len(y)))
    with pytest.raises(ValueError):
        OpenFederatedClassifier(n_clients=1000).fit(X, y)
    with pytest.raises(ValueError):
        OpenFederatedClassifier(n_initial_clients=0).fit(X, y)
    est = OpenFederatedClassifier(n_rounds=2, random_state=0).fit(X, y)
    with pytest.raises(ValueError):
        est.predict(X[:, :3])


@parametrize_with_checks([OpenFederatedClassifier(n_clients=2, n_initial_clients=1, n_rounds=5, random_state=0)])
def test_sklearn_estimator_contract(estimator, check):
    check(estimator)
