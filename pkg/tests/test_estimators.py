import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from edgedem.datagen import PartitionSpec, partition_noniid, synth_dataset
from edgedem.estimators import DemLearnClassifier, FedAvgClassifier, SwapMatchingAssociator
from edgedem.latency import LearningBudget, draw_profiles
from edgedem.matching import AssociationGame, run_matching
from edgedem.radio import RadioConfig, generate_topology, link_table


def _federated(n_ues=8, seed=0):
    data = synth_dataset(10, 20, 8000, seed)
    shards = partition_noniid(data, n_ues, PartitionSpec(2, (60, 120), seed))
    X = np.vstack([s.train.features for s in shards])
    y = np.concatenate([s.train.labels for s in shards])
    client = np.concatenate([np.full(len(s.train), 100 + n) for n, s in enumerate(shards)])
    return X, y, client, shards


def test_params_round_trip_through_clone():
    est = DemLearnClassifier(n_groups=2, eta=1.5, rounds=4, random_state=3)
    params = clone(est).get_params()
    assert params["n_groups"] == 2 and params["eta"] == 1.5 and params["random_state"] == 3
    assert "eta" not in FedAvgClassifier().get_params()


@pytest.mark.parametrize("cls", [DemLearnClassifier, FedAvgClassifier])
def test_fit_predict_shapes_and_labels(cls):
    X, y, client, _ = _federated()
    est = cls(rounds=3, local_epochs=2, random_state=0).fit(X, y, client)
    pred = est.predict(X)
    assert pred.shape == y.shape and set(pred) <= set(y)
    assert est.n_features_in_ == 20
    personal = est.predict_personal(X, client)
    # personal models fit their own two labels
    assert np.mean(personal == y) > 0.9


def test_string_labels_and_client_ids():
    X, y, client, _ = _federated()
    names = np.array([f"c{k}" for k in range(10)])
    est = DemLearnClassifier(rounds=2, local_epochs=1, random_state=0).fit(X, names[y], client)
    assert est.predict(X[:5]).dtype.kind == "U"
    assert len(est.groups_) == 3


def test_random_state_controls_result():
    X, y, client, _ = _federated()
    a = DemLearnClassifier(rounds=2, local_epochs=1, random_state=5).fit(X, y, client)
    b = DemLearnClassifier(rounds=2, local_epochs=1, random_state=5).fit(X, y, client)
    assert np.array_equal(a.trainer_.regional, b.trainer_.regional)


def test_partial_fit_counts_rounds():
    X, y, client, _ = _federated()
    full = FedAvgClassifier(rounds=3, local_epochs=1, random_state=1).fit(X, y, client)
    inc = FedAvgClassifier(rounds=3, local_epochs=1, random_state=1)
    for _ in range(3):
        inc.partial_fit(X, y, client)
    assert np.array_equal(full.trainer_.regional, inc.trainer_.regional)


def test_errors():
    X, y, client, _ = _federated()
    with pytest.raises(NotFittedError):
        DemLearnClassifier().predict(X)
    with pytest.raises(ValueError):
        DemLearnClassifier().fit(X, y, client[:-1])
    est = FedAvgClassifier(rounds=1, local_epochs=1).fit(X, y, client)
    with pytest.raises(ValueError):
        est.predict_personal(X[:2], [100, 999])


def test_associator_matches_functional_api():
    net = generate_topology(RadioConfig(), 20, 3, 4)
    links = link_table(net, RadioConfig())
    prof = draw_profiles(np.random.default_rng(4), 20, 100)
    est = SwapMatchingAssociator(quota=8).fit(links, prof)
    game = AssociationGame(links, prof, LearningBudget(), 8)
    m, _, _ = run_matching(game)
    assert est.predict().tolist() == m.assignment.tolist()
    assert est.system_delay_ == pytest.approx(game.system_delay(m))
    served = est.assignment_ >= 0
    for s in range(3):
        assert est.beta_[est.assignment_ == s].sum() == pytest.approx(1.0, abs=1e-9) or not (est.assignment_ == s).any()
    assert np.all(est.beta_[served] > 0)
