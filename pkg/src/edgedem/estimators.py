"""Scikit-learn style wrappers around the learning and association layers."""

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datagen import Dataset
from .demlearn import ModelParams, TrainConfig, logistic_layout, mlp_layout, predict_labels
from .experiment import DemLearnTrainer, FedAvgTrainer
from .latency import LearningBudget
from .matching import AssociationGame, run_matching


class _ModelOpts:
    def __init__(self, n_groups, linkage, cluster_features, init_scale):
        self.n_groups, self.linkage = n_groups, linkage
        self.cluster_features, self.init_scale = cluster_features, init_scale


class _FederatedClassifier(ClassifierMixin, BaseEstimator):
    _trainer = None

    def _setup(self, X, y, client):
        X, y = check_X_y(X, y)
        client = np.asarray(client)
        if client.shape != (X.shape[0],):
            raise ValueError("client must give one UE id per sample")
        self.classes_ = unique_labels(y)
        y_idx = np.searchsorted(self.classes_, y)
        self.clients_ = np.unique(client)
        shards = [Dataset(X[client == c], y_idx[client == c], len(self.classes_)) for c in self.clients_]
        self.n_features_in_ = X.shape[1]
        if self.model == "mlp":
            self.layout_ = mlp_layout(X.shape[1], self.hidden, len(self.classes_))
        else:
            self.layout_ = logistic_layout(X.shape[1], len(self.classes_))
        cfg = TrainConfig(self.learning_rate, self.eta, 1, self.local_epochs, self.batch_size, self.rounds)
        opts = _ModelOpts(min(self.n_groups, len(shards)), self.linkage, "weights", self.init_scale)
        seed = np.random.SeedSequence(self.random_state)
        self.trainer_ = self._trainer(shards, self.layout_, cfg, opts, seed)
        return shards

    def fit(self, X, y, client):
        """Train for ``rounds`` global rounds; ``client`` maps every sample to its UE."""
        self._setup(X, y, client)
        for _ in range(self.rounds):
            self.trainer_.step(None)
        return self

    def partial_fit(self, X, y, client, assignment=None):
        """One more global round (fits from scratch on the first call)."""
        if not hasattr(self, "trainer_"):
            self._setup(X, y, client)
        self.trainer_.step(assignment)
        return self

    def predict(self, X):
        """Predict with the regional (global) model."""
        check_is_fitted(self, "trainer_")
        X = check_array(X)
        return self.classes_[predict_labels(ModelParams(self.trainer_.regional, self.layout_), X)]

    def predict_personal(self, X, client):
        """Predict each sample with its UE's personal model."""
        check_is_fitted(self, "trainer_")
        X = check_array(X)
        client = np.asarray(client)
        pos = np.searchsorted(self.clients_, client)
        if np.any(pos >= len(self.clients_)) or np.any(self.clients_[np.minimum(pos, len(self.clients_) - 1)] != client):
            raise ValueError("unknown client id")
        out = np.empty(X.shape[0], dtype=int)
        for k in np.unique(pos):
            rows = pos == k
            out[rows] = predict_labels(ModelParams(self.trainer_.personal[k], self.layout_), X[rows])
        return self.classes_[out]


class DemLearnClassifier(_FederatedClassifier):
    """Hierarchical personalised learning with model-distance regrouping."""

    _trainer = DemLearnTrainer

    def __init__(self, n_groups=3, eta=20.0, learning_rate=0.1, local_epochs=10, batch_size=16, rounds=30,
                 linkage="average", model="logistic", hidden=32, init_scale=0.01, random_state=None):
        self.n_groups = n_groups
        self.eta = eta
        self.learning_rate = learning_rate
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.rounds = rounds
        self.linkage = linkage
        self.model = model
        self.hidden = hidden
        self.init_scale = init_scale
        self.random_state = random_state

    @property
    def groups_(self):
        check_is_fitted(self, "trainer_")
        return self.trainer_.tree.groups


class FedAvgClassifier(_FederatedClassifier):
    """Plain federated averaging weighted by client data size."""

    _trainer = FedAvgTrainer
    # fixed by the algorithm, not tunable
    eta = 0.0
    n_groups = 1
    linkage = "average"

    def __init__(self, learning_rate=0.1, local_epochs=10, batch_size=16, rounds=30, model="logistic", hidden=32,
                 init_scale=0.01, random_state=None):
        self.learning_rate = learning_rate
        self.local_epochs = local_epochs
        self.batch_size = batch_size
        self.rounds = rounds
        self.model = model
        self.hidden = hidden
        self.init_scale = init_scale
        self.random_state = random_state


class SwapMatchingAssociator(BaseEstimator):
    """UE-to-SBS association by swap matching with per-SBS min-max bandwidth split.

    ``fit`` takes a :class:`~edgedem.radio.LinkTable` and a
    :class:`~edgedem.latency.UeComputeProfile`; ``predict`` returns the SBS
    index of each UE (-1 for the virtual node).
    """

    def __init__(self, quota=15, alloc="optimal", global_accuracy=0.01, local_accuracy=0.1, task_constant=1.0,
                 local_constant=1.0):
        self.quota = quota
        self.alloc = alloc
        self.global_accuracy = global_accuracy
        self.local_accuracy = local_accuracy
        self.task_constant = task_constant
        self.local_constant = local_constant

    def fit(self, links, profile):
        budget = LearningBudget(self.global_accuracy, self.local_accuracy, self.task_constant, self.local_constant)
        self.game_ = AssociationGame(links, profile, budget, self.quota, alloc=self.alloc)
        self.matching_, _, self.stats_ = run_matching(self.game_)
        assoc = self.game_.association(self.matching_)
        self.assignment_ = assoc.assignment
        self.beta_ = assoc.beta
        self.system_delay_ = self.game_.system_delay(self.matching_)
        return self

    def predict(self, links=None, profile=None):
        check_is_fitted(self, "assignment_")
        return self.assignment_.copy()
