"""scikit-learn estimator that trains a linear classifier in an open FL system."""

from __future__ import annotations

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.multiclass import type_of_target
from sklearn.utils.validation import check_is_fitted, validate_data

from .objectives import Dataset, ObjectiveKind, certify_constants
from .opensys import (
    ChurnConfig,
    LocalConfig,
    Schedule,
    SelectionConfig,
    run_experiment,
)


class OpenFederatedClassifier(ClassifierMixin, BaseEstimator):
    """L2-regularised logistic regression trained by federated averaging with churn.

    The rows of ``X`` are shuffled and dealt into ``n_clients`` shards. The
    first ``n_initial_clients`` shards form the starting population; the
    rest are the pool new clients are drawn from. Each round runs
    ``local_steps`` local updates followed by an averaging step, and clients
    leave/join with probability ``p``.

    Parameters
    ----------
    lam : float
        L2 regularisation strength; also the strong-convexity constant.
    optimizer : {"sgd", "adam"}
        Local update rule.
    eta, beta1, beta2, epsilon : float
        Local optimizer hyperparameters (the betas and epsilon are Adam only).
    n_clients, n_initial_clients : int
        Pool size and starting population.
    p : float
        Per-event probability of one departure and of one arrival.
    n_rounds, local_steps, batch_size : int
        Protocol schedule and minibatch size (0 means full batch).
    q : float
        Bernoulli selection probability for each eligible client.
    churn_timing : str
        ``"PerCommunicationRound"`` or ``"PerIteration"``.
    random_state : int or None
        Seed for shuffling, minibatches and churn.

    Attributes
    ----------
    coef_ : ndarray of shape (n_features,)
        Final broadcast model.
    classes_ : ndarray of shape (2,)
    history_ : RunRecord
        Per-round iterate norm, global loss and churn log.
    """

    def __init__(self, lam=0.01, optimizer="sgd", eta=1.0, beta1=0.9, beta2=0.999, epsilon=1e-3,
                 n_clients=20, n_initial_clients=10, p=0.0, n_rounds=50, local_steps=5,
                 batch_size=1, q=1.0, churn_timing="PerCommunicationRound",
                 reset_moments_on_broadcast=False, random_state=None):
        self.lam = lam
        self.optimizer = optimizer
        self.eta = eta
        self.beta1 = beta1
        self.beta2 = beta2
        self.epsilon = epsilon
        self.n_clients = n_clients
        self.n_initial_clients = n_initial_clients
        self.p = p
        self.n_rounds = n_rounds
        self.local_steps = local_steps
        self.batch_size = batch_size
        self.q = q
        self.churn_timing = churn_timing
        self.reset_moments_on_broadcast = reset_moments_on_broadcast
        self.random_state = random_state

    def __sklearn_tags__(self):
        tags = super().__sklearn_tags__()
        tags.classifier_tags.multi_class = False
        return tags

    def fit(self, X, y):
        X, y = validate_data(self, X, y, dtype=np.float64)
        y_type = type_of_target(y, input_name="y", raise_unknown=True)
        if y_type != "binary":
            raise ValueError(f"Only binary classification is supported. The type of the target is {y_type}.")
        self.classes_ = np.unique(y)
        if self.classes_.size != 2:
            raise ValueError("y has only one class; need two classes for binary classification.")
        if not 1 <= self.n_initial_clients <= self.n_clients:
            raise ValueError("need 1 <= n_initial_clients <= n_clients")
        if X.shape[0] < self.n_clients:
            raise ValueError(f"need at least n_clients={self.n_clients} samples, got {X.shape[0]}")
        labels = np.where(y == self.classes_[1], 1.0, -1.0)

        seed_seq = np.random.SeedSequence(self.random_state)
        rng = np.random.default_rng(seed_seq)
        order = rng.permutation(X.shape[0])
        shards = np.array_split(order, self.n_clients)
        # batch_size 0 (or larger than the smallest shard) uses exact full-batch gradients
        batch = self.batch_size if self.batch_size <= min(len(s) for s in shards) else 0
        objectives = [
            certify_constants(Dataset(X[idx], labels[idx]), self.lam,
                              ObjectiveKind.REGULARIZED_LOGISTIC, solve_optimum=False)
            for idx in shards
        ]
        local = LocalConfig(self.optimizer, self.eta, self.beta1, self.beta2, self.epsilon, batch,
                            self.reset_moments_on_broadcast)
        churn = ChurnConfig.symmetric(self.p, churn_timing=self.churn_timing)
        self.history_ = run_experiment(
            objectives[: self.n_initial_clients], objectives[self.n_initial_clients:], local,
            Schedule(self.local_steps, self.n_rounds), SelectionConfig(q=self.q), churn, rng,
        )
        self.coef_ = np.asarray(self.history_.final_model, dtype=float)
        return self

    def decision_function(self, X):
        check_is_fitted(self, "coef_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return X @ self.coef_

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[(scores > 0).astype(int)]

    def predict_proba(self, X):
        pos = expit(self.decision_function(X))
        return np.column_stack([1.0 - pos, pos])
