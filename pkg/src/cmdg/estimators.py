"""scikit-learn style wrappers around the training loops.

Both estimators take the domain of every row as an extra ``fit`` argument,
and optionally the object id of every row (needed for perfect matches).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y, column_or_1d

from . import matchstore
from .datagen import MultiDomainDataset, split
from .netcore import forward
from .trainer import (
    TrainConfig,
    train_erm,
    train_matchdg_phase1,
    train_matchdg_phase2,
    train_perfmatch,
    train_randmatch,
)

CLASSIFIER_MODES = ("erm", "randmatch", "perfmatch", "matchdg")


def _dataset(X, y, domains, object_ids):
    """Group rows by domain; returns the dataset, encoded classes and row maps."""
    X, y = check_X_y(X, y)
    domains = column_or_1d(domains)
    if len(domains) != len(y):
        raise ValueError(f"domains has {len(domains)} entries for {len(y)} rows")
    if object_ids is None:
        object_ids = np.full(len(y), -1)
    else:
        object_ids = column_or_1d(object_ids).astype(int)
        if len(object_ids) != len(y):
            raise ValueError(f"object_ids has {len(object_ids)} entries for {len(y)} rows")
        if object_ids.min() < 0:
            raise ValueError("object ids must be >= 0")
    classes, y_enc = np.unique(y, return_inverse=True)
    if len(classes) < 2:
        raise ValueError("need at least two classes")
    names = np.unique(domains)
    rows = [np.flatnonzero(domains == n) for n in names]
    ds = MultiDomainDataset(
        x=[X[r] for r in rows],
        y=[y_enc[r] for r in rows],
        object_ids=[object_ids[r] for r in rows],
        domain_names=[str(n) for n in names],
        num_classes=len(classes),
    )
    return ds, classes, rows


def _split_train(ds: MultiDomainDataset, val_fraction: float, seed: int):
    if val_fraction == 0:
        return ds, None
    train, val, _ = split(ds, ds.domain_names, [], val_fraction, seed)
    return train, val


class MatchingClassifier(ClassifierMixin, BaseEstimator):
    """Classifier trained with cross-entropy plus a cross-domain match penalty.

    ``mode`` picks the matches: ``"erm"`` (no penalty), ``"randmatch"``
    (random same-class pairs), ``"perfmatch"`` (same object, needs
    ``object_ids``) or ``"matchdg"`` (matches learned by a contrastive phase
    configured through ``phase1_params``).
    """

    def __init__(
        self,
        mode: str = "matchdg",
        lam: float = 1.0,
        epochs: int = 30,
        batch_rows: int = 16,
        hidden: tuple[int, ...] = (64, 64),
        bottleneck: int | None = None,
        learning_rate: float = 0.01,
        weight_decay: float = 5e-4,
        momentum: float = 0.9,
        standardize: bool = True,
        val_fraction: float = 0.2,
        phase1_params: dict | None = None,
        random_state: int = 0,
    ):
        self.mode = mode
        self.lam = lam
        self.epochs = epochs
        self.batch_rows = batch_rows
        self.hidden = hidden
        self.bottleneck = bottleneck
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.standardize = standardize
        self.val_fraction = val_fraction
        self.phase1_params = phase1_params
        self.random_state = random_state

    def _train_config(self, mode: str) -> TrainConfig:
        return TrainConfig(
            mode=mode,
            epochs=self.epochs,
            batch_rows=self.batch_rows,
            lam=self.lam,
            hidden=tuple(self.hidden),
            bottleneck=self.bottleneck,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            standardize=self.standardize,
            seed=int(self.random_state),
        )

    def fit(self, X, y, domains, object_ids=None):
        if self.mode not in CLASSIFIER_MODES:
            raise ValueError(f"mode must be one of {CLASSIFIER_MODES}, got {self.mode!r}")
        if self.mode == "perfmatch" and object_ids is None:
            raise ValueError("perfmatch needs object_ids")
        ds, self.classes_, _ = _dataset(X, y, domains, object_ids)
        self.n_features_in_ = ds.input_dim
        self.domain_names_ = list(ds.domain_names)
        seed = int(self.random_state)
        train, val = _split_train(ds, self.val_fraction, seed)

        self.phase1_ = None
        if self.mode == "erm":
            report = train_erm(train, self._train_config("erm"), val)
        elif self.mode == "randmatch":
            report = train_randmatch(train, self._train_config("randmatch"), val)
        elif self.mode == "perfmatch":
            report = train_perfmatch(train, self._train_config("perfmatch"), val)
        else:
            p1cfg = TrainConfig(**{"early_stop_metric": None, **(self.phase1_params or {}), "mode": "matchdg_phase1", "seed": seed})
            self.phase1_ = train_matchdg_phase1(train, p1cfg, val)
            report = train_matchdg_phase2(train, self.phase1_, self._train_config("matchdg_phase2"), val)
        self.train_report_ = report
        self.net_ = report.net
        self.matches_ = report.matches
        return self

    def _outputs(self, X):
        check_is_fitted(self, "net_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward(self.net_, X, record=False)

    def decision_function(self, X) -> np.ndarray:
        return self._outputs(X)[1]

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        return self.classes_[np.argmax(self.decision_function(X), axis=1)]

    def transform(self, X) -> np.ndarray:
        """Representation-layer output."""
        return self._outputs(X)[0]


class ContrastiveMatcher(TransformerMixin, BaseEstimator):
    """Contrastive representation learner that infers cross-domain matches.

    After ``fit``, ``matches_`` holds the inferred :class:`MatchMatrix`
    (per-domain indices) and ``match_rows_`` the same matches as row indices
    into the ``X`` passed to ``fit``, one column per entry of
    ``domain_names_``.
    """

    def __init__(
        self,
        epochs: int = 30,
        batch_rows: int = 16,
        tau: float = 0.05,
        refresh_period: int = 5,
        hidden: tuple[int, ...] = (64, 64),
        repr_dim: int = 32,
        learning_rate: float = 0.01,
        weight_decay: float = 5e-4,
        momentum: float = 0.9,
        standardize: bool = True,
        random_state: int = 0,
    ):
        self.epochs = epochs
        self.batch_rows = batch_rows
        self.tau = tau
        self.refresh_period = refresh_period
        self.hidden = hidden
        self.repr_dim = repr_dim
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.momentum = momentum
        self.standardize = standardize
        self.random_state = random_state

    def fit(self, X, y, domains, object_ids=None):
        ds, self.classes_, rows = _dataset(X, y, domains, object_ids)
        self.n_features_in_ = ds.input_dim
        self.domain_names_ = list(ds.domain_names)
        cfg = TrainConfig(
            mode="matchdg_phase1",
            epochs=self.epochs,
            batch_rows=self.batch_rows,
            tau=self.tau,
            refresh_period=self.refresh_period,
            hidden=tuple(self.hidden),
            repr_dim=self.repr_dim,
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            momentum=self.momentum,
            standardize=self.standardize,
            early_stop_metric=None,
            seed=int(self.random_state),
        )
        res = train_matchdg_phase1(ds, cfg)
        self.net_ = res.net
        self.report_ = res.report
        self.matches_ = res.matches
        self.match_rows_ = np.stack([rows[d][res.matches.entries[:, d]] for d in range(ds.num_domains)], axis=1)
        self.overlap_ = None
        if ds.has_objects():
            from .metrics import overlap

            self.overlap_ = overlap(res.matches, matchstore.perfect_matches(ds))
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return forward(self.net_, X, record=False)[0]
