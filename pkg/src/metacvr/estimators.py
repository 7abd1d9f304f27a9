"""scikit-learn style wrappers around the training functions.

The estimators take :class:`~metacvr.featurespace.Dataset` objects as ``X``;
labels default to the dataset's purchase column. They follow the usual
conventions: constructor arguments are stored untouched, learned state ends
in an underscore, and ``get_params``/``set_params``/``clone`` work.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import evalreport as ev
from .featurespace import Dataset, FeatureSchema
from .frn import represent, wrap_frozen
from .metric_ensemble import MetricKind, occasion_scores
from .prototypes import PrototypeBank, build_bank
from .tensorcore import const
from .trainer import (ModelCheckpoint, TrainConfig, finetune_base, predict_base, predict_meta,
                      train_base, train_meta)


def check_dataset(X, *, schema: FeatureSchema | None = None, require_labels: bool = False,
                  y=None) -> Dataset:
    """Validate ``X`` (and optional ``y``) and return a dataset carrying the labels."""
    if not isinstance(X, Dataset):
        raise TypeError(f"expected a metacvr Dataset, got {type(X).__name__}")
    if len(X) == 0:
        raise ValueError("dataset is empty")
    if schema is not None and X.schema_digest and X.schema_digest != schema.digest():
        raise ValueError(f"dataset schema {X.schema_digest} does not match {schema.digest()}")
    if y is not None:
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ValueError(f"y has shape {y.shape}, expected ({len(X)},)")
        if not np.isin(y, (0, 1)).all():
            raise ValueError("y must contain only 0 and 1")
        X = X.subset(np.arange(len(X)))
        X.purchase = y.astype(np.int64)
    if require_labels:
        n_pos = int(X.purchase.sum())
        if n_pos == 0 or n_pos == len(X):
            raise ValueError("training data must contain both converted and non-converted clicks")
    return X


def check_base_model(model) -> ModelCheckpoint:
    """Accept a fitted :class:`BaseCVRClassifier` or a stage-1 checkpoint."""
    if isinstance(model, BaseCVRClassifier):
        check_is_fitted(model, "checkpoint_")
        model = model.checkpoint_
    if not isinstance(model, ModelCheckpoint) or model.metadata.get("stage") != "1":
        raise ValueError("base_model must be a fitted BaseCVRClassifier or a stage-1 checkpoint")
    return model


class _CVRClassifier(ClassifierMixin, BaseEstimator):
    def _config(self, **extra) -> TrainConfig:
        kw = {k: getattr(self, k) for k in ("batch_size", "learning_rate", "patience",
                                            "val_fraction", "seed") if hasattr(self, k)}
        kw.update(extra)
        return TrainConfig(**kw)

    def _proba1(self, X) -> np.ndarray:
        raise NotImplementedError

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        p = self._proba1(check_dataset(X))
        return np.column_stack([1.0 - p, p])

    def decision_function(self, X) -> np.ndarray:
        p = np.clip(self.predict_proba(X)[:, 1].astype(np.float64), 1e-12, 1 - 1e-12)
        return np.log(p / (1 - p))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(np.int64)

    def score(self, X, y=None, sample_weight=None) -> float:
        """Validation AUC (not accuracy: at ~1% CVR accuracy is uninformative)."""
        data = check_dataset(X, y=y)
        return ev.auc(self.predict_proba(data)[:, 1], data.purchase)


class BaseCVRClassifier(TransformerMixin, _CVRClassifier):
    """Stage-1 base model; ``transform`` returns the unit representation F(x)."""

    def __init__(self, schema: FeatureSchema | None = None, batch_size: int = 256,
                 learning_rate: float = 0.01, epochs: int = 5, patience: int = 2,
                 val_fraction: float = 0.05, seed: int = 0):
        self.schema = schema
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y=None):
        if self.schema is None:
            raise ValueError("BaseCVRClassifier needs a FeatureSchema")
        data = check_dataset(X, schema=self.schema, y=y, require_labels=True)
        self.checkpoint_ = train_base(data, self.schema, self._config(epochs_base=self.epochs))
        self.classes_ = np.array([0, 1])
        return self

    def _proba1(self, X):
        return predict_base(self.checkpoint_, X)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        return represent(check_dataset(X), self.checkpoint_.model_params())[0]


class FineTunedCVRClassifier(_CVRClassifier):
    """BASE-F: every base parameter fine-tuned on recent data at a reduced rate."""

    def __init__(self, base_model=None, batch_size: int = 256, learning_rate: float = 0.01,
                 lr_scale: float = 0.1, epochs: int = 10, patience: int = 2,
                 val_fraction: float = 0.05, seed: int = 0):
        self.base_model = base_model
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_scale = lr_scale
        self.epochs = epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.seed = seed

    def fit(self, X, y=None):
        stage1 = check_base_model(self.base_model)
        data = check_dataset(X, y=y, require_labels=self.epochs > 0)
        cfg = self._config(epochs_finetune=self.epochs, finetune_lr_scale=self.lr_scale)
        self.checkpoint_ = finetune_base(stage1, data, cfg)
        self.classes_ = np.array([0, 1])
        return self

    def _proba1(self, X):
        return predict_base(self.checkpoint_, X)


class MetaCVRClassifier(TransformerMixin, _CVRClassifier):
    """Stage 2: occasion prototypes, distance metrics and ensemble head over a frozen base.

    ``transform`` returns the ensemble inputs ``[s_b, s_BP, s_DP, s_AP, s_NP]``.
    """

    def __init__(self, base_model=None, metric_kind: str = "spdm", batch_size: int = 256,
                 learning_rate: float = 0.01, epochs: int = 10, patience: int = 2,
                 val_fraction: float = 0.05, support_cap: int = 50_000, seed: int = 0):
        self.base_model = base_model
        self.metric_kind = metric_kind
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.patience = patience
        self.val_fraction = val_fraction
        self.support_cap = support_cap
        self.seed = seed

    def fit(self, X, y=None, bank: PrototypeBank | None = None):
        stage1 = check_base_model(self.base_model)
        kind = MetricKind(self.metric_kind)
        data = check_dataset(X, y=y, require_labels=True)
        if bank is None:
            bank = build_bank(data, stage1.model_params(), cap=self.support_cap, seed=self.seed,
                              checkpoint_id=stage1.checkpoint_id())
        cfg = self._config(epochs_meta=self.epochs, metric_kind=kind.value)
        self.checkpoint_ = train_meta(stage1, data, bank, cfg)
        self.bank_ = bank
        self.classes_ = np.array([0, 1])
        return self

    def _proba1(self, X):
        return predict_meta(self.checkpoint_, X)

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "checkpoint_")
        ckpt = self.checkpoint_
        reps, s_b = represent(check_dataset(X), ckpt.model_params())
        P = wrap_frozen(ckpt.section("dmn/", "epn/"))
        s = occasion_scores(const(reps), self.bank_, P, MetricKind(ckpt.metadata["metric_kind"])).value
        return np.column_stack([s_b, s])
