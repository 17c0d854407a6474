"""scikit-learn style wrappers around pretraining, fine-tuning and dense generation.

Inputs ``X`` are sequences of :class:`~csfm.signals.SignalRecord`; every
estimator follows the usual ``fit`` / ``predict`` / ``transform`` and
``get_params`` / ``set_params`` conventions.
"""

from __future__ import annotations

from collections import OrderedDict
import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from . import tensor as T
from .errors import ContractError, DataError
from .heads import (
    ClassifyHead,
    DenseHead,
    LogisticProbe,
    ScalarHead,
    TaskObjective,
    extract_embeddings,
    predict as head_predict,
)
from .model import CSFM, ModelConfig, config_family, load_checkpoint, prepare_example
from .signals import ChannelKind, SignalRecord, parse_channel_list, subset_channels
from .tokens import MaskMode
from .training import TrainConfig, pretrain, train

__all__ = [
    "CSFMPretrainer",
    "CSFMClassifier",
    "CSFMRegressor",
    "WaveformRegressor",
    "LogisticProbe",
    "check_records",
    "check_channels",
]


def check_records(X, min_records: int = 1) -> list[SignalRecord]:
    """Validate a sequence of records and return it as a list."""
    if isinstance(X, SignalRecord):
        raise ContractError("expected a sequence of SignalRecord, got a single record")
    records = list(X)
    if len(records) < min_records:
        raise DataError(f"need at least {min_records} record(s), got {len(records)}")
    for r in records:
        if not isinstance(r, SignalRecord):
            raise ContractError(f"expected SignalRecord, got {type(r).__name__}")
    return records


def check_channels(channels) -> tuple[ChannelKind, ...] | None:
    """None, a comma-separated string, or an iterable of kinds or names."""
    if channels is None:
        return None
    if isinstance(channels, str):
        return parse_channel_list(channels)
    return tuple(ChannelKind.parse(c) for c in channels)


def check_targets(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape[0] != n:
        raise ContractError(f"{n} records but {y.shape[0]} targets")
    return y


def _backbone(checkpoint, model_size: str, seed: int) -> CSFM:
    if checkpoint is None:
        return CSFM(config_family(model_size), seed=seed)
    source = checkpoint if isinstance(checkpoint, CSFM) else load_checkpoint(checkpoint)
    params = OrderedDict((k, T.parameter(v.data.copy(), k)) for k, v in source.params.items())
    return CSFM(source.config, seed=source.seed, params=params)


class _TrainedBase(BaseEstimator):
    def _train_config(self) -> TrainConfig:
        return TrainConfig(lr=self.lr, n_steps=self.n_steps, batch_size=self.batch_size,
                           warmup_steps=min(self.warmup_steps, self.n_steps), seed=self.seed)

    def _examples(self, X, config: ModelConfig):
        kinds = check_channels(self.channels)
        records = [subset_channels(r, kinds) if kinds else r for r in X]
        return [prepare_example(r, config, include_text=False) for r in records]

    def _fit_head(self, X, targets, head) -> None:
        model = _backbone(self.checkpoint, self.model_size, self.seed)
        examples = self._examples(X, model.config)
        for ex, t in zip(examples, targets):
            ex.target = t
        if isinstance(head, type):
            raise TypeError("head must be an instance")
        if isinstance(head, DenseHead):
            head.fit_stats([ex.target for ex in examples])
        model.head = head
        params = [p for name, p in model.named_parameters().items() if not name.startswith(("dec.", "mask_token"))]
        self.loss_curve_ = train(model, TaskObjective(), examples, self._train_config(), params=params).loss_curve
        self.model_ = model

    def _outputs(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "model_")
        X = check_records(X)
        return head_predict(self.model_, self._examples(X, self.model_.config))


class CSFMPretrainer(TransformerMixin, BaseEstimator):
    """Masked-autoencoding pretraining; ``transform`` returns pooled embeddings."""

    def __init__(self, model_size: str = "TINY", n_steps: int = 1000, lr: float = 1e-3, batch_size: int = 16,
                 warmup_steps: int = 50, mask_mode: str = "MIXED", mask_ratio: float = 0.75, seed: int = 0,
                 include_text: bool = True):
        self.model_size = model_size
        self.n_steps = n_steps
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.mask_mode = mask_mode
        self.mask_ratio = mask_ratio
        self.seed = seed
        self.include_text = include_text

    def fit(self, X, y=None):
        X = check_records(X)
        model = CSFM(config_family(self.model_size), seed=self.seed)
        examples = [prepare_example(r, model.config, include_text=self.include_text) for r in X]
        config = TrainConfig(lr=self.lr, n_steps=self.n_steps, batch_size=self.batch_size,
                             warmup_steps=min(self.warmup_steps, self.n_steps), seed=self.seed)
        self.loss_curve_ = pretrain(model, examples, config, MaskMode(self.mask_mode), self.mask_ratio).loss_curve
        self.model_ = model
        return self

    def transform(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        X = check_records(X)
        return extract_embeddings(self.model_, [prepare_example(r, self.model_.config, include_text=False) for r in X])


class CSFMClassifier(ClassifierMixin, _TrainedBase):
    """Fine-tuned classifier over record labels ``y`` (any hashable class values)."""

    def __init__(self, checkpoint=None, channels=None, model_size: str = "TINY", n_steps: int = 200, lr: float = 1e-3,
                 batch_size: int = 16, warmup_steps: int = 20, seed: int = 0):
        self.checkpoint = checkpoint
        self.channels = channels
        self.model_size = model_size
        self.n_steps = n_steps
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.seed = seed

    def fit(self, X, y):
        X = check_records(X, min_records=2)
        y = check_targets(y, len(X))
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise DataError("classifier needs at least two classes")
        d = _backbone(self.checkpoint, self.model_size, self.seed).config.d_model
        self._fit_head(X, [np.array(c) for c in encoded], ClassifyHead(d, self.classes_.size, seed=self.seed))
        return self

    def decision_function(self, X) -> np.ndarray:
        return np.stack(self._outputs(X))

    def predict_proba(self, X) -> np.ndarray:
        z = self.decision_function(X).astype(np.float64)
        z = np.exp(z - z.max(axis=1, keepdims=True))
        return z / z.sum(axis=1, keepdims=True)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.decision_function(X).argmax(axis=1)]


class CSFMRegressor(RegressorMixin, _TrainedBase):
    """Fine-tuned scalar regressor."""

    def __init__(self, checkpoint=None, channels=None, model_size: str = "TINY", n_steps: int = 200, lr: float = 1e-3,
                 batch_size: int = 16, warmup_steps: int = 20, seed: int = 0):
        self.checkpoint = checkpoint
        self.channels = channels
        self.model_size = model_size
        self.n_steps = n_steps
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.seed = seed

    def fit(self, X, y):
        X = check_records(X, min_records=2)
        y = check_targets(y, len(X)).astype(np.float64)
        self.y_mean_, self.y_scale_ = float(y.mean()), float(max(y.std(), 1e-6))
        d = _backbone(self.checkpoint, self.model_size, self.seed).config.d_model
        self._fit_head(X, [np.array((v - self.y_mean_) / self.y_scale_) for v in y], ScalarHead(d, seed=self.seed))
        return self

    def predict(self, X) -> np.ndarray:
        return np.array([float(o) for o in self._outputs(X)]) * self.y_scale_ + self.y_mean_


class WaveformRegressor(_TrainedBase):
    """Dense waveform generation from ``channels`` to ``target_channels``."""

    def __init__(self, target_channels="ABP", checkpoint=None, channels=None, model_size: str = "TINY",
                 n_steps: int = 500, lr: float = 1e-3, batch_size: int = 16, warmup_steps: int = 50, seed: int = 0):
        self.target_channels = target_channels
        self.checkpoint = checkpoint
        self.channels = channels
        self.model_size = model_size
        self.n_steps = n_steps
        self.lr = lr
        self.batch_size = batch_size
        self.warmup_steps = warmup_steps
        self.seed = seed

    def fit(self, X, y=None):
        X = check_records(X, min_records=2)
        targets = check_channels(self.target_channels)
        config = _backbone(self.checkpoint, self.model_size, self.seed).config
        waves = []
        for r in X:
            n = (r.length // config.patch_len) * config.patch_len
            missing = [k.value for k in targets if k not in r.channels]
            if missing:
                raise DataError(f"record {r.record_id!r} lacks target channel(s) {missing}")
            waves.append(np.stack([r.channels[k][:n].astype(np.float64) for k in targets]))
        self._fit_head(X, waves, DenseHead(config.d_model, config.patch_len, targets, seed=self.seed))
        return self

    def predict(self, X) -> list[np.ndarray]:
        return self._outputs(X)

    def score(self, X, y=None) -> float:
        """Negative waveform MAE over all target samples."""
        X = check_records(X)
        pred = self.predict(X)
        errors = [np.abs(p - np.stack([r.channels[k][: p.shape[1]] for k in self.model_.head.target_kinds])).ravel()
                  for p, r in zip(pred, X)]
        return -float(np.mean(np.concatenate(errors)))
