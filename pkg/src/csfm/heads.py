"""Downstream heads, task adapters, embedding extraction and linear probing."""

from __future__ import annotations

import dataclasses
import enum
import json
import math
from collections import OrderedDict
from typing import Iterable, Sequence

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from . import tensor as T
from .errors import ConfigError, ContractError, DataError, VocabularyError
from .metrics import MetricReport, auc_roc, f1_breakdown, mae, qa_macro_f1, r_squared, rmse
from .model import CSFM, Example, ModelConfig, group_batches, load_checkpoint, prepare_example
from .signals import ChannelKind, SignalRecord, canonical_kinds, subset_channels
from .tensor import Tensor
from .training import TrainConfig, train, weighted_group_loss


class HeadType(str, enum.Enum):
    CLASSIFY = "CLASSIFY"
    SCALAR_REGRESS = "SCALAR_REGRESS"
    DENSE_REGRESS = "DENSE_REGRESS"
    QA = "QA"


@dataclasses.dataclass(frozen=True)
class TaskSpec:
    """Declarative downstream task.

    ``label_key`` names the record label used as target; ``class_names``
    maps label values to class indices for CLASSIFY tasks.
    """

    task_name: str
    head: HeadType
    channel_subset: tuple[ChannelKind, ...]
    n_classes: int = 2
    multilabel: bool = False
    target_kinds: tuple[ChannelKind, ...] = ()
    n_candidates: int = 0
    label_key: str = "condition"
    class_names: tuple[str, ...] = ("NORMAL", "AF")
    loss: str = ""
    metrics: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "head", HeadType(self.head))
        object.__setattr__(self, "channel_subset", canonical_kinds(ChannelKind.parse(k) for k in self.channel_subset))
        object.__setattr__(self, "target_kinds", tuple(ChannelKind.parse(k) for k in self.target_kinds))
        object.__setattr__(self, "class_names", tuple(self.class_names))
        object.__setattr__(self, "metrics", tuple(self.metrics) or _DEFAULT_METRICS[self.head])
        object.__setattr__(self, "loss", self.loss or _DEFAULT_LOSS[(self.head, self.multilabel)])
        if not self.channel_subset:
            raise ConfigError("channel_subset must be non-empty")
        if self.head is HeadType.CLASSIFY and self.n_classes < 2:
            raise ConfigError("CLASSIFY needs n_classes >= 2")
        if self.head is HeadType.QA and self.n_candidates < 2:
            raise ConfigError("QA needs n_candidates >= 2")
        if self.head is HeadType.DENSE_REGRESS and not self.target_kinds:
            raise ConfigError("DENSE_REGRESS needs at least one target kind")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["head"] = self.head.value
        d["channel_subset"] = [k.value for k in self.channel_subset]
        d["target_kinds"] = [k.value for k in self.target_kinds]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "TaskSpec":
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigError(f"unknown task spec keys: {sorted(unknown)}")
        return cls(**d)

    def with_channels(self, kinds: Iterable[ChannelKind]) -> "TaskSpec":
        return dataclasses.replace(self, channel_subset=tuple(kinds))


_DEFAULT_METRICS = {
    HeadType.CLASSIFY: ("macro_f1", "accuracy", "auc"),
    HeadType.SCALAR_REGRESS: ("mae", "rmse", "r2"),
    HeadType.DENSE_REGRESS: ("mae", "rmse"),
    HeadType.QA: ("macro_f1",),
}
_DEFAULT_LOSS = {
    (HeadType.CLASSIFY, False): "cross_entropy",
    (HeadType.CLASSIFY, True): "binary_cross_entropy",
    (HeadType.SCALAR_REGRESS, False): "mse",
    (HeadType.SCALAR_REGRESS, True): "mse",
    (HeadType.DENSE_REGRESS, False): "mse",
    (HeadType.DENSE_REGRESS, True): "mse",
    (HeadType.QA, False): "binary_cross_entropy",
    (HeadType.QA, True): "binary_cross_entropy",
}


# ---------------------------------------------------------------- heads


def _signal_pool(encoded: Tensor, n_signal: int) -> Tensor:
    return T.mean(T.slice_(encoded, (slice(None), slice(0, n_signal))), axis=1)


def _linear_params(d: int, n: int, rng, std: float = 0.02) -> "OrderedDict[str, Tensor]":
    return OrderedDict(w=T.parameter(rng.normal(0.0, std, size=(d, n)), "w"), b=T.parameter(np.zeros(n), "b"))


class ClassifyHead:
    """Mean-pool signal tokens, one linear layer to class logits."""

    def __init__(self, d_model: int, n_classes: int, multilabel: bool = False, seed: int = 0):
        self.n_classes = n_classes
        self.multilabel = multilabel
        self.params = _linear_params(d_model, n_classes, np.random.default_rng([seed, 101]))

    def spec(self) -> dict:
        return {"type": HeadType.CLASSIFY.value, "n_classes": self.n_classes, "multilabel": self.multilabel}

    def forward(self, encoded: Tensor, n_signal: int, group: Sequence[Example]) -> Tensor:
        return T.linear(_signal_pool(encoded, n_signal), self.params["w"], self.params["b"])

    def loss(self, logits: Tensor, group: Sequence[Example]) -> Tensor:
        if self.multilabel:
            y = np.stack([ex.target for ex in group])
            if y.shape != logits.shape:
                raise ContractError(f"multilabel targets {y.shape} do not match {self.n_classes} classes")
            return T.binary_cross_entropy_with_logits(logits, y)
        y = np.array([int(ex.target) for ex in group])
        if y.min() < 0 or y.max() >= self.n_classes:
            raise ContractError(f"class label outside [0, {self.n_classes})")
        return T.cross_entropy_with_logits(logits, y)


class ScalarHead:
    def __init__(self, d_model: int, seed: int = 0):
        self.params = _linear_params(d_model, 1, np.random.default_rng([seed, 102]))

    def spec(self) -> dict:
        return {"type": HeadType.SCALAR_REGRESS.value}

    def forward(self, encoded: Tensor, n_signal: int, group: Sequence[Example]) -> Tensor:
        out = T.linear(_signal_pool(encoded, n_signal), self.params["w"], self.params["b"])
        return T.reshape(out, (out.shape[0],))

    def loss(self, pred: Tensor, group: Sequence[Example]) -> Tensor:
        return T.mse_loss(pred, np.array([float(ex.target) for ex in group]))


def _upsample_factors(patch_len: int) -> tuple[int, int]:
    s1 = max(f for f in range(1, int(math.isqrt(patch_len)) + 1) if patch_len % f == 0)
    return s1, patch_len // s1


class DenseHead:
    """Per-time-index channel average, two transposed convolutions, one refinement conv.

    Output is normalized by per-target training statistics; :meth:`denormalize`
    maps it back to signal units.
    """

    def __init__(self, d_model: int, patch_len: int, target_kinds: Sequence[ChannelKind], seed: int = 0,
                 hidden: tuple[int, int] | None = None, target_mean=None, target_std=None):
        self.patch_len = patch_len
        self.target_kinds = tuple(ChannelKind.parse(k) for k in target_kinds)
        n_out = len(self.target_kinds)
        self.hidden = tuple(hidden or (max(d_model // 2, 8), max(d_model // 4, 8)))
        h1, h2 = self.hidden
        self.strides = _upsample_factors(patch_len)
        k1, k2 = (s + 2 * (s // 2) for s in self.strides)
        rng = np.random.default_rng([seed, 103])

        def w(*shape):
            fan = shape[0] * shape[-1]
            return rng.normal(0.0, 1.0 / math.sqrt(fan), size=shape)

        self.params = OrderedDict(
            [
                ("up1.w", T.parameter(w(d_model, h1, k1), "up1.w")), ("up1.b", T.parameter(np.zeros(h1), "up1.b")),
                ("up2.w", T.parameter(w(h1, h2, k2), "up2.w")), ("up2.b", T.parameter(np.zeros(h2), "up2.b")),
                ("refine.w", T.parameter(w(n_out, h2, 3), "refine.w")), ("refine.b", T.parameter(np.zeros(n_out), "refine.b")),
            ]
        )
        self.target_mean = np.zeros(n_out) if target_mean is None else np.asarray(target_mean, dtype=np.float64)
        self.target_std = np.ones(n_out) if target_std is None else np.asarray(target_std, dtype=np.float64)

    def spec(self) -> dict:
        return {
            "type": HeadType.DENSE_REGRESS.value,
            "target_kinds": [k.value for k in self.target_kinds],
            "hidden": list(self.hidden),
            "target_mean": self.target_mean.tolist(),
            "target_std": self.target_std.tolist(),
        }

    def fit_stats(self, targets: Sequence[np.ndarray]) -> None:
        """Per-target mean/std over training waveforms of shape (n_out, length)."""
        stacked = np.concatenate([np.asarray(t, dtype=np.float64) for t in targets], axis=1)
        self.target_mean = stacked.mean(axis=1)
        self.target_std = np.maximum(stacked.std(axis=1), 1e-6)

    def forward(self, encoded: Tensor, n_signal: int, group: Sequence[Example]) -> Tensor:
        grid = group[0].grid
        B, d = encoded.shape[0], encoded.shape[2]
        sig = T.slice_(encoded, (slice(None), slice(0, n_signal)))
        if n_signal != grid.n_tokens:
            raise ContractError("dense prediction needs every signal token encoded")
        per_time = T.mean(T.reshape(sig, (B, grid.n_channels, grid.n_time_patches, d)), axis=1)
        x = T.transpose(per_time, (0, 2, 1))
        p = self.params
        s1, s2 = self.strides
        x = T.gelu(T.conv1d_transpose(x, p["up1.w"], p["up1.b"], stride=s1, padding=s1 // 2))
        x = T.gelu(T.conv1d_transpose(x, p["up2.w"], p["up2.b"], stride=s2, padding=s2 // 2))
        return T.conv1d(x, p["refine.w"], p["refine.b"], stride=1, padding=1)

    def normalize(self, waveform: np.ndarray) -> np.ndarray:
        return (waveform - self.target_mean[:, None]) / self.target_std[:, None]

    def denormalize(self, output: np.ndarray) -> np.ndarray:
        return output * self.target_std[:, None] + self.target_mean[:, None]

    def loss(self, pred: Tensor, group: Sequence[Example]) -> Tensor:
        target = np.stack([self.normalize(ex.target) for ex in group])
        return T.mse_loss(pred, target)


class QAHead:
    """Mean-pool signal and question tokens, linear layer to global candidate logits."""

    def __init__(self, d_model: int, n_candidates: int, seed: int = 0):
        self.n_candidates = n_candidates
        self.params = _linear_params(d_model, n_candidates, np.random.default_rng([seed, 104]))

    def spec(self) -> dict:
        return {"type": HeadType.QA.value, "n_candidates": self.n_candidates}

    def forward(self, encoded: Tensor, n_signal: int, group: Sequence[Example]) -> Tensor:
        return T.linear(T.mean(encoded, axis=1), self.params["w"], self.params["b"])

    def loss(self, logits: Tensor, group: Sequence[Example]) -> Tensor:
        gold = np.stack([ex.target for ex in group])
        valid = np.stack([ex.target_mask for ex in group])
        return T.binary_cross_entropy_with_logits(logits, gold, weight=valid)


def head_from_spec(spec: dict, config: ModelConfig, seed: int = 0):
    kind = HeadType(spec["type"])
    d = config.d_model
    if kind is HeadType.CLASSIFY:
        return ClassifyHead(d, spec["n_classes"], spec.get("multilabel", False), seed)
    if kind is HeadType.SCALAR_REGRESS:
        return ScalarHead(d, seed)
    if kind is HeadType.DENSE_REGRESS:
        return DenseHead(d, config.patch_len, spec["target_kinds"], seed, spec.get("hidden"),
                         spec.get("target_mean"), spec.get("target_std"))
    return QAHead(d, spec["n_candidates"], seed)


def make_head(task: TaskSpec, config: ModelConfig, seed: int = 0):
    if task.head is HeadType.CLASSIFY:
        return ClassifyHead(config.d_model, task.n_classes, task.multilabel, seed)
    if task.head is HeadType.SCALAR_REGRESS:
        return ScalarHead(config.d_model, seed)
    if task.head is HeadType.DENSE_REGRESS:
        return DenseHead(config.d_model, config.patch_len, task.target_kinds, seed)
    return QAHead(config.d_model, task.n_candidates, seed)


# ---------------------------------------------------------------- functional forms


def head_classify(model: CSFM, encoded: Tensor, n_signal: int, group: Sequence[Example]) -> Tensor:
    return model.head.forward(encoded, n_signal, group)


def sbp_dbp(waveform) -> tuple[float, float]:
    """Systolic (max) and diastolic (min) pressure of a waveform."""
    w = np.asarray(waveform, dtype=np.float64).ravel()
    if w.size == 0:
        raise ContractError("sbp_dbp needs a non-empty waveform")
    return float(w.max()), float(w.min())


def qa_predict(logits, valid_mask) -> np.ndarray:
    """Candidates with sigmoid(logit) > 0.5, restricted to the valid set."""
    logits = np.asarray(logits)
    valid = np.asarray(valid_mask, dtype=bool)
    if not valid.any(axis=-1).all():
        raise ContractError("QA item has no valid candidates")
    return (logits > 0.0) & valid


# ---------------------------------------------------------------- QA items

QA_CANDIDATES = ("yes", "no", "sinus rhythm", "atrial fibrillation", "not sure")
QA_QUESTIONS = {
    "is the rhythm regular?": ("yes", "no"),
    "what is the rhythm?": ("sinus rhythm", "atrial fibrillation"),
    "is a p wave present?": ("yes", "no"),
}


@dataclasses.dataclass(frozen=True)
class QAItem:
    question: str
    valid_candidates: tuple[str, ...]
    gold: tuple[str, ...]
    record_id: str

    def __post_init__(self):
        if not self.valid_candidates:
            raise ContractError("QA item needs at least one valid candidate")
        if not set(self.gold) <= set(self.valid_candidates):
            raise ContractError("gold answers must be a subset of valid candidates")

    def to_json(self) -> str:
        return json.dumps({"question": self.question, "valid_candidates": list(self.valid_candidates),
                           "gold": list(self.gold), "record_id": self.record_id}, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "QAItem":
        d = json.loads(line)
        return cls(d["question"], tuple(d["valid_candidates"]), tuple(d["gold"]), d["record_id"])


def rhythm_qa_items(records: Sequence[SignalRecord]) -> list[QAItem]:
    """One item per (record, question) for the synthetic rhythm questions."""
    items = []
    for rec in records:
        normal = rec.labels.get("condition") == "NORMAL"
        for question, valid in QA_QUESTIONS.items():
            if question == "what is the rhythm?":
                gold = ("sinus rhythm",) if normal else ("atrial fibrillation",)
            else:
                gold = ("yes",) if normal else ("no",)
            items.append(QAItem(question, valid, gold, rec.record_id))
    return items


def _indicator(names: Iterable[str], candidates: Sequence[str]) -> np.ndarray:
    index = {c: i for i, c in enumerate(candidates)}
    out = np.zeros(len(candidates), dtype=np.float64)
    for n in names:
        if n not in index:
            raise ContractError(f"candidate {n!r} is not in the global candidate list")
        out[index[n]] = 1.0
    return out


# ---------------------------------------------------------------- task examples


def task_examples(records: Sequence[SignalRecord], task: TaskSpec, config: ModelConfig,
                  qa_items: Sequence[QAItem] | None = None, candidates: Sequence[str] = QA_CANDIDATES) -> list[Example]:
    """Tokenize records for ``task``: inputs restricted to the task channels, reports dropped."""
    if task.head is HeadType.QA:
        by_id = {r.record_id: r for r in records}
        out = []
        for item in qa_items or ():
            rec = subset_channels(by_id[item.record_id], task.channel_subset)
            ex = prepare_example(rec, config, include_text=False, report=item.question)
            ex.target = _indicator(item.gold, candidates)
            ex.target_mask = _indicator(item.valid_candidates, candidates)
            ex.labels["question"] = item.question
            out.append(ex)
        return out
    out = []
    for rec in records:
        ex = prepare_example(subset_channels(rec, task.channel_subset), config, include_text=False)
        if task.head is HeadType.CLASSIFY:
            value = rec.labels[task.label_key]
            if task.multilabel:
                ex.target = _indicator(value, task.class_names)
            else:
                ex.target = np.array(task.class_names.index(value) if value in task.class_names else int(value))
        elif task.head is HeadType.SCALAR_REGRESS:
            ex.target = np.array(float(rec.labels[task.label_key]))
        else:
            missing = [k.value for k in task.target_kinds if k not in rec.channels]
            if missing:
                raise VocabularyError(f"record {rec.record_id!r} lacks target channel(s) {missing}")
            n = ex.grid.n_time_patches * ex.grid.patch_len
            ex.target = np.stack([rec.channels[k][:n].astype(np.float64) for k in task.target_kinds])
        out.append(ex)
    return out


@dataclasses.dataclass
class TaskObjective:
    def loss(self, model: CSFM, batch: Sequence[Example], rng) -> Tensor:
        def group_loss(group):
            encoded, n_sig = model.encode_batch(group)
            return model.head.loss(model.head.forward(encoded, n_sig, group), group)

        return weighted_group_loss(batch, group_loss)


def predict(model: CSFM, examples: Sequence[Example], batch_size: int = 64) -> list[np.ndarray]:
    """Raw head outputs per example (denormalized for dense heads), input order."""
    if model.head is None:
        raise ContractError("model has no head attached")
    position = {id(ex): i for i, ex in enumerate(examples)}
    out: list[np.ndarray | None] = [None] * len(examples)
    for start in range(0, len(examples), batch_size):
        for group in group_batches(examples[start:start + batch_size]):
            encoded, n_sig = model.encode_batch(group)
            values = model.head.forward(encoded, n_sig, group).data
            for ex, v in zip(group, values):
                if isinstance(model.head, DenseHead):
                    v = model.head.denormalize(v.astype(np.float64))
                out[position[id(ex)]] = np.array(v)
    return out


def extract_embeddings(model: CSFM, examples: Sequence[Example], batch_size: int = 64) -> np.ndarray:
    """(n, d_model) mean of non-text encoder outputs, input order."""
    position = {id(ex): i for i, ex in enumerate(examples)}
    out = np.zeros((len(examples), model.config.d_model), dtype=np.float64)
    for start in range(0, len(examples), batch_size):
        for group in group_batches(examples[start:start + batch_size]):
            encoded, n_sig = model.encode_batch(group)
            pooled = encoded.data[:, :n_sig].mean(axis=1)
            for ex, v in zip(group, pooled):
                out[position[id(ex)]] = v
    return out


def extract_embedding(model: CSFM, record: SignalRecord, include_text: bool = True) -> np.ndarray:
    ex = prepare_example(record, model.config, include_text=include_text)
    return extract_embeddings(model, [ex])[0]


# ---------------------------------------------------------------- evaluation


def evaluate(model: CSFM, task: TaskSpec, examples: Sequence[Example], seed: int | None = None, split: str = "test") -> MetricReport:
    outputs = predict(model, examples)
    if task.head is HeadType.CLASSIFY and not task.multilabel:
        logits = np.stack(outputs)
        y = np.array([int(ex.target) for ex in examples])
        pred = logits.argmax(axis=1)
        f1 = f1_breakdown(y, pred, task.n_classes)
        values = {"macro_f1": f1.macro, "accuracy": float(np.mean(pred == y))}
        roc = None
        if task.n_classes == 2 and len(set(y.tolist())) == 2:
            score = logits[:, 1] - logits[:, 0]
            values["auc"] = auc_roc(score, y)
        return MetricReport(values, seed, split, per_class_f1={"f1": f1.per_class, "undefined": f1.undefined}, roc=roc)
    if task.head is HeadType.CLASSIFY:
        logits = np.stack(outputs)
        y = np.stack([ex.target for ex in examples])
        f1 = f1_breakdown(y, logits > 0)
        return MetricReport({"macro_f1": f1.macro}, seed, split, per_class_f1={"f1": f1.per_class, "undefined": f1.undefined})
    if task.head is HeadType.SCALAR_REGRESS:
        pred = np.array([float(o) for o in outputs])
        y = np.array([float(ex.target) for ex in examples])
        values = {"mae": mae(y, pred), "rmse": rmse(y, pred)}
        if y.size > 1 and y.var() > 0:
            values["r2"] = r_squared(y, pred)
        return MetricReport(values, seed, split)
    if task.head is HeadType.DENSE_REGRESS:
        pred = np.concatenate([o.ravel() for o in outputs])
        y = np.concatenate([ex.target.ravel() for ex in examples])
        values = {"mae": mae(y, pred), "rmse": rmse(y, pred)}
        if task.target_kinds == (ChannelKind.ABP,):
            est = np.array([sbp_dbp(o) for o in outputs])
            true = np.array([sbp_dbp(ex.target) for ex in examples])
            values.update(sbp_mae=mae(true[:, 0], est[:, 0]), dbp_mae=mae(true[:, 1], est[:, 1]))
        return MetricReport(values, seed, split)
    logits = np.stack(outputs)
    valid = np.stack([ex.target_mask for ex in examples])
    gold = np.stack([ex.target for ex in examples])
    pred = qa_predict(logits, valid)
    questions = [ex.labels["question"] for ex in examples]
    valid_idx = [np.flatnonzero(v) for v in valid]
    return MetricReport({"macro_f1": qa_macro_f1(questions, valid_idx, gold, pred)}, seed, split)


# ---------------------------------------------------------------- fine-tuning


def fraction_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """Seeded shuffle prefix; smaller fractions are prefixes of larger ones."""
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"fraction must lie in (0, 1], got {fraction}")
    k = int(math.floor(fraction * n + 1e-9))
    if k < 2:
        raise DataError(f"fraction {fraction} of {n} records leaves fewer than 2 examples")
    return np.random.default_rng([seed, 23]).permutation(n)[:k]


@dataclasses.dataclass
class FinetuneResult:
    model: CSFM
    metrics: MetricReport | None
    loss_curve: list[float]
    train_ids: list[str]


def attach_head(model: CSFM, task: TaskSpec, seed: int = 0, train_examples: Sequence[Example] | None = None):
    head = make_head(task, model.config, seed)
    if isinstance(head, DenseHead) and train_examples:
        head.fit_stats([ex.target for ex in train_examples])
    model.head = head
    return head


def finetune_transfer(checkpoint, task: TaskSpec, train_records: Sequence[SignalRecord], fraction: float = 1.0,
                      config: TrainConfig | None = None, seed: int = 0, eval_records: Sequence[SignalRecord] | None = None,
                      qa_items: Sequence[QAItem] | None = None, eval_qa_items: Sequence[QAItem] | None = None,
                      model_config: ModelConfig | None = None) -> FinetuneResult:
    """Fine-tune end to end on a seeded fraction of ``train_records``.

    ``checkpoint`` is a path, a :class:`CSFM` (copied, not modified) or None
    for a randomly initialized backbone of ``model_config``.
    """
    if checkpoint is None:
        if model_config is None:
            raise ConfigError("random initialization needs model_config")
        model = CSFM(model_config, seed=seed)
    elif isinstance(checkpoint, CSFM):
        model = CSFM(checkpoint.config, seed=checkpoint.seed,
                     params=OrderedDict((k, T.parameter(v.data.copy(), k)) for k, v in checkpoint.params.items()))
    else:
        model = load_checkpoint(checkpoint)
    missing = [k.value for k in task.channel_subset if k not in model.config.channel_vocab]
    if missing:
        raise VocabularyError(f"task channels {missing} are not in the checkpoint vocabulary")
    subset = fraction_subset(len(train_records), fraction, seed)
    chosen = [train_records[i] for i in subset]
    if task.head is HeadType.QA:
        keep = {r.record_id for r in chosen}
        train_ex = task_examples(chosen, task, model.config, [q for q in (qa_items or ()) if q.record_id in keep])
    else:
        train_ex = task_examples(chosen, task, model.config)
    attach_head(model, task, seed, train_ex)
    config = (config or TrainConfig()).replace(seed=seed)
    params = [p for name, p in model.named_parameters().items() if not name.startswith(("dec.", "mask_token"))]
    result = train(model, TaskObjective(), train_ex, config, params=params)
    report = None
    if eval_records is not None:
        eval_ex = task_examples(eval_records, task, model.config, eval_qa_items)
        report = evaluate(model, task, eval_ex, seed=seed)
        report.config = {"task": task.to_dict(), "train": config.to_dict(), "fraction": fraction,
                         "pretrained": checkpoint is not None}
    return FinetuneResult(model, report, result.loss_curve, [r.record_id for r in chosen])


# ---------------------------------------------------------------- linear probe


class LogisticProbe(ClassifierMixin, BaseEstimator):
    """L2-regularized binary logistic regression fit by full-batch gradient descent.

    Features are standardized with training statistics. Iteration stops when
    the loss changes by less than ``tol`` or after ``max_iter`` steps.
    """

    def __init__(self, alpha: float = 1e-3, max_iter: int = 10_000, tol: float = 1e-8, seed: int = 0):
        self.alpha = alpha
        self.max_iter = max_iter
        self.tol = tol
        self.seed = seed

    def fit(self, X, y):
        X = np.asarray(X, dtype=np.float64)
        y = np.asarray(y)
        classes = np.unique(y)
        if classes.size != 2:
            raise DataError(f"logistic probe needs exactly two classes, got {classes.size}")
        if min(np.sum(y == c) for c in classes) < 2:
            raise DataError("logistic probe needs at least two examples per class")
        self.classes_ = classes
        target = (y == classes[1]).astype(np.float64)
        self.mean_ = X.mean(axis=0)
        self.scale_ = np.maximum(X.std(axis=0), 1e-12)
        Z = (X - self.mean_) / self.scale_
        n, d = Z.shape
        # step size from the Lipschitz constant of the regularized loss
        lip = 0.25 * (np.linalg.norm(Z, 2) ** 2) / n + self.alpha
        step = 1.0 / max(lip, 1e-12)
        w = np.zeros(d)
        b = 0.0
        previous = math.inf
        self.n_iter_ = self.max_iter
        for it in range(self.max_iter):
            z = Z @ w + b
            loss = float(np.mean(np.logaddexp(0.0, z) - target * z) + 0.5 * self.alpha * w @ w)
            if abs(previous - loss) < self.tol:
                self.n_iter_ = it
                break
            previous = loss
            r = 1.0 / (1.0 + np.exp(-z)) - target
            w -= step * (Z.T @ r / n + self.alpha * w)
            b -= step * float(r.mean())
        self.coef_ = w
        self.intercept_ = b
        return self

    def decision_function(self, X) -> np.ndarray:
        Z = (np.asarray(X, dtype=np.float64) - self.mean_) / self.scale_
        return Z @ self.coef_ + self.intercept_

    def predict_proba(self, X) -> np.ndarray:
        p = 1.0 / (1.0 + np.exp(-self.decision_function(X)))
        return np.column_stack([1.0 - p, p])

    def predict(self, X) -> np.ndarray:
        return self.classes_[(self.decision_function(X) > 0).astype(int)]


def logistic_probe(embeddings, labels, eval_embeddings=None, eval_labels=None, seed: int = 0, alpha: float = 1e-3):
    """Fit a probe; report accuracy and AUC on the eval set (training set if omitted)."""
    probe = LogisticProbe(alpha=alpha, seed=seed).fit(embeddings, labels)
    X = embeddings if eval_embeddings is None else eval_embeddings
    y = np.asarray(labels if eval_labels is None else eval_labels)
    scores = probe.decision_function(X)
    positive = y == probe.classes_[1]
    values = {"accuracy": float(np.mean(probe.predict(X) == y))}
    values["auc"] = auc_roc(scores, positive)
    return probe, values
