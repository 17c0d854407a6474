"""Controlled synthetic experiments: time horizons, pretraining ablations, cross-modal generation."""

from __future__ import annotations

import csv
import dataclasses
import enum
import io
from typing import Sequence

import numpy as np

from .errors import ConfigError, DataError
from .heads import (
    HeadType,
    TaskSpec,
    extract_embeddings,
    finetune_transfer,
    logistic_probe,
    predict,
)
from .metrics import MetricReport, f1_breakdown
from .model import CSFM, ModelConfig, config_family, prepare_example
from .signals import (
    ECG_LEADS,
    LEAD_CONFIGS,
    PRETRAIN_KINDS,
    ChannelKind,
    Condition,
    SignalRecord,
    SyntheticConfig,
    subset_channels,
    synth_multichannel,
)
from .tokens import MaskMode
from .training import TrainConfig, pretrain


def paired_wins(a: Sequence[float], b: Sequence[float], strict: bool = False) -> int:
    """Number of paired seeds where ``a`` beats (or, unless strict, ties) ``b``."""
    if len(a) != len(b):
        raise ConfigError("paired comparison needs equally many values per arm")
    return sum((x > y) if strict else (x >= y) for x, y in zip(a, b))


def seed_summary(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"mean": float(v.mean()), "min": float(v.min()), "max": float(v.max()), "n": int(v.size)}


def classification_task(channels: Sequence[ChannelKind] = (ChannelKind.II,), name: str = "rhythm") -> TaskSpec:
    return TaskSpec(name, HeadType.CLASSIFY, tuple(channels))


# ---------------------------------------------------------------- time horizons


def horizon_corpus(n_records: int, seed: int = 0, minutes_before: int = 5, window_s: float = 10.0,
                   kinds: Sequence[ChannelKind] = (ChannelKind.II,), template: SyntheticConfig | None = None) -> list[SignalRecord]:
    """Long records whose AF signature appears only in the final minute.

    Each record ends at its labeled event time; AF records switch to an
    irregular rhythm at a seeded time inside the last minute, at least one
    window before the event.
    """
    template = template or SyntheticConfig()
    duration = 60.0 * minutes_before + 60.0 + window_s
    rng = np.random.default_rng([seed, 31])
    conditions = [Condition.AF] * (n_records // 2) + [Condition.NORMAL] * (n_records - n_records // 2)
    conditions = [conditions[i] for i in rng.permutation(n_records)]
    out = []
    for i, cond in enumerate(conditions):
        onset = duration - float(rng.uniform(window_s, 60.0))
        cfg = template.replace(rng_seed=int(rng.integers(2**31 - 1)), condition=cond, duration_s=duration,
                               af_onset_s=onset if cond is Condition.AF else None, with_report=False)
        rec = synth_multichannel(cfg, kinds=kinds, record_id=f"hz{i:05d}")
        rec.labels["event_time_s"] = duration
        if cond is Condition.AF:
            rec.labels["af_onset_s"] = onset
        out.append(rec)
    return out


def cut_window(record: SignalRecord, end_s: float, window_s: float) -> SignalRecord | None:
    """Window ``[end_s - window_s, end_s)``; None when it leaves the record."""
    fs = record.sample_rate_hz
    stop = int(round(end_s * fs))
    start = stop - int(round(window_s * fs))
    if start < 0 or stop > record.length:
        return None
    channels = {k: v[start:stop] for k, v in record.channels.items()}
    return record.with_channels(channels, report=None)


def horizon_eval(model: CSFM, train_records: Sequence[SignalRecord], test_records: Sequence[SignalRecord],
                 offsets_min: Sequence[float] = (5, 4, 3, 2, 1, 0), window_s: float = 10.0,
                 seed: int = 0) -> dict[float, MetricReport]:
    """Probe AUC for windows ending ``offset`` minutes before each record's event."""
    reports = {}
    for offset in offsets_min:
        arms = {}
        skipped = 0
        for split, records in (("train", train_records), ("test", test_records)):
            windows, labels = [], []
            for rec in records:
                win = cut_window(rec, float(rec.labels["event_time_s"]) - 60.0 * offset, window_s)
                if win is None:
                    skipped += 1
                    continue
                windows.append(win)
                labels.append(int(rec.labels["condition"] == Condition.AF.value))
            if not windows:
                raise DataError(f"no {split} window fits at offset {offset} min")
            ex = [prepare_example(w, model.config, include_text=False) for w in windows]
            arms[split] = (extract_embeddings(model, ex), np.array(labels))
        _, values = logistic_probe(*arms["train"], *arms["test"], seed=seed)
        values["n_skipped"] = float(skipped)
        reports[offset] = MetricReport(values, seed, "test", config={"offset_min": offset, "window_s": window_s})
    return reports


# ---------------------------------------------------------------- pretraining ablation


class Strategy(str, enum.Enum):
    UNIFIED = "UNIFIED"
    LEAD_II_ONLY = "LEAD_II_ONLY"
    SINGLE_SOURCE = "SINGLE_SOURCE"


# synthetic "sources": distinct heart-rate populations and channel sets
_SOURCES = (
    dict(heart_rate_bpm=(50.0, 70.0), kinds=ECG_LEADS),
    dict(heart_rate_bpm=(65.0, 95.0), kinds=(ChannelKind.II, ChannelKind.PPG)),
    dict(heart_rate_bpm=(85.0, 120.0), kinds=PRETRAIN_KINDS),
)


def ablation_corpus(strategy: Strategy | str, n_records: int, seed: int = 0, noise_std: float = 0.02,
                    duration_s: float = 10.0) -> list[SignalRecord]:
    """Pretraining records for one strategy.

    UNIFIED mixes all sources with all their channels, LEAD_II_ONLY keeps
    the same records reduced to lead II, SINGLE_SOURCE draws every record
    from the first source.
    """
    strategy = Strategy(strategy)
    rng = np.random.default_rng([seed, 41])
    out = []
    for i in range(n_records):
        src = _SOURCES[0] if strategy is Strategy.SINGLE_SOURCE else _SOURCES[i % len(_SOURCES)]
        cond = Condition.AF if rng.random() < 0.5 else Condition.NORMAL
        cfg = SyntheticConfig(heart_rate_bpm=src["heart_rate_bpm"], noise_std=noise_std, condition=cond, duration_s=duration_s,
                              rng_seed=int(rng.integers(2**31 - 1)), with_report=False)
        kinds = (ChannelKind.II,) if strategy is Strategy.LEAD_II_ONLY else src["kinds"]
        out.append(synth_multichannel(cfg, kinds=kinds, record_id=f"ab{i:05d}"))
    return out


@dataclasses.dataclass
class AblationRow:
    strategy: str
    lead_config: str
    macro_f1: list[float]

    @property
    def mean(self) -> float:
        return float(np.mean(self.macro_f1))

    @property
    def min(self) -> float:
        return float(np.min(self.macro_f1))


@dataclasses.dataclass
class AblationReport:
    rows: list[AblationRow]
    seeds: list[int]
    pretrain_config: dict
    finetune_config: dict

    def row(self, strategy, lead_config) -> AblationRow:
        for r in self.rows:
            if r.strategy == Strategy(strategy).value and r.lead_config == lead_config:
                return r
        raise KeyError((strategy, lead_config))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["strategy", "lead_config", "mean_macro_f1", "min_macro_f1"] + [f"seed_{s}" for s in self.seeds])
        for r in self.rows:
            writer.writerow([r.strategy, r.lead_config, repr(r.mean), repr(r.min)] + [repr(v) for v in r.macro_f1])
        return buf.getvalue()


def ablation_run(strategies: Sequence[Strategy | str] = tuple(Strategy),
                 lead_configs: Sequence[str] = ("12-lead", "6-lead", "2-lead", "1-lead"),
                 seeds: Sequence[int] = (0, 1, 2, 3, 4),
                 pretrain_config: TrainConfig | dict | None = None,
                 finetune_config: TrainConfig | None = None,
                 model_config: ModelConfig | None = None,
                 n_pretrain: int = 150, downstream_train: Sequence[SignalRecord] = (),
                 downstream_test: Sequence[SignalRecord] = (), fraction: float = 1.0,
                 pretrain_seed: int = 0, pretrain_duration_s: float = 10.0,
                 mask_mode: MaskMode | str = MaskMode.MIXED) -> AblationReport:
    """Pretrain one model per strategy under one budget, then fine-tune each on every lead configuration.

    ``pretrain_config`` may be a mapping from strategy to TrainConfig; all
    entries must then agree on steps, batch size and seed.
    """
    strategies = [Strategy(s) for s in strategies]
    model_config = model_config or config_family("TINY")
    if isinstance(pretrain_config, dict):
        budgets = {Strategy(k): v for k, v in pretrain_config.items()}
        missing = [s.value for s in strategies if s not in budgets]
        if missing:
            raise ConfigError(f"no pretraining budget for {missing}")
    else:
        budgets = {s: pretrain_config or TrainConfig(n_steps=300, lr=1e-3) for s in strategies}
    signature = {(c.n_steps, c.batch_size, c.seed) for s, c in budgets.items() if s in strategies}
    if len(signature) != 1:
        raise ConfigError(f"ablation arms must share one budget, got {sorted(signature)}")
    for name in lead_configs:
        if name not in LEAD_CONFIGS:
            raise ConfigError(f"unknown lead configuration {name!r}")
    if not downstream_train or not downstream_test:
        raise DataError("ablation needs downstream train and test records")
    finetune_config = finetune_config or TrainConfig(n_steps=100, lr=1e-3, warmup_steps=10)
    rows = []
    for strategy in strategies:
        model = CSFM(model_config, seed=pretrain_seed)
        corpus = ablation_corpus(strategy, n_pretrain, seed=pretrain_seed, duration_s=pretrain_duration_s)
        examples = [prepare_example(r, model_config, include_text=False) for r in corpus]
        pretrain(model, examples, budgets[strategy], MaskMode(mask_mode))
        for name in lead_configs:
            task = classification_task(LEAD_CONFIGS[name], name)
            scores = []
            for seed in seeds:
                result = finetune_transfer(model, task, downstream_train, fraction, finetune_config, seed,
                                           eval_records=downstream_test)
                scores.append(result.metrics.values["macro_f1"])
            rows.append(AblationRow(strategy.value, name, scores))
    any_budget = budgets[strategies[0]]
    return AblationReport(rows, list(seeds), any_budget.to_dict(), finetune_config.to_dict())


# ---------------------------------------------------------------- cross-modal generation


class Direction(str, enum.Enum):
    PPG_TO_ECG = "PPG_TO_ECG"
    LEAD1_TO_12LEAD = "LEAD1_TO_12LEAD"


_DIRECTIONS = {
    Direction.PPG_TO_ECG: ((ChannelKind.PPG,), (ChannelKind.II,)),
    Direction.LEAD1_TO_12LEAD: ((ChannelKind.I,), ECG_LEADS),
}


def direction_channels(direction: Direction | str) -> tuple[tuple[ChannelKind, ...], tuple[ChannelKind, ...]]:
    return _DIRECTIONS[Direction(direction)]


def generation_task(direction: Direction | str) -> TaskSpec:
    source, target = direction_channels(direction)
    return TaskSpec(Direction(direction).value.lower(), HeadType.DENSE_REGRESS, source, target_kinds=target)


def generate_records(model: CSFM, records: Sequence[SignalRecord], source: Sequence[ChannelKind]) -> list[SignalRecord]:
    """Records whose channels are the dense head's generated targets."""
    examples = [prepare_example(subset_channels(r, source), model.config, include_text=False) for r in records]
    out = []
    for rec, wave in zip(records, predict(model, examples)):
        channels = {k: wave[i].astype(np.float32) for i, k in enumerate(model.head.target_kinds)}
        out.append(SignalRecord(rec.record_id, rec.sample_rate_hz, channels, None, dict(rec.labels)))
    return out


def _probe_arm(embedder: CSFM, train: Sequence[SignalRecord], test: Sequence[SignalRecord], seed: int) -> dict:
    def features(records):
        ex = [prepare_example(r, embedder.config, include_text=False) for r in records]
        return extract_embeddings(embedder, ex), np.array([int(r.labels["condition"] == Condition.AF.value) for r in records])

    (x_tr, y_tr), (x_te, y_te) = features(train), features(test)
    try:
        probe, values = logistic_probe(x_tr, y_tr, x_te, y_te, seed=seed)
    except DataError:
        # degenerate arm: report chance-level values instead of dropping it
        return {"auc": 0.5, "macro_f1": 0.0, "degenerate": 1.0}
    values["macro_f1"] = f1_breakdown(y_te, probe.predict(x_te), 2).macro
    values["degenerate"] = 0.0
    return values


@dataclasses.dataclass
class CrossModalReport:
    direction: str
    waveform: MetricReport
    arms: dict[str, dict]
    seed: int

    def to_dict(self) -> dict:
        return {"direction": self.direction, "seed": self.seed, "waveform": self.waveform.to_dict(), "arms": self.arms}


def cross_modal_eval(direction: Direction | str, train_records: Sequence[SignalRecord], test_records: Sequence[SignalRecord],
                     checkpoint=None, model_config: ModelConfig | None = None, config: TrainConfig | None = None,
                     seed: int = 0, embedder: CSFM | None = None) -> CrossModalReport:
    """Train a generator for ``direction``, score its waveforms, then run the real/synthetic probe arms.

    Arms: ``real_real`` (control), ``syn_real`` (train on generated, test on
    real) and ``real_syn``. Probe features come from ``embedder`` (default:
    the generator's own backbone).
    """
    direction = Direction(direction)
    source, target = direction_channels(direction)
    for rec in list(train_records) + list(test_records):
        missing = [k.value for k in source + target if k not in rec.channels]
        if missing:
            raise ConfigError(f"direction {direction.value} needs channels {missing} absent from record {rec.record_id!r}")
    task = generation_task(direction)
    if checkpoint is None and model_config is None:
        model_config = config_family("TINY")
    result = finetune_transfer(checkpoint, task, train_records, 1.0, config, seed,
                               eval_records=test_records, model_config=model_config)
    generator = result.model
    embedder = embedder or generator
    real_train = [subset_channels(r, target) for r in train_records]
    real_test = [subset_channels(r, target) for r in test_records]
    syn_train = generate_records(generator, train_records, source)
    syn_test = generate_records(generator, test_records, source)
    arms = {
        "real_real": _probe_arm(embedder, real_train, real_test, seed),
        "syn_real": _probe_arm(embedder, syn_train, real_test, seed),
        "real_syn": _probe_arm(embedder, real_train, syn_test, seed),
    }
    return CrossModalReport(direction.value, result.metrics, arms, seed)
