import math

import numpy as np
import pytest

from csfm import tensor as T
from csfm.errors import ConfigError, ContractError, DataError, VocabularyError
from csfm.heads import (
    QA_CANDIDATES,
    ClassifyHead,
    DenseHead,
    LogisticProbe,
    QAItem,
    ScalarHead,
    TaskObjective,
    TaskSpec,
    attach_head,
    evaluate,
    extract_embedding,
    fraction_subset,
    finetune_transfer,
    logistic_probe,
    predict,
    qa_predict,
    rhythm_qa_items,
    sbp_dbp,
    task_examples,
)
from csfm.model import CSFM, loss_grad_check, micro_config, prepare_example, save_checkpoint, toy_record
from csfm.signals import ChannelKind, SignalRecord, SyntheticConfig, synth_multichannel
from csfm.training import TrainConfig

II, V5, PPG, ABP = ChannelKind.II, ChannelKind.V5, ChannelKind.PPG, ChannelKind.ABP


def micro_records(n=6, kinds=(II, V5, ABP), length=40):
    out = []
    for i in range(n):
        rec = toy_record(i, length=length, kinds=kinds)
        rec.labels.update(condition="AF" if i % 2 else "NORMAL", value=float(i))
        out.append(rec)
    return out


# ---------------------------------------------------------------- specs


def test_task_spec_invariants():
    with pytest.raises(ConfigError):
        TaskSpec("x", "CLASSIFY", (II,), n_classes=1)
    with pytest.raises(ConfigError):
        TaskSpec("x", "QA", (II,), n_candidates=1)
    with pytest.raises(ConfigError):
        TaskSpec("x", "CLASSIFY", ())
    spec = TaskSpec("abp", "DENSE_REGRESS", ("PPG", "II"), target_kinds=("ABP",))
    assert spec.channel_subset == (II, PPG)
    assert TaskSpec.from_dict(spec.to_dict()) == spec
    with pytest.raises(ConfigError):
        TaskSpec.from_dict({**spec.to_dict(), "extra": 1})


# ---------------------------------------------------------------- degenerate heads


def test_zero_classify_head_gives_log_n_loss():
    cfg = micro_config()
    for n in (2, 3, 5):
        model = CSFM(cfg, seed=0)
        task = TaskSpec("c", "CLASSIFY", (II, V5), n_classes=n, label_key="value", class_names=())
        recs = micro_records(n)
        for r, c in zip(recs, range(n)):
            r.labels["value"] = c
        exs = task_examples(recs, task, cfg)
        head = attach_head(model, task)
        head.params["w"].data[:] = 0
        loss = TaskObjective().loss(model, exs, None).item()
        assert loss == pytest.approx(math.log(n), rel=1e-6)


def test_zero_scalar_head_predicts_zero():
    cfg = micro_config()
    model = CSFM(cfg)
    model.head = ScalarHead(cfg.d_model)
    model.head.params["w"].data[:] = 0
    exs = [prepare_example(r, cfg) for r in micro_records(3)]
    assert all(float(v) == 0.0 for v in predict(model, exs))


def test_zero_dense_head_outputs_offset():
    cfg = micro_config()
    model = CSFM(cfg)
    model.head = DenseHead(cfg.d_model, cfg.patch_len, (ABP,), target_mean=[90.0], target_std=[15.0])
    for p in model.head.params.values():
        p.data[:] = 0
    out = predict(model, [prepare_example(micro_records(1)[0], cfg)])[0]
    assert out.shape == (1, 40)
    np.testing.assert_array_equal(out, 90.0)


def test_dense_output_length_over_50_geometries():
    rng = np.random.default_rng(0)
    kinds = list(ChannelKind)[:14]
    for draw in range(50):
        P = int(rng.choice([4, 6, 9, 10, 12, 25, 50]))
        n_time = int(rng.integers(1, 5))
        L = P * n_time + int(rng.integers(0, P))
        chans = [kinds[i] for i in rng.choice(14, size=int(rng.integers(1, 4)), replace=False)]
        cfg = micro_config(patch_len=P, max_time_patches=8)
        model = CSFM(cfg, seed=draw)
        model.head = DenseHead(cfg.d_model, P, (ABP,), seed=draw)
        rec = SignalRecord("g", 100.0, {k: rng.normal(size=L) for k in chans})
        out = predict(model, [prepare_example(rec, cfg)])[0]
        assert out.shape == (1, n_time * P)


def test_pooled_heads_invariant_to_storage_order():
    cfg = micro_config()
    model = CSFM(cfg, seed=1)
    model.head = ClassifyHead(cfg.d_model, 3, seed=1)
    rec = micro_records(1)[0]
    flipped = SignalRecord(rec.record_id, 100.0, dict(reversed(list(rec.channels.items()))), rec.report)
    a = predict(model, [prepare_example(rec, cfg)])[0]
    b = predict(model, [prepare_example(flipped, cfg)])[0]
    assert a.tobytes() == b.tobytes()
    assert extract_embedding(model, rec).tobytes() == extract_embedding(model, flipped).tobytes()


def test_extract_embedding_shape_and_determinism():
    model = CSFM(micro_config(), seed=0)
    rec = micro_records(1)[0]
    e = extract_embedding(model, rec)
    assert e.shape == (8,) and e.tobytes() == extract_embedding(model, rec).tobytes()
    with pytest.raises(VocabularyError):
        extract_embedding(CSFM(micro_config(channel_vocab=("I", "TEXT"))), rec)


# ---------------------------------------------------------------- gradient checks


@pytest.mark.parametrize("kind", ["CLASSIFY", "MULTILABEL", "SCALAR_REGRESS", "DENSE_REGRESS", "QA"])
def test_head_gradients_on_micro_config(kind):
    cfg = micro_config()
    recs = micro_records(3)
    with T.precision(np.float64):
        model = CSFM(cfg, seed=0)
        if kind == "CLASSIFY":
            task = TaskSpec("c", "CLASSIFY", (II, V5))
        elif kind == "MULTILABEL":
            for r in recs:
                r.labels["codes"] = ["NORMAL", "AF"] if r.record_id else ["AF"]
            task = TaskSpec("m", "CLASSIFY", (II, V5), multilabel=True, label_key="codes")
        elif kind == "SCALAR_REGRESS":
            task = TaskSpec("s", "SCALAR_REGRESS", (II,), label_key="value")
        elif kind == "DENSE_REGRESS":
            task = TaskSpec("d", "DENSE_REGRESS", (II, V5), target_kinds=(ABP,))
        else:
            task = TaskSpec("q", "QA", (II,), n_candidates=len(QA_CANDIDATES))
        for i, r in enumerate(recs):
            r.record_id = f"r{i}"
        items = rhythm_qa_items(recs) if kind == "QA" else None
        exs = task_examples(recs, task, cfg, items)
        attach_head(model, task, seed=0, train_examples=exs)
        model.astype(np.float64)
        err = loss_grad_check(model, lambda: TaskObjective().loss(model, exs, None))
    assert err < 1e-4


# ---------------------------------------------------------------- blood pressure


def test_sbp_dbp():
    assert sbp_dbp([80, 120, 70, 110]) == (120, 70)
    assert sbp_dbp(np.full(5, 100.0)) == (100, 100)
    with pytest.raises(ContractError):
        sbp_dbp([])
    rng = np.random.default_rng(0)
    for _ in range(100):
        w = rng.normal(size=int(rng.integers(1, 50)))
        s, d = sbp_dbp(w)
        assert d <= w.mean() <= s


def test_sbp_dbp_matches_generator_labels():
    for seed in range(10):
        rec = synth_multichannel(SyntheticConfig(rng_seed=seed), kinds=(ABP,))
        assert sbp_dbp(rec.channels[ABP]) == (rec.labels["SBP_true"], rec.labels["DBP_true"])


# ---------------------------------------------------------------- QA


def test_qa_predictions_subset_of_valid_over_10k_draws():
    rng = np.random.default_rng(0)
    logits = rng.normal(0, 5, size=(10_000, len(QA_CANDIDATES)))
    valid = rng.random((10_000, len(QA_CANDIDATES))) < 0.5
    valid[np.arange(10_000), rng.integers(0, len(QA_CANDIDATES), 10_000)] = True
    pred = qa_predict(logits, valid)
    assert not np.any(pred & ~valid)


def test_qa_large_logits_recover_gold_equal_valid():
    valid = np.array([[1, 1, 0, 0, 0]], dtype=bool)
    assert (qa_predict(np.full((1, 5), 50.0), valid) == valid).all()
    with pytest.raises(ContractError):
        qa_predict(np.zeros((1, 5)), np.zeros((1, 5), dtype=bool))


def test_qa_items():
    recs = micro_records(2)
    items = rhythm_qa_items(recs)
    assert len(items) == 6
    for item in items:
        assert set(item.gold) <= set(item.valid_candidates) <= set(QA_CANDIDATES)
        assert QAItem.from_json(item.to_json()) == item
    with pytest.raises(ContractError):
        QAItem("q", ("yes",), ("no",), "r")
    with pytest.raises(ContractError):
        QAItem("q", (), (), "r")


# ---------------------------------------------------------------- probe


def test_probe_separable_1d():
    X = np.r_[np.linspace(-3, -1, 10), np.linspace(1, 3, 10)][:, None]
    y = np.r_[np.zeros(10), np.ones(10)]
    _, values = logistic_probe(X, y)
    assert values["accuracy"] == 1.0 and values["auc"] == 1.0


def test_probe_identical_embeddings_gives_half():
    X = np.ones((10, 4))
    y = np.r_[np.zeros(5), np.ones(5)]
    _, values = logistic_probe(X, y)
    assert values["auc"] == 0.5


def test_probe_permutation_null():
    rng = np.random.default_rng(0)
    aucs = []
    for seed in range(20):
        X = rng.normal(size=(200, 8))
        y = rng.permutation(np.r_[np.zeros(100), np.ones(100)])
        _, values = logistic_probe(X[:100], y[:100], X[100:], y[100:], seed=seed)
        aucs.append(values["auc"])
    assert abs(np.mean(aucs) - 0.5) < 0.1


def test_probe_errors_and_determinism():
    with pytest.raises(DataError):
        LogisticProbe().fit(np.zeros((4, 2)), [1, 1, 1, 1])
    with pytest.raises(DataError):
        LogisticProbe().fit(np.zeros((3, 2)), [0, 0, 1])
    X = np.random.default_rng(1).normal(size=(30, 3))
    y = X[:, 0] > 0
    a, b = LogisticProbe().fit(X, y), LogisticProbe().fit(X, y)
    assert a.coef_.tobytes() == b.coef_.tobytes()


# ---------------------------------------------------------------- transfer


def test_fraction_subsets_nest():
    for seed in range(5):
        full, half, tenth = (set(fraction_subset(100, f, seed).tolist()) for f in (1.0, 0.5, 0.1))
        assert tenth <= half <= full and len(full) == 100 and len(tenth) == 10
    with pytest.raises(DataError):
        fraction_subset(10, 0.1, 0)
    with pytest.raises(ConfigError):
        fraction_subset(10, 1.5, 0)


def test_finetune_transfer_from_checkpoint(tmp_path):
    cfg = micro_config()
    base = CSFM(cfg, seed=0)
    save_checkpoint(base, tmp_path / "m.ckpt")
    recs = micro_records(6, kinds=(II, V5))
    task = TaskSpec("c", "CLASSIFY", (II,))
    res = finetune_transfer(tmp_path / "m.ckpt", task, recs, 1.0, TrainConfig(lr=1e-2, n_steps=6, warmup_steps=0, batch_size=6),
                            seed=1, eval_records=recs)
    assert len(res.loss_curve) == 6 and sorted(res.train_ids) == sorted(r.record_id for r in recs)
    assert set(res.metrics.values) >= {"macro_f1", "accuracy"}
    assert res.metrics.config["pretrained"] is True
    # the source checkpoint object is never modified
    res2 = finetune_transfer(base, task, recs, 1.0, TrainConfig(lr=1e-2, n_steps=3, warmup_steps=0), seed=1)
    assert base.head is None and res2.model is not base
    with pytest.raises(VocabularyError):
        finetune_transfer(CSFM(micro_config(channel_vocab=("V5", "TEXT"))), task, recs)


def test_scalar_head_learns_constant_target():
    cfg = micro_config()
    recs = micro_records(4)
    for r in recs:
        r.labels["value"] = 3.0
    task = TaskSpec("s", "SCALAR_REGRESS", (II,), label_key="value")
    res = finetune_transfer(None, task, recs, 1.0, TrainConfig(lr=3e-2, n_steps=500, warmup_steps=0, batch_size=4),
                            model_config=cfg, eval_records=recs)
    assert res.loss_curve[-1] < 1e-4
    assert res.metrics.values["mae"] < 1e-2


def test_evaluate_dense_reports_pressures():
    cfg = micro_config()
    recs = micro_records(3)
    task = TaskSpec("d", "DENSE_REGRESS", (II,), target_kinds=(ABP,))
    model = CSFM(cfg)
    exs = task_examples(recs, task, cfg)
    attach_head(model, task, train_examples=exs)
    values = evaluate(model, task, exs).values
    assert {"mae", "rmse", "sbp_mae", "dbp_mae"} <= set(values)


def test_dense_task_requires_target_channel():
    cfg = micro_config()
    with pytest.raises(VocabularyError):
        task_examples(micro_records(2, kinds=(II,)), TaskSpec("d", "DENSE_REGRESS", (II,), target_kinds=(ABP,)), cfg)
