import numpy as np
import pytest

from csfm.errors import ConfigError, DataError
from csfm.experiments import (
    AblationReport,
    Direction,
    Strategy,
    ablation_corpus,
    ablation_run,
    cross_modal_eval,
    cut_window,
    direction_channels,
    horizon_corpus,
    horizon_eval,
    paired_wins,
    seed_summary,
)
from csfm.model import CSFM, config_family
from csfm.signals import ECG_LEADS, ChannelKind, Condition, SyntheticConfig, synth_multichannel
from csfm.training import TrainConfig

SMALL = config_family("TINY", d_model=16, n_layers_enc=1, n_layers_dec=1, n_heads=2, text_buckets=32)
QUICK = TrainConfig(n_steps=2, lr=1e-3, warmup_steps=0, batch_size=4)


def labeled(n, kinds, duration=2.0, seed=0):
    return [synth_multichannel(SyntheticConfig(rng_seed=seed + i, condition=Condition.AF if i % 2 else Condition.NORMAL,
                                               duration_s=duration), kinds=kinds) for i in range(n)]


def test_paired_wins_and_summary():
    assert paired_wins([1, 2, 3], [1, 1, 4]) == 2
    assert paired_wins([1, 2, 3], [1, 1, 4], strict=True) == 1
    with pytest.raises(ConfigError):
        paired_wins([1], [1, 2])
    assert seed_summary([1.0, 3.0]) == {"mean": 2.0, "min": 1.0, "max": 3.0, "n": 2}


# ---------------------------------------------------------------- horizons


def test_horizon_corpus_plants_signature_in_last_minute():
    recs = horizon_corpus(6, seed=1, minutes_before=1, window_s=5.0)
    assert sum(r.labels["condition"] == "AF" for r in recs) == 3
    for r in recs:
        assert r.labels["event_time_s"] == 60.0 + 60.0 + 5.0
        if r.labels["condition"] == "AF":
            assert r.labels["event_time_s"] - 60.0 <= r.labels["af_onset_s"] <= r.labels["event_time_s"] - 5.0


def test_cut_window_bounds_and_determinism():
    rec = horizon_corpus(2, seed=0, minutes_before=1, window_s=5.0)[0]
    win = cut_window(rec, 10.0, 5.0)
    assert win.length == 500
    np.testing.assert_array_equal(win.channels[ChannelKind.II], rec.channels[ChannelKind.II][500:1000])
    assert cut_window(rec, 3.0, 5.0) is None
    assert cut_window(rec, rec.labels["event_time_s"] + 1.0, 5.0) is None
    assert cut_window(rec, 10.0, 5.0).equals(win)


def test_horizon_eval_reports_each_offset_and_skips():
    recs = horizon_corpus(8, seed=2, minutes_before=1, window_s=5.0)
    model = CSFM(SMALL, seed=0)
    reports = horizon_eval(model, recs[:4] + recs[4:], recs, offsets_min=(1, 0), window_s=5.0)
    assert set(reports) == {1, 0}
    for rep in reports.values():
        assert 0.0 <= rep.values["auc"] <= 1.0 and rep.values["n_skipped"] == 0.0
    with pytest.raises(DataError):
        horizon_eval(model, recs, recs, offsets_min=(3,), window_s=5.0)


# ---------------------------------------------------------------- ablation


def test_ablation_corpora():
    unified = ablation_corpus("UNIFIED", 6, seed=0)
    lead2 = ablation_corpus("LEAD_II_ONLY", 6, seed=0)
    single = ablation_corpus("SINGLE_SOURCE", 6, seed=0)
    assert {len(r.channels) for r in unified} == {12, 2, 13}
    assert all(r.kinds == (ChannelKind.II,) for r in lead2)
    for a, b in zip(unified, lead2):
        assert a.channels[ChannelKind.II].tobytes() == b.channels[ChannelKind.II].tobytes()
    assert all(len(r.channels) == 12 and 50 <= r.labels["heart_rate_bpm"] <= 70 for r in single)


def test_ablation_grid_has_twelve_rows():
    train = labeled(6, ECG_LEADS, duration=10.0)
    test = labeled(4, ECG_LEADS, duration=10.0, seed=100)
    report = ablation_run(seeds=(0,), pretrain_config=QUICK, finetune_config=QUICK, model_config=SMALL,
                          n_pretrain=4, downstream_train=train, downstream_test=test)
    assert isinstance(report, AblationReport)
    assert len(report.rows) == 12
    assert {(r.strategy, r.lead_config) for r in report.rows} == {
        (s.value, c) for s in Strategy for c in ("12-lead", "6-lead", "2-lead", "1-lead")}
    csv_text = report.to_csv()
    assert csv_text.count("\n") == 13
    assert report.row("UNIFIED", "12-lead").macro_f1[0] == report.row(Strategy.UNIFIED, "12-lead").mean


def test_ablation_rejects_budget_mismatch():
    budgets = {"UNIFIED": QUICK, "LEAD_II_ONLY": QUICK.replace(n_steps=3), "SINGLE_SOURCE": QUICK}
    with pytest.raises(ConfigError):
        ablation_run(pretrain_config=budgets, model_config=SMALL, downstream_train=labeled(2, ECG_LEADS),
                     downstream_test=labeled(2, ECG_LEADS))
    with pytest.raises(ConfigError):
        ablation_run(lead_configs=("3-lead",), pretrain_config=QUICK, model_config=SMALL,
                     downstream_train=labeled(2, ECG_LEADS), downstream_test=labeled(2, ECG_LEADS))


# ---------------------------------------------------------------- cross-modal


def test_direction_channels():
    assert direction_channels("PPG_TO_ECG") == ((ChannelKind.PPG,), (ChannelKind.II,))
    assert direction_channels(Direction.LEAD1_TO_12LEAD)[1] == ECG_LEADS


def test_cross_modal_reports_all_arms():
    train = labeled(6, (ChannelKind.II, ChannelKind.PPG))
    test = labeled(4, (ChannelKind.II, ChannelKind.PPG), seed=50)
    rep = cross_modal_eval("PPG_TO_ECG", train, test, model_config=SMALL, config=QUICK)
    assert set(rep.arms) == {"real_real", "syn_real", "real_syn"}
    assert {"mae", "rmse"} <= set(rep.waveform.values)
    for arm in rep.arms.values():
        assert {"auc", "macro_f1", "degenerate"} <= set(arm)
    assert rep.to_dict()["direction"] == "PPG_TO_ECG"


def test_cross_modal_generated_length_matches_source():
    from csfm.experiments import generate_records
    from csfm.heads import DenseHead

    model = CSFM(SMALL, seed=0)
    model.head = DenseHead(SMALL.d_model, SMALL.patch_len, (ChannelKind.II,))
    recs = labeled(2, (ChannelKind.PPG,))
    out = generate_records(model, recs, (ChannelKind.PPG,))
    assert [r.length for r in out] == [r.length for r in recs]


def test_cross_modal_missing_channels():
    with pytest.raises(ConfigError):
        cross_modal_eval("LEAD1_TO_12LEAD", labeled(4, (ChannelKind.I,)), labeled(2, (ChannelKind.I,)), model_config=SMALL)
