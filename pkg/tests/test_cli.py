import json
import subprocess
import sys

import pytest

from csfm.cli import EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC, main


def write_json(path, data):
    path.write_text(json.dumps(data))
    return path


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = write_json(root / "synth.json", {"synthetic": {"duration_s": 2.0}, "kinds": ["II", "V5", "PPG", "ABP"]})
    assert main(["synth", "--config", str(cfg), "--n", "12", "--seed", "3", "--out", str(root / "s")]) == 0
    return root, root / "s" / "corpus"


def test_synth_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert main(["synth", "--n", "10", "--seed", "7", "--out", str(tmp_path / name)]) == 0
    files = sorted(p.name for p in (tmp_path / "a" / "corpus").iterdir())
    assert len(files) == 11
    for f in files:
        assert (tmp_path / "a" / "corpus" / f).read_bytes() == (tmp_path / "b" / "corpus" / f).read_bytes()
    manifest = json.loads((tmp_path / "a" / "run_manifest.json").read_text())
    assert manifest["command"] == "synth" and manifest["seed"] == 7
    assert set(manifest) >= {"config", "outputs", "hashes", "started_at", "finished_at", "inputs"}


def test_bad_channel_token_exits_1_naming_it(tmp_path, capsys):
    assert main(["embed", "--channels", "II,V9", "--out", str(tmp_path)]) == EXIT_CONFIG
    assert "V9" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert main(["bogus"]) == EXIT_CONFIG
    assert main(["synth", "--unknown-flag"]) == EXIT_CONFIG
    assert "usage" in capsys.readouterr().err


def test_config_errors_exit_1(tmp_path):
    assert main(["pretrain", "--out", str(tmp_path)]) == EXIT_CONFIG
    bad = write_json(tmp_path / "bad.json", {"not_a_key": 1})
    assert main(["pretrain", "--config", str(bad), "--out", str(tmp_path)]) == EXIT_CONFIG
    (tmp_path / "broken.json").write_text("{")
    assert main(["synth", "--config", str(tmp_path / "broken.json"), "--out", str(tmp_path)]) == EXIT_CONFIG
    assert main(["synth", "--config", str(tmp_path / "missing.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_corrupt_record_exits_2(tmp_path, corpus):
    _, corpus_dir = corpus
    import shutil

    copy = tmp_path / "corpus"
    shutil.copytree(corpus_dir, copy)
    victim = sorted(copy.glob("*.cwb"))[0]
    victim.write_bytes(victim.read_bytes()[:-8])
    assert main(["pretrain", "--corpus", str(copy), "--n", "1", "--out", str(tmp_path / "o")]) == EXIT_DATA


def test_gradcheck_command(tmp_path, capsys):
    assert main(["gradcheck", "--out", str(tmp_path)]) == 0
    report = json.loads((tmp_path / "gradcheck.json").read_text())
    assert report["max_relative_error"] < 1e-4
    assert "max relative error" in capsys.readouterr().out


def test_numeric_failure_exits_3(tmp_path, monkeypatch):
    import csfm.cli as cli

    monkeypatch.setattr(cli, "model_grad_check", lambda seed=0: 1.0)
    assert main(["gradcheck", "--out", str(tmp_path)]) == EXIT_NUMERIC


def test_pipeline(tmp_path, corpus):
    root, corpus_dir = corpus
    small = {"size": "TINY", "d_model": 16, "n_layers_enc": 1, "n_layers_dec": 1, "n_heads": 2}
    pre_cfg = write_json(tmp_path / "pre.json", {"model": small, "train": {"warmup_steps": 0, "batch_size": 4}})
    assert main(["pretrain", "--config", str(pre_cfg), "--corpus", str(corpus_dir), "--n", "2", "--out", str(tmp_path / "pre")]) == 0
    ckpt = tmp_path / "pre" / "checkpoint.ckpt"
    assert ckpt.exists() and (tmp_path / "pre" / "loss_curve.csv").read_text().count("\n") == 3

    ft = ["finetune", "--checkpoint", str(ckpt), "--corpus", str(corpus_dir), "--n", "2", "--channels", "II,V5,PPG"]
    assert main(ft + ["--out", str(tmp_path / "ft")]) == 0
    metrics = json.loads((tmp_path / "ft" / "metrics.json").read_text())
    assert set(metrics["values"]) >= {"macro_f1", "accuracy"}
    assert metrics["config"]["task"]["channel_subset"] == ["II", "V5", "PPG"]

    assert main(["eval", "--checkpoint", str(tmp_path / "ft" / "finetuned.ckpt"), "--corpus", str(corpus_dir),
                 "--channels", "II,V5", "--out", str(tmp_path / "ev")]) == 0
    ev = json.loads((tmp_path / "ev" / "metrics.json").read_text())
    assert ev["config"]["task"]["channel_subset"] == ["II", "V5"]

    assert main(["embed", "--checkpoint", str(ckpt), "--corpus", str(corpus_dir), "--out", str(tmp_path / "em")]) == 0
    rows = (tmp_path / "em" / "embeddings.csv").read_text().splitlines()
    assert rows[0].startswith("record_id,condition,e0") and len(rows[0].split(",")) == 18

    dense = write_json(tmp_path / "dense.json", {"task": {"task_name": "abp", "head": "DENSE_REGRESS",
                                                          "channel_subset": ["II", "PPG"], "target_kinds": ["ABP"]},
                                                 "train": {"warmup_steps": 0, "batch_size": 4}})
    assert main(["finetune", "--config", str(dense), "--checkpoint", str(ckpt), "--corpus", str(corpus_dir), "--n", "2",
                 "--out", str(tmp_path / "dn")]) == 0
    assert main(["reconstruct", "--checkpoint", str(tmp_path / "dn" / "finetuned.ckpt"), "--corpus", str(corpus_dir),
                 "--channels", "II,PPG", "--out", str(tmp_path / "rc")]) == 0
    assert len(list((tmp_path / "rc" / "generated").glob("*.cwb"))) >= 1
    assert "mae" in json.loads((tmp_path / "rc" / "metrics.json").read_text())

    assert main(["reconstruct", "--checkpoint", str(ckpt), "--corpus", str(corpus_dir), "--out", str(tmp_path / "x")]) == EXIT_CONFIG


def test_pretrain_is_reproducible(tmp_path, corpus):
    _, corpus_dir = corpus
    cfg = write_json(tmp_path / "c.json", {"model": {"size": "TINY", "d_model": 16, "n_layers_enc": 1, "n_layers_dec": 1,
                                                     "n_heads": 2}, "train": {"warmup_steps": 0}})
    for name in ("a", "b"):
        assert main(["pretrain", "--config", str(cfg), "--corpus", str(corpus_dir), "--n", "2", "--out", str(tmp_path / name)]) == 0
    for f in ("checkpoint.ckpt", "loss_curve.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()


def test_ablate_command(tmp_path):
    cfg = write_json(tmp_path / "ab.json", {"n_downstream": 10, "n_pretrain": 3, "seeds": [0], "lead_configs": ["1-lead"],
                                            "strategies": ["UNIFIED", "LEAD_II_ONLY"], "duration_s": 4.0, "mask_mode": "TEMPORAL",
                                            "pretrain": {"n_steps": 1, "warmup_steps": 0, "batch_size": 3},
                                            "finetune": {"n_steps": 1, "warmup_steps": 0, "batch_size": 5}})
    assert main(["ablate", "--config", str(cfg), "--out", str(tmp_path)]) == 0
    assert (tmp_path / "ablation.csv").read_text().count("\n") == 3


def test_module_entry_point():
    out = subprocess.run([sys.executable, "-m", "csfm", "--help"], capture_output=True, text=True)
    assert out.returncode == 0 and "gradcheck" in out.stdout
