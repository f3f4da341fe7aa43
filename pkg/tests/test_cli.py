import csv

import numpy as np
import pytest

from avfusion import cli
from avfusion import numcore as nc
from avfusion.data import read_records
from avfusion.trainer import load_checkpoint


def run(capsys, *argv):
    code = cli.main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture
def data(tmp_path, capsys):
    tr, te = tmp_path / "tr.avfr", tmp_path / "te.avfr"
    assert run(capsys, "synth", "--records", "300", "--seed", "1", "--out", str(tr), "--quiet")[0] == 0
    assert run(capsys, "synth", "--records", "100", "--seed", "2", "--out", str(te), "--quiet")[0] == 0
    return tr, te


def test_synth_echoes_header_and_is_deterministic(tmp_path, capsys):
    a, b = tmp_path / "a.avfr", tmp_path / "b.avfr"
    code, out, _ = run(capsys, "synth", "--classes", "32", "--records", "500", "--seed", "7", "--out", str(a))
    assert code == 0 and "records=500" in out and "classes=32" in out and "seed=7" in out
    run(capsys, "synth", "--classes", "32", "--records", "500", "--seed", "7", "--out", str(b))
    assert a.read_bytes() == b.read_bytes()
    h, _ = read_records(a)
    assert (h.num_classes, h.num_records) == (32, 500)


def test_invalid_split_exits_nonzero_with_one_line(tmp_path, capsys):
    code, out, err = run(capsys, "synth", "--classes", "32", "--cross-modal", "40", "--out", str(tmp_path / "x"))
    assert code != 0 and out == ""
    assert err.startswith("avfusion:error:") and err.count("\n") == 1


def test_usage_errors(capsys):
    for argv in (["nope"], [], ["count-params"], ["train"], ["count-params", "--arch", "nope"]):
        code, _, err = run(capsys, *argv)
        assert code == 2 and err.startswith("avfusion:error:") and err.count("\n") == 1


def test_train_writes_history_and_checkpoint(tmp_path, capsys, data):
    tr, te = data
    ck = tmp_path / "ck"
    code, out, err = run(capsys, "train", "--train", str(tr), "--valid", str(te), "--arch", "attend_fusion",
                         "--hidden", "16", "--attn", "8", "--epochs", "3", "--batch-size", "64",
                         "--lr", "0.001", "--checkpoint-dir", str(ck))
    assert code == 0, err
    rows = list(csv.reader((ck / "history.csv").open()))
    assert rows[0] == ["epoch", "loss", "gap", "f1", "seconds"] and len(rows) == 4
    c = load_checkpoint(ck / "final.avck")
    assert c.config.learning_rate == 0.001 and c.epoch == 3 and c.arch.hidden_dim == 16


def test_config_precedence(tmp_path, capsys, data):
    tr, _ = data
    cfg = tmp_path / "run.cfg"
    cfg.write_text("# comment line\narch = fc_audio\nhidden = 12  # trailing comment\nlr = 0.5\nepochs = 1\n"
                   "k = 5\n")
    ck = tmp_path / "ck"
    code, _, err = run(capsys, "--config", str(cfg), "train", "--train", str(tr), "--lr", "0.002",
                       "--checkpoint-dir", str(ck), "--quiet")
    assert code == 0, err
    c = load_checkpoint(ck / "final.avck")
    assert c.arch.name == "fc_audio" and c.arch.hidden_dim == 12  # from file
    assert c.config.learning_rate == 0.002  # flag beats file
    assert c.config.batch_size == 256  # built-in default


def test_bad_config_key(tmp_path, capsys):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("learning_rat = 3\n")
    code, _, err = run(capsys, "list", "--config", str(cfg))
    assert code == 2 and "unknown key" in err


def test_unimodal_train_ignores_visual(tmp_path, capsys, data):
    tr, _ = data
    code, _, err = run(capsys, "train", "--train", str(tr), "--arch", "fc_audio", "--hidden", "8", "--epochs", "1",
                       "--checkpoint-dir", str(tmp_path / "ck"), "--quiet")
    assert code == 0, err


def test_eval_is_deterministic_and_rejects_corruption(tmp_path, capsys, data):
    tr, te = data
    ck = tmp_path / "ck"
    run(capsys, "train", "--train", str(tr), "--arch", "fc_late", "--hidden", "8", "--epochs", "1",
        "--checkpoint-dir", str(ck), "--quiet")
    first = run(capsys, "eval", "--checkpoint", str(ck / "final.avck"), "--data", str(te), "--k", "5",
                "--csv", str(tmp_path / "r.csv"))
    second = run(capsys, "eval", "--checkpoint", str(ck / "final.avck"), "--data", str(te), "--k", "5")
    assert first[0] == 0 and first[1] == second[1]
    assert '"k": 5' in first[1] and '"threshold": 0.5' in first[1]
    assert (tmp_path / "r.csv").read_text().startswith("gap,f1")

    raw = bytearray((ck / "final.avck").read_bytes())
    raw[len(raw) // 2] ^= 0x04
    (tmp_path / "bad.avck").write_bytes(bytes(raw))
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "bad.avck"), "--data", str(te))
    assert code == 1 and err.startswith("avfusion:error:corrupt:") and "CRC32" in err


def test_eval_dim_mismatch(tmp_path, capsys, data):
    tr, _ = data
    other = tmp_path / "o.avfr"
    run(capsys, "synth", "--records", "20", "--classes", "3", "--audio-only", "1", "--visual-only", "1",
        "--cross-modal", "1", "--out", str(other), "--quiet")
    run(capsys, "train", "--train", str(tr), "--arch", "fc_audio", "--hidden", "4", "--epochs", "1",
        "--checkpoint-dir", str(tmp_path / "ck"), "--quiet")
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "ck" / "final.avck"), "--data", str(other))
    assert code == 1 and "do not match" in err


def test_count_params(capsys):
    code, out, _ = run(capsys, "count-params", "--arch", "fc_late")
    assert code == 0
    total = int(out.strip().splitlines()[-1].split()[1])
    assert abs(total - 341e6) / 341e6 < 0.02
    code, out, _ = run(capsys, "count-params", "--all")
    rows = out.strip().splitlines()[1:]
    assert len(rows) == 15
    counts = {r.split()[0]: int(r.split()[1]) for r in rows}
    assert counts["attend_fusion"] < 0.25 * counts["fc_late"]


def test_list(capsys):
    code, out, _ = run(capsys, "list")
    assert code == 0 and len(out.strip().splitlines()) == 15


def test_gradcheck_passes_and_reports_per_seed(capsys):
    code, out, _ = run(capsys, "gradcheck", "--arch", "fc_attention", "--seeds", "2")
    assert code == 0
    assert sum("arch:fc_attention" in line for line in out.splitlines()) == 2
    assert "layer:softmax_rows" in out and out.strip().endswith("passed")


def test_gradcheck_locates_a_corrupted_rule(capsys, monkeypatch):
    real_relu = nc.relu

    def leaky_backward_relu(x):
        out = real_relu(x)
        mask = (x.data > 0).astype(float)
        return nc.record("relu", out.data, (x,), lambda g: (g * (mask + 0.01),))

    monkeypatch.setattr(nc, "relu", leaky_backward_relu)
    code, _, err = run(capsys, "gradcheck", "--arch", "fc_audio", "--seeds", "1", "--quiet")
    assert code == 1
    assert err.startswith("avfusion:error:gradcheck:") and "worst" in err and "[" in err


def test_gradcheck_refuses_large_dims(capsys):
    code, _, err = run(capsys, "gradcheck", "--arch", "fc_late", "--hidden", "200")
    assert code == 2 and "10000" in err


def test_thread_env_is_validated(capsys, monkeypatch):
    monkeypatch.setenv("AVFUSION_THREADS", "zero")
    code, _, err = run(capsys, "list")
    assert code == 2 and "AVFUSION_THREADS" in err
    monkeypatch.setenv("AVFUSION_THREADS", "2")
    assert run(capsys, "list")[0] == 0


def test_missing_input_file(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--train", str(tmp_path / "none.avfr"))
    assert code == 1 and err.startswith("avfusion:error:io:")


def test_inputs_are_not_mutated(tmp_path, capsys, data):
    tr, te = data
    before = tr.read_bytes(), te.read_bytes()
    run(capsys, "train", "--train", str(tr), "--valid", str(te), "--arch", "fc_early", "--hidden", "4",
        "--epochs", "1", "--checkpoint-dir", str(tmp_path / "ck"), "--quiet")
    assert (tr.read_bytes(), te.read_bytes()) == before
