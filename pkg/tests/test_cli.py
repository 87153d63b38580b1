import json
import subprocess
import sys

import numpy as np
import pytest

from darcn.cli import run
from darcn.dsp import read_wav, write_wav


@pytest.fixture(scope="module")
def small_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    corpus = root / "corpus"
    assert run(["synth-data", "--out", str(corpus), "--seed", "1", "--train", "4", "--val", "2", "--test", "1"]) == 0
    out = root / "run"
    code = run(["train", "--in", str(corpus), "--out", str(out), "--preset", "tiny", "--stages", "2",
                "--max-epochs", "1", "--seed", "0", "--threads", "1"])
    assert code == 0
    return corpus, out


def test_params_paper(capsys):
    assert run(["params", "--preset", "paper"]) == 0
    out = capsys.readouterr().out
    assert "1.23" in out and "total = 1.209 M" in out
    assert "nrm.glu" in out


def test_usage_errors_exit_1(capsys):
    assert run([]) == 1
    assert run(["bogus"]) == 1
    assert run(["params", "--preset", "huge"]) == 1
    assert run(["enhance", "--in", "x.wav"]) == 1


def test_env_override(monkeypatch, capsys):
    monkeypatch.setenv("DARCN_PRESET", "tiny")
    assert run(["params"]) == 0
    assert "total = 0.010 M" in capsys.readouterr().out
    monkeypatch.setenv("DARCN_SEED", "not-a-number")
    assert run(["params"]) == 1


def test_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "paper"}))
    assert run(["params", "--config", str(cfg)]) == 0
    assert "1.209" in capsys.readouterr().out
    (tmp_path / "bad.json").write_text("{")
    assert run(["params", "--config", str(tmp_path / "bad.json")]) == 2


def test_missing_data_exit_2(tmp_path):
    assert run(["train", "--train-manifest", str(tmp_path / "none.tsv"), "--val-manifest",
                str(tmp_path / "none.tsv"), "--out", str(tmp_path / "r")]) == 2
    assert run(["enhance", "--in", str(tmp_path / "none.wav"), "--out", str(tmp_path / "o.wav"),
                "--ckpt", str(tmp_path / "none.ckpt")]) == 2


def test_train_outputs(small_run):
    _, out = small_run
    assert (out / "best.ckpt").exists() and (out / "last.ckpt").exists()
    lines = (out / "train.log").read_text().splitlines()
    assert len(lines) == 1 and len(lines[0].split("\t")) == 3 + 2 + 1 + 2


def test_enhance_zero_wav(small_run, tmp_path):
    _, out = small_run
    write_wav(tmp_path / "z.wav", np.zeros(4000))
    assert run(["enhance", "--in", str(tmp_path / "z.wav"), "--out", str(tmp_path / "e.wav"),
                "--ckpt", str(out / "best.ckpt")]) == 0
    y = read_wav(tmp_path / "e.wav").samples
    assert len(y) == 4000 and np.all(np.isfinite(y)) and np.max(np.abs(y)) < 0.1


def test_enhance_is_reproducible(small_run, tmp_path):
    corpus, out = small_run
    src = sorted((corpus / "clean" / "test").glob("*.wav"))[0]
    for name in ("a.wav", "b.wav"):
        assert run(["enhance", "--in", str(src), "--out", str(tmp_path / name), "--ckpt",
                    str(out / "best.ckpt")]) == 0
    assert (tmp_path / "a.wav").read_bytes() == (tmp_path / "b.wav").read_bytes()


def test_evaluate_writes_report(small_run, tmp_path, capsys):
    corpus, out = small_run
    prefix = tmp_path / "report"
    assert run(["evaluate", "--in", str(corpus / "test.tsv"), "--ckpt", str(out / "best.ckpt"),
                "--out", str(prefix)]) == 0
    tsv = (tmp_path / "report.tsv").read_text().splitlines()
    payload = json.loads((tmp_path / "report.json").read_text())
    # one row per (kind, SNR, metric): 12 kinds x 4 SNRs x 3 metrics
    assert len(tsv) == 1 + 12 * 4 * 3
    assert len(payload["aggregate"]) == 12 * 4 * 3


def test_evaluate_rejects_preset_mismatch(small_run, tmp_path):
    from darcn.data import Manifest
    from darcn.enhance import ModelEnhancer
    from darcn.errors import ContractError
    from darcn.metrics import evaluate_records
    from darcn.model import PAPER
    from darcn.training import load_model

    corpus, out = small_run
    model, _, _ = load_model(out / "best.ckpt")
    rec = Manifest.load(corpus / "test.tsv")[:1]
    with pytest.raises(ContractError):
        evaluate_records(rec, ModelEnhancer(model), PAPER.stft_config())


def test_synth_data_is_reproducible(tmp_path):
    for d in ("a", "b"):
        assert run(["synth-data", "--out", str(tmp_path / d), "--seed", "3", "--train", "2", "--val", "1",
                    "--test", "1"]) == 0
    for name in ("train.tsv", "noise/seen/white.wav", "clean/train/train_0001.wav"):
        a = (tmp_path / "a" / name).read_bytes()
        b = (tmp_path / "b" / name).read_bytes()
        if name.endswith(".tsv"):
            a, b = a.replace(str(tmp_path / "a").encode(), b""), b.replace(str(tmp_path / "b").encode(), b"")
        assert a == b


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "darcn", "params", "--preset", "tiny"], capture_output=True,
                         text=True)
    assert res.returncode == 0 and "total" in res.stdout
