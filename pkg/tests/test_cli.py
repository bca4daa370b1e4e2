import subprocess
import sys

import pytest

from sdmrec.cli import main

from conftest import ML100K, write_udata

FAST = ["--dim", "8", "--epochs", "2", "--batch", "64", "--allow-offgrid"]


@pytest.fixture(scope="module")
def prepared(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    raw = write_udata(root / "toy.data")
    assert main(["prep", "--data", str(raw), "--out", str(root / "prep"), "--seed", "1"]) == 0
    return root


def run(*argv):
    return main([str(a) for a in argv])


def test_prep_outputs(prepared):
    prep = prepared / "prep"
    for name in ("bundle.tsv", "instances.tsv", "stats.tsv", "manifest.tsv", "negatives_test_seed1.tsv"):
        assert (prep / name).exists(), name
    users, items, inter, inst = (prep / "stats.tsv").read_text().splitlines()[-1].split("\t")
    assert (users, inter, inst) == ("30", "360", "360") and int(items) <= 150


def test_train_eval_analyze(prepared, capsys):
    prep, out = prepared / "prep", prepared / "sdmr"
    assert run("train", "--data", prep, "--out", out, "--model", "sdmr", "--hops", "2", "--seed", "1", *FAST) == 0
    log = (out / "run_log.tsv").read_text().splitlines()
    stages = [line.split("\t")[0] for line in log[2:]]
    assert stages == sorted(stages, key=["sdp", "sdm", "sdmr"].index) and set(stages) == {"sdp", "sdm", "sdmr"}
    assert run("eval", "--data", prep, "--out", out) == 0
    assert '"split": "test"' in (out / "metrics_test.json").read_text()
    assert run("analyze", "--data", prep, "--out", out) == 0
    summary = (out / "analysis" / "pmi_correlation.tsv").read_text().splitlines()
    assert len(summary) == 3
    assert (out / "analysis" / "attention_test.csv").exists()
    manifest = (out / "manifest.tsv").read_text()
    assert "model.ckpt" in manifest and "metrics_test.tsv" in manifest


def test_train_twice_is_byte_identical(prepared):
    prep = prepared / "prep"
    for name in ("a", "b"):
        assert run("train", "--data", prep, "--out", prepared / name, "--model", "sdm", "--seed", "1", *FAST) == 0
        assert run("eval", "--data", prep, "--out", prepared / name) == 0
    for f in ("model.ckpt", "metrics_test.tsv", "metrics_dev.tsv", "config.txt"):
        assert (prepared / "a" / f).read_bytes() == (prepared / "b" / f).read_bytes(), f


def test_sweep_rows_equal_grid_product(prepared):
    out = prepared / "sweep"
    assert run("sweep", "--data", prepared / "prep", "--out", out, "--model", "mfbpr", "--dim", "8,16",
               "--reg", "0.01,0.001", "--epochs", "1", "--batch", "64", "--seed", "1") == 0
    rows = [r for r in (out / "leaderboard.tsv").read_text().splitlines() if not r.startswith("#")]
    assert len(rows) == 1 + 4
    dev = [float(r.split("\t")[6]) for r in rows[1:]]
    assert dev == sorted(dev, reverse=True)


def test_missing_checkpoint_message(prepared, capsys):
    empty = prepared / "nothing"
    assert run("eval", "--data", prepared / "prep", "--out", empty) == 2
    err = capsys.readouterr().err
    assert "missing checkpoint" in err and "sdmrec train" in err


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_exit_codes(prepared, tmp_path):
    assert run("prep", "--data", tmp_path / "absent.data", "--out", tmp_path / "p") == 2
    bad = tmp_path / "bad.data"
    bad.write_text("1\tx\n")
    assert run("prep", "--data", bad, "--out", tmp_path / "p") == 2
    with pytest.raises(SystemExit) as exc:
        main(["train", "--out", str(tmp_path)])
    assert exc.value.code == 1
    assert run("train", "--data", prepared / "prep", "--out", tmp_path / "t", "--dim", "7") == 1
    assert run("train", "--data", prepared / "prep", "--out", tmp_path / "t", "--model", "mfbpr",
               "--lr", "1e300", *FAST) == 3


def test_console_script_help():
    res = subprocess.run([sys.executable, "-m", "sdmrec.cli", "--help"], capture_output=True, text=True)
    assert res.returncode == 0 and "prep" in res.stdout


@pytest.mark.skipif(not ML100K.exists(), reason="ML-100k not available")
def test_prep_ml100k_counts(tmp_path, capsys):
    assert run("prep", "--data", ML100K, "--out", tmp_path / "ml") == 0
    stats = (tmp_path / "ml" / "stats.tsv").read_text().splitlines()[-1].split("\t")
    assert stats[:3] == ["943", "1682", "100000"]
