import subprocess
import sys

import numpy as np
import pytest

from peristalsis.cli import build_parser, main
from peristalsis.cnn import ProbSequence, write_prob_sequences
from peristalsis.mfcc import FeatureTable, write_features

SYNTH = ["--subjects", "2", "--duration", "12", "--seed", "3"]


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    d = tmp_path_factory.mktemp("data")
    assert main(["synth", *SYNTH, "--out", str(d)]) == 0
    return d


def test_help_exits_zero():
    r = subprocess.run([sys.executable, "-m", "peristalsis.cli", "--help"],
                       capture_output=True, text=True)
    assert r.returncode == 0
    for cmd in ("segment", "featurize", "train", "predict", "refine", "evaluate", "lopocv", "synth"):
        assert cmd in r.stdout


def test_unknown_flag_exits_two():
    with pytest.raises(SystemExit) as e:
        main(["segment", "--manifest", "m.tsv", "--bogus"])
    assert e.value.code == 2


def test_non_positive_window_rejected():
    with pytest.raises(SystemExit) as e:
        main(["segment", "--manifest", "m.tsv", "--window", "0"])
    assert e.value.code == 2


def test_defaults():
    args = build_parser().parse_args(["segment", "--manifest", "m.tsv"])
    assert (args.window, args.hop) == (6.0, 0.1)
    args = build_parser().parse_args(["lopocv", "--manifest", "m.tsv"])
    assert args.sigma == 5.0 and args.lr == 1e-5 and args.epochs == 200 and args.batch_size == 16


def test_missing_manifest_exits_two(tmp_path, capsys):
    assert main(["segment", "--manifest", str(tmp_path / "nope.tsv")]) == 2
    assert "segment" in capsys.readouterr().err


def test_segment_window_override(dataset, tmp_path):
    out = tmp_path / "seg.tsv"
    assert main(["segment", "--manifest", str(dataset / "manifest.tsv"),
                 "--window", "4", "--hop", "1", "--out", str(out)]) == 0
    rows = [ln for ln in out.read_text().splitlines() if not ln.startswith("#")]
    # (12 - 4) / 1 + 1 windows per subject
    assert len(rows) == 2 * 9


def test_synth_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["synth", *SYNTH, "--out", str(a)]) == 0
    assert main(["synth", *SYNTH, "--out", str(b)]) == 0
    for name in ("S01.wav", "S01.tsv", "S02.wav", "manifest.tsv", "spec.txt"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_out_env_default(tmp_path, monkeypatch, dataset):
    monkeypatch.setenv("PERISTALSIS_OUT", str(tmp_path))
    assert main(["segment", "--manifest", str(dataset / "manifest.tsv")]) == 0
    assert (tmp_path / "segments.tsv").exists()


def test_single_class_training_exits_three(tmp_path):
    n = 20
    t = FeatureTable(["A"] * n, np.arange(n) * 0.1, np.ones(n, dtype=int),
                     np.random.default_rng(0).normal(size=(n, 24)))
    write_features(tmp_path / "f.tsv", t)
    assert main(["train", "--features", str(tmp_path / "f.tsv"), "--epochs", "1",
                 "--out", str(tmp_path / "m.bscn")]) == 3


def test_pipeline_featurize_train_predict_evaluate(dataset, tmp_path, capsys):
    feats, model, probs = tmp_path / "f.tsv", tmp_path / "m.bscn", tmp_path / "p.tsv"
    assert main(["featurize", "--manifest", str(dataset / "manifest.tsv"), "--hop", "0.5",
                 "--out", str(feats)]) == 0
    assert main(["train", "--features", str(feats), "--epochs", "2", "--lr", "1e-3",
                 "--out", str(model)]) == 0
    assert (tmp_path / "m.bscn.curve.tsv").exists() and (tmp_path / "m.bscn.curve.png").exists()
    assert main(["predict", "--model", str(model), "--features", str(feats), "--out", str(probs)]) == 0
    refined = tmp_path / "r.tsv"
    assert main(["refine", "--probs", str(probs), "--labels", str(feats),
                 "--save-params", str(tmp_path / "h.txt"), "--out", str(refined)]) == 0
    capsys.readouterr()
    assert main(["evaluate", "--truth", str(feats), "--pred", str(probs),
                 "--out", str(tmp_path / "rep")]) == 0
    assert capsys.readouterr().out.splitlines()[0].split()[:3] == ["Method", "ACC", "AUC"]
    assert main(["evaluate", "--truth", str(feats), "--pred", str(refined)]) == 0
    assert (tmp_path / "rep" / "report.kv").exists()


def test_refine_external_probabilities(tmp_path):
    # any classifier's output works, with parameters from a segment index
    seg = tmp_path / "seg.tsv"
    labels = [0] * 5 + [1] * 10 + [0] * 5
    seg.write_text("".join(f"X\t{i * 0.1!r}\t{i * 0.1 + 6.0!r}\t{'NP' if v == 0 else 'P'}\n"
                           for i, v in enumerate(labels)))
    probs = np.array(labels, dtype=float) * 0.8 + 0.1
    probs[8] = 0.3  # isolated dip inside the P run
    write_prob_sequences(tmp_path / "p.tsv", [ProbSequence("X", np.arange(20) * 0.1, probs)])
    out = tmp_path / "r.tsv"
    assert main(["refine", "--probs", str(tmp_path / "p.tsv"), "--labels", str(seg),
                 "--sigma", "0.5", "--out", str(out)]) == 0
    got = [ln.split("\t")[2] for ln in out.read_text().splitlines() if not ln.startswith("#")]
    assert got == ["NP" if v == 0 else "P" for v in labels]


def test_refine_needs_parameters(tmp_path):
    write_prob_sequences(tmp_path / "p.tsv", [ProbSequence("X", np.arange(3) * 0.1, np.full(3, 0.5))])
    assert main(["refine", "--probs", str(tmp_path / "p.tsv")]) == 2


def test_evaluate_bad_prediction_file(tmp_path, dataset):
    seg = tmp_path / "seg.tsv"
    assert main(["segment", "--manifest", str(dataset / "manifest.tsv"), "--out", str(seg)]) == 0
    (tmp_path / "bad.tsv").write_text("S01\tzero\t0.5\n")
    assert main(["evaluate", "--truth", str(seg), "--pred", str(tmp_path / "bad.tsv")]) == 2
    (tmp_path / "short.tsv").write_text("S01\t0.0\t0.5\n")
    assert main(["evaluate", "--truth", str(seg), "--pred", str(tmp_path / "short.tsv")]) == 2


def test_lopocv_small(tmp_path, capsys):
    data, out = tmp_path / "d", tmp_path / "lo"
    assert main(["synth", "--subjects", "3", "--duration", "50", "--out", str(data)]) == 0
    assert main(["lopocv", "--manifest", str(data / "manifest.tsv"), "--hop", "0.5",
                 "--epochs", "2", "--lr", "1e-3", "--sweep", "0.1,5", "--out", str(out)]) == 0
    text = capsys.readouterr().out
    assert "CNN+HSMM" in text
    assert (out / "report.txt").exists() and (out / "sigma_sweep.png").exists()
    assert "sigma=0.1" in (out / "report.txt").read_text()
