import numpy as np
import pytest

from peristalsis import NP, P
from peristalsis.cnn import TrainConfig
from peristalsis.errors import InsufficientSubjects
from peristalsis.evaluation import (
    LeakageError,
    _check_no_leak,
    ablation_refinement,
    observation_benchmark,
    pooled_table,
    report_deltas,
    run_lopocv,
    sigma_sweep,
    threshold_labels,
    write_reports,
)
from peristalsis.metrics import ConfusionCounts, compute_metrics
from peristalsis.mfcc import FeatureTable
from peristalsis.synth import SynthSpec, uniform_table

FAST = TrainConfig(epochs=3, learning_rate=1e-3)


def make_table(sid, seed, n=80):
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(n // 10) % 2, 10)
    X = rng.normal(size=(n, 24)) + 1.5 * labels[:, None]
    return FeatureTable([sid] * n, np.arange(n) * 0.1, labels, X)


@pytest.fixture(scope="module")
def tables():
    return {s: make_table(s, i) for i, s in enumerate(["A", "B", "C"])}


@pytest.fixture(scope="module")
def result(tables):
    return run_lopocv(tables, FAST)


def test_one_fold_per_subject_without_leakage(result, tables):
    assert [f.subject_id for f in result.folds] == list(tables)
    for f in result.folds:
        assert f.subject_id not in f.train_subjects
        assert set(f.train_subjects) == set(tables) - {f.subject_id}
        assert len(f.raw) == len(f.refined) == len(tables[f.subject_id])
    assert set(result.models) == set(tables)


def test_pooled_counts_are_fold_sums(result):
    pre = sum((f.pre.counts for f in result.folds), ConfusionCounts())
    post = sum((f.post.counts for f in result.folds), ConfusionCounts())
    assert pre == result.pooled_pre.counts
    assert post == result.pooled_post.counts


def test_pre_uses_half_threshold(result):
    f = result.folds[0]
    assert np.array_equal(f.raw_labels, (f.raw.probs > 0.5).astype(int))
    assert f.pre == compute_metrics(f.truth, f.raw_labels, f.raw.probs)


def test_leakage_guard():
    t = make_table("A", 0)
    with pytest.raises(LeakageError):
        _check_no_leak("A", [t], ())
    with pytest.raises(LeakageError):
        _check_no_leak("A", [], ("A",))
    _check_no_leak("B", [t], ("A",))


def test_needs_two_subjects():
    with pytest.raises(InsufficientSubjects):
        run_lopocv({"A": make_table("A", 0)}, FAST)


def test_deltas():
    truth = np.array([0, 1, 1, 0, 1, 0, 1, 1])
    same = compute_metrics(truth, truth)
    assert report_deltas(same, same) == {"acc": 0.0, "auc": 0.0, "ma_f1": 0.0, "wt_f1": 0.0}
    flipped = truth.copy()
    flipped[2] = 0
    d = report_deltas(compute_metrics(truth, flipped), same)
    assert d["acc"] == pytest.approx(1 / truth.size)
    d = report_deltas(compute_metrics(truth, 1 - truth), same)
    assert d["acc"] == pytest.approx(1.0)


def test_ablation_matches_pooled(result):
    d = ablation_refinement(result)
    assert d["acc"] == pytest.approx(result.pooled_post.acc - result.pooled_pre.acc)
    assert ablation_refinement(result.folds) == d


def test_sigma_sweep_order_and_reuse(result):
    sweep = sigma_sweep(result, [5.0, 0.1, 1.0])
    assert [s for s, _, _ in sweep] == [5.0, 0.1, 1.0]
    default = [a for s, a, _ in sweep if s == result.folds[0].params.sigma]
    assert default and default[0] == pytest.approx(result.pooled_post.acc)


def test_reports_and_figures(result, tmp_path):
    sweep = sigma_sweep(result, [0.1, 5.0])
    paths = write_reports(tmp_path, result, sweep)
    names = {p.name for p in paths}
    assert {"report.txt", "report.kv", "ablation.png", "sigma_sweep.png"} <= names
    assert {"refine_A.png", "curve_B.png"} <= names
    for p in paths:
        assert p.stat().st_size > 0
    text = (tmp_path / "report.txt").read_text()
    assert "pooled CNN+HSMM" in text and "sigma=0.1" in text
    kv = dict(line.split(" = ") for line in (tmp_path / "report.kv").read_text().splitlines())
    assert float(kv["pooled_CNN.acc"]) == pytest.approx(result.pooled_pre.acc)
    assert "delta.acc" in kv
    assert pooled_table(result).splitlines()[2].startswith("CNN")


def test_reports_without_figures(result, tmp_path):
    paths = write_reports(tmp_path, result, figures=False)
    assert [p.name for p in paths] == ["report.txt", "report.kv"]


def test_threshold_is_strict():
    assert threshold_labels([0.5, 0.50001, 0.2]).tolist() == [NP, P, NP]


def test_observation_benchmark_small():
    spec = SynthSpec(dur_p=uniform_table(20, 40), dur_np=uniform_table(10, 20), pi_p=0.6)
    r = observation_benchmark(spec, n_sequences=10, length=200, sigmas=(0.1, 5.0), n_train=10)
    assert set(r.refined) == {0.1, 5.0}
    assert r.raw.counts.total == 2000
    assert r.acc_gain(5.0) == r.refined[5.0].acc - r.raw.acc
    assert r.emission_matrix.shape == (2, 2)
    # same seed, same numbers
    again = observation_benchmark(spec, n_sequences=10, length=200, sigmas=(0.1, 5.0), n_train=10)
    assert again.refined[5.0] == r.refined[5.0]
