"""Leave-one-subject-out evaluation, refinement ablations and sigma sweeps."""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import NP, P
from .cnn import CnnModel, ProbSequence, TrainConfig, TrainingCurve, predict_sequence, train
from .errors import ContractError, DegenerateConfusion, InsufficientSubjects
from .hsmm import (
    DEFAULT_SIGMA,
    HsmmParams,
    StateSequence,
    conventional_emission,
    learn_params,
    viterbi_refine,
)
from .metrics import (
    ConfusionCounts,
    MetricReport,
    compute_metrics,
    confusion,
    format_keyvalue,
    format_table,
)
from .mfcc import FeatureTable, MfccConfig, featurize_recording
from .signal_io import DEFAULT_HOP, DEFAULT_WINDOW, load_dataset
from .synth import SynthSpec, gen_observations, gen_state_sequence

log = logging.getLogger(__name__)

THRESHOLD = 0.5


class LeakageError(ContractError):
    pass


def threshold_labels(probs, threshold: float = THRESHOLD) -> np.ndarray:
    """P where the probability strictly exceeds the threshold (softmax argmax rule)."""
    return (np.asarray(probs) > threshold).astype(int)


@dataclass(eq=False)
class FoldResult:
    subject_id: str
    raw: ProbSequence
    refined: StateSequence
    truth: np.ndarray
    pre: MetricReport
    post: MetricReport
    params: HsmmParams
    train_subjects: tuple = ()
    curve: TrainingCurve | None = None
    emission_matrix: np.ndarray | None = None
    conventional: StateSequence | None = None

    def __post_init__(self):
        if not len(self.raw) == len(self.refined) == len(self.truth):
            raise ContractError(f"{self.subject_id}: fold sequence lengths disagree")

    @property
    def raw_labels(self) -> np.ndarray:
        return threshold_labels(self.raw.probs)


@dataclass(eq=False)
class LopocvResult:
    folds: list
    pooled_pre: MetricReport
    pooled_post: MetricReport
    pooled_conventional: MetricReport | None = None
    models: dict = field(default_factory=dict)


def _check_no_leak(held_out: str, train_tables, hsmm_sources) -> None:
    for t in train_tables:
        if held_out in t.subject_ids:
            raise LeakageError(f"held-out subject {held_out} found in CNN training data")
    if held_out in hsmm_sources:
        raise LeakageError(f"held-out subject {held_out} used for duration learning")


def _train_confusion(model: CnnModel, X, y) -> np.ndarray:
    pred = threshold_labels(model.predict_proba(X)[:, P])
    return confusion(y, pred).matrix()


def run_fold(tables: dict, held_out: str, cfg: TrainConfig,
             sigma: float = DEFAULT_SIGMA) -> tuple[FoldResult, CnnModel]:
    train_ids = tuple(s for s in tables if s != held_out)
    train_tables = [tables[s] for s in train_ids]
    _check_no_leak(held_out, train_tables, train_ids)

    X = np.concatenate([t.X for t in train_tables])
    y = np.concatenate([t.labels for t in train_tables])
    model, curve = train(X, y, cfg)
    params = learn_params([t.labels for t in train_tables], sigma)

    test = tables[held_out]
    raw = predict_sequence(model, test.X, test.starts, held_out)
    refined = viterbi_refine(raw, params)
    try:
        E = conventional_emission(_train_confusion(model, X, y))
        conv = viterbi_refine(raw, params, emission_matrix=E)
    except DegenerateConfusion:
        log.warning("%s: degenerate training confusion, skipping conventional variant", held_out)
        E, conv = None, None

    truth = test.labels
    pre = compute_metrics(truth, threshold_labels(raw.probs), raw.probs)
    post_labels = refined.labels()
    post = compute_metrics(truth, post_labels, post_labels)
    fold = FoldResult(held_out, raw, refined, truth, pre, post, params, train_ids,
                      curve, E, conv)
    return fold, model


def _run_fold_job(args):
    return run_fold(*args)


def pooled_reports(folds) -> tuple[MetricReport, MetricReport, MetricReport | None]:
    truth = np.concatenate([f.truth for f in folds])
    probs = np.concatenate([f.raw.probs for f in folds])
    post = np.concatenate([f.refined.labels() for f in folds])
    pre_r = compute_metrics(truth, threshold_labels(probs), probs)
    post_r = compute_metrics(truth, post, post)
    conv_r = None
    if all(f.conventional is not None for f in folds):
        conv = np.concatenate([f.conventional.labels() for f in folds])
        conv_r = compute_metrics(truth, conv, conv)
    return pre_r, post_r, conv_r


def run_lopocv(tables: dict, cfg: TrainConfig = TrainConfig(), sigma: float = DEFAULT_SIGMA,
               seed: int | None = None, jobs: int = 1) -> LopocvResult:
    """Hold out each subject in turn; ``tables`` maps subject id -> FeatureTable."""
    if len(tables) < 2:
        raise InsufficientSubjects(f"need at least 2 subjects, got {len(tables)}")
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    order = list(tables)
    jobs_args = [(tables, sid, cfg, sigma) for sid in order]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            out = list(ex.map(_run_fold_job, jobs_args))
    else:
        out = []
        for i, a in enumerate(jobs_args, start=1):
            log.info("fold %d/%d: holding out %s", i, len(order), a[1])
            out.append(run_fold(*a))
    folds = [f for f, _ in out]
    pre, post, conv = pooled_reports(folds)
    return LopocvResult(folds, pre, post, conv, {f.subject_id: m for f, m in out})


def featurize_dataset(recordings, window: float = DEFAULT_WINDOW, hop: float = DEFAULT_HOP,
                      mfcc_cfg: MfccConfig = MfccConfig()) -> dict:
    return {r.subject_id: featurize_recording(r, window, hop, mfcc_cfg) for r in recordings}


def run_lopocv_manifest(manifest, cfg: TrainConfig = TrainConfig(), sigma: float = DEFAULT_SIGMA,
                        seed: int | None = None, window: float = DEFAULT_WINDOW,
                        hop: float = DEFAULT_HOP, mfcc_cfg: MfccConfig = MfccConfig(),
                        jobs: int = 1) -> LopocvResult:
    recordings = load_dataset(manifest)
    if len(recordings) < 2:
        raise InsufficientSubjects(f"need at least 2 subjects, got {len(recordings)}")
    return run_lopocv(featurize_dataset(recordings, window, hop, mfcc_cfg), cfg, sigma, seed, jobs)


def ablation_refinement(folds_or_result) -> dict:
    """Signed pooled improvements (post - pre) of ACC, AUC, MA_F1 and WT_F1."""
    if isinstance(folds_or_result, LopocvResult):
        pre, post = folds_or_result.pooled_pre, folds_or_result.pooled_post
    else:
        pre, post, _ = pooled_reports(list(folds_or_result))
    return report_deltas(pre, post)


def report_deltas(pre: MetricReport, post: MetricReport) -> dict:
    out = {}
    for key in ("acc", "auc", "ma_f1", "wt_f1"):
        a, b = getattr(pre, key), getattr(post, key)
        out[key] = None if a is None or b is None else b - a
    return out


def sigma_sweep(folds, sigmas) -> list[tuple[float, float, float | None]]:
    """Pooled post-refinement ``(sigma, ACC, AUC)``; CNN outputs stay fixed."""
    folds = list(folds.folds if isinstance(folds, LopocvResult) else folds)
    truth = np.concatenate([f.truth for f in folds])
    out = []
    for s in sigmas:
        labels = np.concatenate([viterbi_refine(f.raw, f.params.with_sigma(s)).labels()
                                 for f in folds])
        r = compute_metrics(truth, labels, labels)
        out.append((float(s), r.acc, r.auc))
    return out


# ----------------------------------------------------------------------
# observation-level benchmark (no audio, no CNN)

@dataclass
class BenchmarkResult:
    raw: MetricReport
    refined: dict
    conventional: MetricReport
    params: HsmmParams
    emission_matrix: np.ndarray

    def acc_gain(self, sigma: float) -> float:
        return self.refined[sigma].acc - self.raw.acc


def observation_benchmark(spec: SynthSpec = SynthSpec(), n_sequences: int = 100,
                          length: int = 300, sigmas=(DEFAULT_SIGMA,),
                          n_train: int | None = None) -> BenchmarkResult:
    """Refine Laplace-noised synthetic sequences and score against the truth.

    Duration tables, the initial distribution and the conventional emission
    matrix come from a disjoint set of ``n_train`` training sequences.
    """
    n_train = n_sequences if n_train is None else n_train
    rng_seed = spec.seed
    train_truth = [gen_state_sequence(spec, length, seed=[rng_seed, 0, i]) for i in range(n_train)]
    train_obs = [gen_observations(t, spec.obs_sigma, seed=[rng_seed, 1, i]).probs
                 for i, t in enumerate(train_truth)]
    base = learn_params(train_truth, sigmas[0])
    C = confusion(np.concatenate(train_truth),
                  threshold_labels(np.concatenate(train_obs))).matrix()
    E = conventional_emission(C)

    truth, obs = [], []
    for i in range(n_sequences):
        t = gen_state_sequence(spec, length, seed=[rng_seed, 2, i])
        truth.append(t)
        obs.append(gen_observations(t, spec.obs_sigma, seed=[rng_seed, 3, i]).probs)
    all_truth = np.concatenate(truth)
    all_obs = np.concatenate(obs)
    raw = compute_metrics(all_truth, threshold_labels(all_obs), all_obs)

    refined = {}
    for s in sigmas:
        p = base.with_sigma(s)
        lab = np.concatenate([viterbi_refine(o, p).labels() for o in obs])
        refined[float(s)] = compute_metrics(all_truth, lab, lab)
    conv_lab = np.concatenate([viterbi_refine(o, base, emission_matrix=E).labels() for o in obs])
    conv = compute_metrics(all_truth, conv_lab, conv_lab)
    return BenchmarkResult(raw, refined, conv, base, E)


# ----------------------------------------------------------------------
# report files

def report_tables(result: LopocvResult) -> dict:
    rows = {}
    for f in result.folds:
        rows[f"{f.subject_id} CNN"] = f.pre
        rows[f"{f.subject_id} CNN+HSMM"] = f.post
    rows["pooled CNN"] = result.pooled_pre
    rows["pooled CNN+HSMM"] = result.pooled_post
    if result.pooled_conventional is not None:
        rows["pooled CNN+conv. HSMM"] = result.pooled_conventional
    return rows


def pooled_table(result: LopocvResult) -> str:
    rows = {"CNN": result.pooled_pre, "CNN+HSMM": result.pooled_post}
    if result.pooled_conventional is not None:
        rows["CNN+conv. HSMM"] = result.pooled_conventional
    return format_table(rows)


def _counts_block(rows: dict) -> str:
    lines = ["", "Confusion counts (positive class = P)"]
    for name, r in rows.items():
        c: ConfusionCounts = r.counts
        lines.append(f"{name}: tp={c.tp} tn={c.tn} fp={c.fp} fn={c.fn} total={c.total}")
    return "\n".join(lines) + "\n"


def write_reports(out_dir, result: LopocvResult, sweep=None, figures: bool = True) -> list[Path]:
    """Write ``report.txt`` / ``report.kv`` (and PNG figures) into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = report_tables(result)
    deltas = ablation_refinement(result)
    text = format_table(rows) + _counts_block(rows)
    text += "\nRefinement gain (CNN+HSMM - CNN): " + ", ".join(
        f"{k.upper()} {'n/a' if v is None else f'{v:+.4f}'}" for k, v in deltas.items()) + "\n"
    kv_reports = {name.replace(" ", "_").replace("+", "_").replace(".", ""): r
                  for name, r in rows.items()}
    kv = format_keyvalue(kv_reports)
    kv += "".join(f"delta.{k} = {'nan' if v is None else repr(v)}\n" for k, v in deltas.items())
    if sweep:
        text += "\nsigma sweep (pooled, refined)\n" + "".join(
            f"  sigma={s:g}  ACC={a:.4f}  AUC={'n/a' if u is None else f'{u:.4f}'}\n"
            for s, a, u in sweep)
        kv += "".join(f"sweep.{s!r}.acc = {a!r}\nsweep.{s!r}.auc = {'nan' if u is None else repr(u)}\n"
                      for s, a, u in sweep)
    paths = [out / "report.txt", out / "report.kv"]
    paths[0].write_text(text)
    paths[1].write_text(kv)
    if figures:
        from . import plotting

        paths += plotting.render_lopocv_figures(out, result, sweep)
    return paths
