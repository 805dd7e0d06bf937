"""Command-line entry point: ``peristalsis <subcommand> ...``.

Exit codes: 0 success, 2 input error, 3 contract violation (for instance
training data with a single class).  Output paths default to the directory
named by ``$PERISTALSIS_OUT`` (or the working directory).
"""

from __future__ import annotations

import argparse
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import LABEL_NAMES, __version__
from .cnn import (
    TrainConfig,
    load_model,
    predict_sequence,
    read_prob_sequences,
    save_model,
    train,
    write_prob_sequences,
)
from .errors import ContractError, InputError, ParseError
from .evaluation import (
    featurize_dataset,
    pooled_table,
    run_lopocv,
    sigma_sweep,
    threshold_labels,
    write_reports,
)
from .hsmm import DEFAULT_SIGMA, learn_params, load_params, save_params, viterbi_refine
from .metrics import compute_metrics, format_keyvalue, format_table
from .mfcc import FRAME_WINDOWS, FeatureTable, MfccConfig, read_features, write_features
from .signal_io import (
    DEFAULT_HOP,
    DEFAULT_WINDOW,
    load_dataset,
    read_segment_index,
    segment_recording,
    write_segment_index,
)
from .synth import SynthSpec, load_spec, write_dataset

log = logging.getLogger("peristalsis")

OUT_ENV = "PERISTALSIS_OUT"
EXIT_INPUT, EXIT_CONTRACT = 2, 3


def _default_out(name: str) -> Path:
    return Path(os.environ.get(OUT_ENV, ".")) / name


def _out(args, name: str) -> Path:
    return Path(args.out) if args.out else _default_out(name)


def _positive(kind):
    def parse(text):
        v = kind(text)
        if v <= 0:
            raise argparse.ArgumentTypeError(f"must be positive, got {text}")
        return v
    return parse


def _sigma_list(text):
    try:
        vals = [float(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad sigma list {text!r}") from None
    if not vals or min(vals) <= 0:
        raise argparse.ArgumentTypeError("sigma values must be positive")
    return vals


# ----------------------------------------------------------------------
# shared option groups

def _add_window(p):
    p.add_argument("--window", type=_positive(float), default=DEFAULT_WINDOW,
                   help="segment length in seconds (default %(default)s)")
    p.add_argument("--hop", type=_positive(float), default=DEFAULT_HOP,
                   help="step between segment onsets in seconds (default %(default)s)")


def _add_mfcc(p):
    g = p.add_argument_group("MFCC")
    d = MfccConfig()
    g.add_argument("--winlen", type=_positive(float), default=d.winlen,
                   help="analysis frame length, s (default %(default)s)")
    g.add_argument("--winstep", type=_positive(float), default=d.winstep,
                   help="frame step, s (default %(default)s)")
    g.add_argument("--numcep", type=_positive(int), default=d.numcep,
                   help="cepstral coefficients kept (default %(default)s)")
    g.add_argument("--nfilt", type=_positive(int), default=d.nfilt,
                   help="mel filters (default %(default)s)")
    g.add_argument("--nfft", type=_positive(int), default=d.nfft,
                   help="FFT size (default %(default)s)")
    g.add_argument("--preemph", type=float, default=d.preemph,
                   help="pre-emphasis coefficient, 0 disables (default %(default)s)")
    g.add_argument("--frame-window", choices=sorted(FRAME_WINDOWS), default=d.frame_window,
                   help="per-frame taper (default %(default)s)")


def _mfcc_cfg(args) -> MfccConfig:
    return MfccConfig(winlen=args.winlen, winstep=args.winstep, numcep=args.numcep,
                      nfilt=args.nfilt, nfft=args.nfft, preemph=args.preemph,
                      frame_window=args.frame_window)


def _add_train(p):
    g = p.add_argument_group("training")
    d = TrainConfig()
    g.add_argument("--epochs", type=_positive(int), default=d.epochs,
                   help="training epochs (default %(default)s)")
    g.add_argument("--batch-size", type=_positive(int), default=d.batch_size,
                   help="mini-batch size (default %(default)s)")
    g.add_argument("--lr", type=_positive(float), default=d.learning_rate,
                   help="RMSProp learning rate (default %(default)s)")
    g.add_argument("--decay", type=float, default=d.lr_decay,
                   help="learning-rate decay per update (default %(default)s)")
    g.add_argument("--val-fraction", type=float, default=d.val_fraction,
                   help="validation share of the training data (default %(default)s)")
    g.add_argument("--no-balance", action="store_true",
                   help="keep the class imbalance instead of downsampling the majority")


def _train_cfg(args) -> TrainConfig:
    return TrainConfig(learning_rate=args.lr, lr_decay=args.decay, epochs=args.epochs,
                       batch_size=args.batch_size, val_fraction=args.val_fraction,
                       balance=not args.no_balance, seed=args.seed)


def _add_seed(p):
    p.add_argument("--seed", type=int, default=0, help="random seed (default %(default)s)")


def _add_out(p, what):
    p.add_argument("--out", help=f"{what} (default: under ${OUT_ENV} or the working directory)")


# ----------------------------------------------------------------------
# subcommands

def cmd_segment(args) -> int:
    segs = []
    for rec in load_dataset(args.manifest):
        segs += segment_recording(rec, args.window, args.hop)
    out = _out(args, "segments.tsv")
    write_segment_index(out, segs)
    print(f"{len(segs)} segments -> {out}")
    return 0


def cmd_featurize(args) -> int:
    tables = featurize_dataset(load_dataset(args.manifest), args.window, args.hop, _mfcc_cfg(args))
    table = FeatureTable.concat(tables.values())
    out = _out(args, "features.tsv")
    write_features(out, table)
    print(f"{len(table)} feature vectors ({len(tables)} subjects) -> {out}")
    return 0


def cmd_train(args) -> int:
    table = read_features(args.features)
    model, curve = train(table.X, table.labels, _train_cfg(args))
    out = _out(args, "model.bscn")
    save_model(out, model)
    curve_path = out.with_name(out.name + ".curve.tsv")
    curve_path.write_text(curve.to_tsv())
    if not args.no_figures:
        from .plotting import plot_training_curve

        plot_training_curve(curve, out.with_name(out.name + ".curve.png"))
    print(f"best epoch {curve.best_epoch}: val loss {curve.val_loss[curve.best_epoch - 1]:.4f}, "
          f"val acc {curve.val_acc[curve.best_epoch - 1]:.4f} -> {out}")
    return 0


def cmd_predict(args) -> int:
    model = load_model(args.model)
    table = read_features(args.features)
    seqs = []
    for sid in table.subjects():
        t = table.for_subject(sid)
        order = np.argsort(t.starts, kind="stable")
        seqs.append(predict_sequence(model, t.X[order], t.starts[order], sid))
    out = _out(args, "probs.tsv")
    write_prob_sequences(out, seqs)
    print(f"{sum(len(s) for s in seqs)} probabilities -> {out}")
    return 0


def _truth_sequences(path) -> list[np.ndarray]:
    """Per-subject label sequences from a feature file or a segment index."""
    rows = _read_truth(path)
    by_subject: dict[str, list] = {}
    for (sid, start), lab in sorted(rows.items(), key=lambda kv: (kv[0][0], kv[0][1])):
        by_subject.setdefault(sid, []).append(lab)
    return [np.array(v) for v in by_subject.values()]


def cmd_refine(args) -> int:
    seqs = read_prob_sequences(args.probs)
    if args.params:
        params = load_params(args.params)
        if args.sigma is not None:
            params = params.with_sigma(args.sigma)
    elif args.labels:
        params = learn_params(_truth_sequences(args.labels),
                              DEFAULT_SIGMA if args.sigma is None else args.sigma)
    else:
        raise InputError("refine needs --params or --labels to obtain HSMM parameters")
    if args.save_params:
        save_params(args.save_params, params)
    lines = ["# subject_id\tstart\tlabel"]
    for s in seqs:
        refined = viterbi_refine(s, params)
        for t, lab in zip(s.starts, refined.labels()):
            lines.append(f"{s.subject_id}\t{float(t)!r}\t{LABEL_NAMES[lab]}")
    out = _out(args, "refined.tsv")
    out.write_text("\n".join(lines) + "\n")
    print(f"refined {len(seqs)} sequences (sigma={params.sigma:g}) -> {out}")
    return 0


def _read_truth(path) -> dict:
    path = Path(path)
    first = next((ln for ln in path.read_text().splitlines()
                  if ln.strip() and not ln.startswith("#")), "")
    parts = first.split("\t")
    if len(parts) == 4 and parts[3] not in LABEL_NAMES:
        t = read_features(path)
        return {(s, round(float(st), 6)): int(l) for s, st, l in zip(t.subject_ids, t.starts, t.labels)}
    return {(s, round(st, 6)): lab for s, st, _, lab in read_segment_index(path)}


def _read_predictions(path) -> tuple[dict, dict | None]:
    """Labels (and scores if the file carries probabilities) keyed by (subject, start)."""
    labels, scores = {}, {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 3:
            raise ParseError("expected subject_id, start, value", lineno)
        try:
            key = (parts[0], round(float(parts[1]), 6))
            p = None if parts[2] in LABEL_NAMES else float(parts[2])
        except ValueError:
            raise ParseError(f"bad number in {raw!r}", lineno) from None
        if p is None:
            labels[key] = LABEL_NAMES.index(parts[2])
        else:
            scores[key] = p
            labels[key] = int(threshold_labels(p))
    return labels, (scores or None)


def cmd_evaluate(args) -> int:
    truth = _read_truth(args.truth)
    labels, scores = _read_predictions(args.pred)
    missing = [k for k in truth if k not in labels]
    if missing:
        raise InputError(f"{len(missing)} segments have no prediction, e.g. {missing[0]}")
    keys = sorted(truth)
    y = np.array([truth[k] for k in keys])
    pred = np.array([labels[k] for k in keys])
    sc = None if scores is None else np.array([scores[k] for k in keys])
    report = compute_metrics(y, pred, sc)
    table = format_table({"model": report})
    print(table, end="")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(table)
        (out / "report.kv").write_text(format_keyvalue({"model": report}))
    return 0


def cmd_lopocv(args) -> int:
    tables = featurize_dataset(load_dataset(args.manifest), args.window, args.hop, _mfcc_cfg(args))
    result = run_lopocv(tables, _train_cfg(args), args.sigma, jobs=args.jobs)
    sweep = sigma_sweep(result, args.sweep) if args.sweep else None
    out = _out(args, "lopocv")
    write_reports(out, result, sweep, figures=not args.no_figures)
    print(pooled_table(result), end="")
    print(f"reports -> {out}")
    return 0


def cmd_synth(args) -> int:
    spec = load_spec(args.spec, SynthSpec.audio_benchmark()) if args.spec else SynthSpec.audio_benchmark()
    overrides = {k: getattr(args, k) for k in ("subjects", "duration", "snr_db", "seed")
                 if getattr(args, k) is not None}
    spec = replace(spec, **overrides)
    manifest = write_dataset(spec, _out(args, "synth"))
    print(f"{spec.subjects} subjects -> {manifest}")
    return 0


# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="peristalsis",
        description="Bowel-sound detection with an MFCC-fed 1D CNN and Laplace HSMM refinement.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("segment", help="slice recordings into labelled windows")
    p.add_argument("--manifest", required=True, help="subject/wav/annotation TSV")
    _add_window(p)
    _add_out(p, "segment index TSV")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("featurize", help="compute 24-value MFCC summaries per window")
    p.add_argument("--manifest", required=True, help="subject/wav/annotation TSV")
    _add_window(p)
    _add_mfcc(p)
    _add_out(p, "feature cache file")
    p.set_defaults(func=cmd_featurize)

    p = sub.add_parser("train", help="train the CNN on a feature cache")
    p.add_argument("--features", required=True, help="feature cache file")
    _add_train(p)
    _add_seed(p)
    p.add_argument("--no-figures", action="store_true", help="skip the training-curve PNG")
    _add_out(p, "model file")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-segment P probabilities from a trained model")
    p.add_argument("--model", required=True, help="model file")
    p.add_argument("--features", required=True, help="feature cache file")
    _add_out(p, "probability file")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("refine", help="HSMM-refine any probability file")
    p.add_argument("--probs", required=True, help="subject/start/p TSV from any classifier")
    src = p.add_mutually_exclusive_group()
    src.add_argument("--params", help="HSMM parameter file")
    src.add_argument("--labels", help="feature cache or segment index with training labels")
    p.add_argument("--sigma", type=_positive(float), default=None,
                   help=f"Laplace scale (default {DEFAULT_SIGMA:g}, or the parameter file's)")
    p.add_argument("--save-params", help="write the parameters used to this file")
    _add_out(p, "refined label file")
    p.set_defaults(func=cmd_refine)

    p = sub.add_parser("evaluate", help="score predictions against ground truth")
    p.add_argument("--truth", required=True, help="feature cache or segment index")
    p.add_argument("--pred", required=True, help="probability or refined label file")
    p.add_argument("--out", help="directory for report.txt / report.kv")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("lopocv", help="leave-one-subject-out evaluation with refinement")
    p.add_argument("--manifest", required=True, help="subject/wav/annotation TSV")
    _add_window(p)
    _add_mfcc(p)
    _add_train(p)
    _add_seed(p)
    p.add_argument("--sigma", type=_positive(float), default=DEFAULT_SIGMA,
                   help="Laplace scale (default %(default)s)")
    p.add_argument("--sweep", type=_sigma_list, help="comma-separated sigmas to sweep, e.g. 0.1,1,5")
    p.add_argument("--jobs", type=_positive(int), default=1, help="folds run in parallel")
    p.add_argument("--no-figures", action="store_true", help="skip PNG figures")
    _add_out(p, "report directory")
    p.set_defaults(func=cmd_lopocv)

    p = sub.add_parser("synth", help="write a synthetic WAV/TSV/manifest dataset")
    p.add_argument("--spec", help="key = value spec file")
    p.add_argument("--subjects", type=_positive(int))
    p.add_argument("--duration", type=_positive(float), help="seconds per recording")
    p.add_argument("--snr-db", type=float)
    p.add_argument("--seed", type=int)
    _add_out(p, "dataset directory")
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ContractError as exc:
        print(f"peristalsis {args.command}: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (InputError, OSError) as exc:
        print(f"peristalsis {args.command}: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
