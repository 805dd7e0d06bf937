"""Classification metrics with P as the positive class."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import NP, P
from .errors import LengthMismatch, SingleClassTruth


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn,
                               self.fp + other.fp, self.fn + other.fn)

    def matrix(self) -> np.ndarray:
        """``[true, predicted]`` with index order NP, P."""
        return np.array([[self.tn, self.fp], [self.fn, self.tp]])


def confusion(truth, pred) -> ConfusionCounts:
    t = np.asarray(truth).astype(int)
    p = np.asarray(pred).astype(int)
    if t.shape != p.shape:
        raise LengthMismatch(f"{t.size} truth labels vs {p.size} predictions")
    return ConfusionCounts(tp=int(np.sum((t == P) & (p == P))),
                           tn=int(np.sum((t == NP) & (p == NP))),
                           fp=int(np.sum((t == NP) & (p == P))),
                           fn=int(np.sum((t == P) & (p == NP))))


def _ratio(num, den):
    return num / den if den else 0.0


def f1_score(precision: float, recall: float) -> float:
    return _ratio(2.0 * precision * recall, precision + recall)


def roc_curve(truth, scores) -> tuple[np.ndarray, np.ndarray]:
    """False/true positive rates at every distinct score threshold.

    Tied scores move the curve diagonally, which the trapezoid rule turns
    into half credit.
    """
    t = np.asarray(truth).astype(int)
    s = np.asarray(scores, dtype=np.float64)
    pos, neg = int(np.sum(t == P)), int(np.sum(t == NP))
    if pos == 0 or neg == 0:
        raise SingleClassTruth("ROC needs both classes in the truth labels")
    order = np.argsort(-s, kind="mergesort")
    s, t = s[order], t[order]
    last = np.r_[np.flatnonzero(np.diff(s)), s.size - 1]
    tps = np.cumsum(t == P)[last]
    fps = np.cumsum(t == NP)[last]
    return np.r_[0.0, fps / neg], np.r_[0.0, tps / pos]


def auc_score(truth, scores) -> float:
    fpr, tpr = roc_curve(truth, scores)
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))


@dataclass(frozen=True)
class ClassReport:
    rec: float
    pre: float
    f1: float


@dataclass(frozen=True)
class MetricReport:
    acc: float
    auc: float | None
    ma_f1: float
    wt_f1: float
    np_: ClassReport
    p: ClassReport
    counts: ConfusionCounts

    def as_dict(self) -> dict:
        return {
            "acc": self.acc, "auc": self.auc, "ma_f1": self.ma_f1, "wt_f1": self.wt_f1,
            "np_rec": self.np_.rec, "np_pre": self.np_.pre, "np_f1": self.np_.f1,
            "p_rec": self.p.rec, "p_pre": self.p.pre, "p_f1": self.p.f1,
            **asdict(self.counts),
        }


def report_from_counts(c: ConfusionCounts, auc: float | None = None) -> MetricReport:
    p_pre, p_rec = _ratio(c.tp, c.tp + c.fp), _ratio(c.tp, c.tp + c.fn)
    n_pre, n_rec = _ratio(c.tn, c.tn + c.fn), _ratio(c.tn, c.tn + c.fp)
    p_cls = ClassReport(p_rec, p_pre, f1_score(p_pre, p_rec))
    n_cls = ClassReport(n_rec, n_pre, f1_score(n_pre, n_rec))
    supp_p, supp_n = c.tp + c.fn, c.tn + c.fp
    return MetricReport(
        acc=_ratio(c.tp + c.tn, c.total),
        auc=auc,
        ma_f1=(p_cls.f1 + n_cls.f1) / 2.0,
        wt_f1=_ratio(p_cls.f1 * supp_p + n_cls.f1 * supp_n, c.total),
        np_=n_cls,
        p=p_cls,
        counts=c,
    )


def compute_metrics(truth, pred, scores=None) -> MetricReport:
    """Full metric suite.  AUC is ``None`` when the truth holds one class only."""
    truth = np.asarray(truth).astype(int)
    pred = np.asarray(pred).astype(int)
    if truth.shape != pred.shape:
        raise LengthMismatch(f"{truth.size} truth labels vs {pred.size} predictions")
    scores = pred if scores is None else np.asarray(scores, dtype=np.float64)
    if scores.shape != truth.shape:
        raise LengthMismatch(f"{truth.size} truth labels vs {scores.size} scores")
    try:
        auc = auc_score(truth, scores)
    except SingleClassTruth:
        auc = None
    return report_from_counts(confusion(truth, pred), auc)


COLUMNS = ("ACC", "AUC", "MA_F1", "WT_F1", "NP_REC", "NP_PRE", "NP_F1", "P_REC", "P_PRE", "P_F1")


def table_row(r: MetricReport) -> list:
    return [r.acc, r.auc, r.ma_f1, r.wt_f1, r.np_.rec, r.np_.pre, r.np_.f1, r.p.rec, r.p.pre, r.p.f1]


def format_table(rows: dict) -> str:
    """Fixed-width table, one line per named report, Table-IV column order."""
    name_w = max([6] + [len(k) for k in rows])
    head = "Method".ljust(name_w) + "".join(f"{c:>8}" for c in COLUMNS)
    lines = [head, "-" * len(head)]
    for name, r in rows.items():
        cells = "".join(f"{'n/a':>8}" if v is None else f"{v:8.4f}" for v in table_row(r))
        lines.append(name.ljust(name_w) + cells)
    return "\n".join(lines) + "\n"


def format_keyvalue(reports: dict) -> str:
    """``<report>.<metric> = <value>`` lines; absent AUC is written as ``nan``."""
    lines = []
    for name, r in reports.items():
        for k, v in r.as_dict().items():
            lines.append(f"{name}.{k} = {'nan' if v is None else repr(v)}")
    return "\n".join(lines) + "\n"
