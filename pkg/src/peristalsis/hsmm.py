"""Two-state explicit-duration HMM used to smooth per-segment P probabilities.

States alternate on every transition, so a decode is a run-length sequence
``[(label, duration), ...]``.  Emissions are Laplace densities centred on 1
(P) and 0 (NP), evaluated directly on the classifier probability.  Duration
tables are learned by counting run lengths in ground-truth label sequences
and add-one smoothing every bin up to the longest observed run.

Decoding is done in log space.  Ties are broken towards the shorter duration
and, between states, NP before P.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import LABEL_NAMES, NP, P
from .errors import (
    DegenerateConfusion,
    DurationTableMissing,
    EmptyInput,
    EmptyObservation,
    InputError,
    NonPositiveSigma,
    ParseError,
)

STATES = (NP, P)
MEANS = {NP: 0.0, P: 1.0}
DEFAULT_SIGMA = 5.0


def _clean(seq) -> np.ndarray:
    arr = np.asarray(seq).astype(int).reshape(-1)
    if arr.size == 0:
        raise EmptyInput("empty label sequence")
    if not np.all((arr == NP) | (arr == P)):
        raise InputError("labels must be 0 (NP) or 1 (P)")
    return arr


def run_lengths(labels) -> list[tuple[int, int]]:
    """``[(label, length), ...]`` for consecutive equal labels."""
    arr = np.asarray(labels).reshape(-1)
    if arr.size == 0:
        return []
    cut = np.flatnonzero(np.diff(arr)) + 1
    starts = np.concatenate(([0], cut))
    ends = np.concatenate((cut, [arr.size]))
    return [(int(arr[s]), int(e - s)) for s, e in zip(starts, ends)]


def expand_runs(runs) -> np.ndarray:
    return np.concatenate([np.full(d, j, dtype=int) for j, d in runs]) if runs else np.empty(0, int)


def learn_initial(sequences) -> dict[int, float]:
    """Share of training sequences that open in P (and the complement for NP)."""
    seqs = [_clean(s) for s in sequences]
    if not seqs:
        raise EmptyInput("no training sequences")
    pi_p = sum(int(s[0] == P) for s in seqs) / len(seqs)
    return {P: pi_p, NP: 1.0 - pi_p}


def duration_counts(sequences) -> dict[int, dict[int, int]]:
    """Raw run-length frequencies per state, the trailing run included."""
    counts: dict[int, dict[int, int]] = {NP: {}, P: {}}
    for seq in sequences:
        for label, d in run_lengths(_clean(seq)):
            counts[label][d] = counts[label].get(d, 0) + 1
    return counts


def learn_durations(sequences) -> dict[int, np.ndarray]:
    """Smoothed duration distributions; entry ``d - 1`` holds ``p_j(d)``.

    Every bin ``1..max observed duration`` gets one extra count.  A state
    that never occurs keeps a single smoothed bin at ``d = 1``.
    """
    seqs = list(sequences)
    if not seqs:
        raise EmptyInput("no training sequences")
    counts = duration_counts(seqs)
    tables = {}
    for j in STATES:
        dmax = max(counts[j], default=1)
        c = np.ones(dmax)
        for d, n in counts[j].items():
            c[d - 1] += n
        tables[j] = c / c.sum()
    return tables


def emission(x, state: int, sigma: float):
    """Laplace density ``exp(-|x - mu| / sigma) / (2 sigma)``."""
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    x = np.asarray(x, dtype=np.float64)
    out = np.exp(-np.abs(x - MEANS[state]) / sigma) / (2.0 * sigma)
    return float(out) if out.ndim == 0 else out


def laplace_log_emissions(obs, sigma: float) -> np.ndarray:
    """``(T, 2)`` log-densities, column order NP, P."""
    if not sigma > 0:
        raise NonPositiveSigma(f"sigma must be positive, got {sigma}")
    x = np.asarray(obs, dtype=np.float64).reshape(-1)
    return np.stack([-math.log(2.0 * sigma) - np.abs(x - MEANS[j]) / sigma for j in STATES], axis=1)


def conventional_emission(confusion) -> np.ndarray:
    """Discrete emission matrix from a training confusion matrix.

    ``confusion[true, predicted]`` with index order NP, P.  Returns ``E``
    with ``E[obs, state] = 100 * C[state, obs] / sum_obs C[state, obs]``;
    each state's column sums to 100.
    """
    C = np.asarray(confusion, dtype=np.float64)
    if C.shape != (2, 2) or np.any(C < 0):
        raise InputError("confusion matrix must be a non-negative 2x2 array")
    if np.any(C.sum(axis=1) <= 0) or np.any(C.sum(axis=0) <= 0):
        raise DegenerateConfusion(f"confusion matrix has an empty row or column: {C.tolist()}")
    return (C * 100.0 / C.sum(axis=1, keepdims=True)).T


EMISSION_FLOOR = 1e-12


def discrete_log_emissions(obs, E, threshold: float = 0.5,
                           floor: float = EMISSION_FLOOR) -> np.ndarray:
    """Log emissions read from ``E / 100``; an observation counts as P above ``threshold``.

    Entries below ``floor`` are raised to it: a classifier that never erred on
    its training data would otherwise forbid every sequence that disagrees
    with its thresholded output (including runs longer than any seen).
    Pass ``floor=0`` for the unfloored matrix.
    """
    E = np.asarray(E, dtype=np.float64) / 100.0
    x = np.asarray(obs, dtype=np.float64).reshape(-1)
    sym = (x > threshold).astype(int)
    with np.errstate(divide="ignore"):
        return np.log(np.maximum(E[sym], floor))


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


@dataclass(eq=False)
class HsmmParams:
    pi: dict
    durations: dict
    sigma: float = DEFAULT_SIGMA
    trans: np.ndarray = field(default_factory=lambda: np.array([[0.0, 1.0], [1.0, 0.0]]))
    mu: dict = field(default_factory=lambda: dict(MEANS))

    def __post_init__(self):
        if not self.sigma > 0:
            raise NonPositiveSigma(f"sigma must be positive, got {self.sigma}")
        pi = {int(k): float(v) for k, v in self.pi.items()}
        if set(pi) != {NP, P} or min(pi.values()) < 0 or abs(sum(pi.values()) - 1) > 1e-9:
            raise InputError(f"initial distribution must cover NP and P and sum to 1: {pi}")
        self.pi = pi
        tables = {}
        for j in STATES:
            if j not in self.durations or len(self.durations[j]) == 0:
                raise DurationTableMissing(f"no duration table for state {LABEL_NAMES[j]}")
            t = np.asarray(self.durations[j], dtype=np.float64)
            if np.any(t < 0) or abs(t.sum() - 1) > 1e-9:
                raise InputError(f"duration table for {LABEL_NAMES[j]} is not a distribution")
            tables[j] = t
        self.durations = tables
        self.trans = np.asarray(self.trans, dtype=np.float64)
        if not np.array_equal(self.trans, [[0.0, 1.0], [1.0, 0.0]]):
            raise InputError("transitions must alternate states (zero diagonal)")

    @property
    def max_duration(self) -> int:
        return max(len(t) for t in self.durations.values())

    def with_sigma(self, sigma: float) -> "HsmmParams":
        return HsmmParams(self.pi, self.durations, sigma)


def learn_params(sequences, sigma: float = DEFAULT_SIGMA) -> HsmmParams:
    seqs = [_clean(s) for s in sequences]
    return HsmmParams(learn_initial(seqs), learn_durations(seqs), sigma)


@dataclass(eq=False)
class StateSequence:
    runs: list
    log_likelihood: float

    def labels(self) -> np.ndarray:
        return expand_runs(self.runs)

    def __len__(self):
        return sum(d for _, d in self.runs)


def decode(log_emis, params: HsmmParams) -> StateSequence:
    """Max-probability run-length sequence for precomputed ``(T, 2)`` log emissions.

    ``delta[t, j]`` is the best log-probability of a run sequence covering the
    first ``t`` observations whose last run is in ``j``.  The first run may
    take any duration; later runs follow the opposite state.
    """
    le = np.asarray(log_emis, dtype=np.float64)
    T = le.shape[0]
    if T == 0:
        raise EmptyObservation("no observations to decode")
    log_pi = {j: _log(params.pi[j]) for j in STATES}
    log_dur = {j: _log(params.durations[j]) for j in STATES}
    # cum[t, j] = sum of log emissions over observations 0..t-1; impossible
    # observations (log 0) are counted apart so that differences stay finite
    impossible = np.isneginf(le)
    cum = np.vstack([np.zeros((1, 2)), np.cumsum(np.where(impossible, 0.0, le), axis=0)])
    n_imp = np.vstack([np.zeros((1, 2), dtype=int), np.cumsum(impossible, axis=0)])

    delta = np.full((T + 1, 2), -np.inf)
    back_d = np.zeros((T + 1, 2), dtype=int)
    for t in range(1, T + 1):
        for j in STATES:
            dmax = min(len(log_dur[j]), t)
            d = np.arange(1, dmax + 1)
            prev = t - d
            emit = np.where(n_imp[t, j] > n_imp[prev, j], -np.inf, cum[t, j] - cum[prev, j])
            # the predecessor is forced to the other state; prev == 0 means this is the first run
            before = np.where(prev == 0, log_pi[j], delta[prev, 1 - j])
            score = before + log_dur[j][:dmax] + emit
            k = int(np.argmax(score))  # first maximum -> shortest duration
            delta[t, j] = score[k]
            back_d[t, j] = d[k]

    j = NP if delta[T, NP] >= delta[T, P] else P
    best = float(delta[T, j])
    if best == -np.inf:
        raise InputError("no run-length sequence has non-zero probability under these parameters")
    runs, t = [], T
    while t > 0:
        d = int(back_d[t, j])
        runs.append((j, d))
        t -= d
        j = 1 - j
    runs.reverse()
    return StateSequence(runs, best)


def viterbi_refine(obs, params: HsmmParams, emission_matrix=None) -> StateSequence:
    """Refine a probability sequence (array or :class:`ProbSequence`).

    With ``emission_matrix`` set, the conventional discrete emissions of
    :func:`conventional_emission` replace the Laplace densities.
    """
    x = np.asarray(getattr(obs, "probs", obs), dtype=np.float64).reshape(-1)
    if x.size == 0:
        raise EmptyObservation("no observations to decode")
    if emission_matrix is None:
        le = laplace_log_emissions(x, params.sigma)
    else:
        le = discrete_log_emissions(x, emission_matrix)
    return decode(le, params)


def sequence_log_likelihood(runs, log_emis, params: HsmmParams) -> float:
    """Joint log-probability of one run-length sequence (used by the oracle)."""
    le = np.asarray(log_emis, dtype=np.float64)
    total, t = 0.0, 0
    for n, (j, d) in enumerate(runs):
        if n == 0:
            total += _log(params.pi[j])
        elif runs[n - 1][0] == j:
            return -math.inf
        table = params.durations[j]
        if d < 1 or d > len(table):
            return -math.inf
        total += _log(table[d - 1]) + le[t:t + d, j].sum()
        t += d
    if t != len(le):
        raise InputError("runs do not cover the observation sequence")
    return float(total)


# ----------------------------------------------------------------------
# parameter file
#
#   [pi]
#   NP <p>
#   P <p>
#   [sigma]
#   <sigma>
#   [durations]
#   P <d> <p>
#   NP <d> <p>

def format_params(params: HsmmParams) -> str:
    lines = ["[pi]"]
    for j in STATES:
        lines.append(f"{LABEL_NAMES[j]} {params.pi[j]!r}")
    lines += ["[sigma]", repr(float(params.sigma)), "[durations]"]
    for j in STATES:
        for d, p in enumerate(params.durations[j], start=1):
            lines.append(f"{LABEL_NAMES[j]} {d} {float(p)!r}")
    return "\n".join(lines) + "\n"


def parse_params(text: str) -> HsmmParams:
    section, pi, sigma, durs = None, {}, None, {NP: {}, P: {}}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            continue
        parts = line.split()
        try:
            if section == "pi" and len(parts) == 2 and parts[0] in LABEL_NAMES:
                pi[LABEL_NAMES.index(parts[0])] = float(parts[1])
            elif section == "sigma" and len(parts) == 1:
                sigma = float(parts[0])
            elif section == "durations" and len(parts) == 3 and parts[0] in LABEL_NAMES:
                durs[LABEL_NAMES.index(parts[0])][int(parts[1])] = float(parts[2])
            else:
                raise ParseError(f"unexpected line in section [{section}]", lineno)
        except ValueError as exc:
            if isinstance(exc, ParseError):
                raise
            raise ParseError(f"bad number: {line!r}", lineno) from None
    if sigma is None:
        raise ParseError("missing [sigma] section")
    tables = {}
    for j in STATES:
        if not durs[j]:
            raise DurationTableMissing(f"no duration table for state {LABEL_NAMES[j]}")
        dmax = max(durs[j])
        if sorted(durs[j]) != list(range(1, dmax + 1)):
            raise ParseError(f"duration table for {LABEL_NAMES[j]} must list d = 1..{dmax}")
        tables[j] = np.array([durs[j][d] for d in range(1, dmax + 1)])
    return HsmmParams(pi, tables, sigma)


def save_params(path, params: HsmmParams) -> None:
    Path(path).write_text(format_params(params))


def load_params(path) -> HsmmParams:
    return parse_params(Path(path).read_text())
