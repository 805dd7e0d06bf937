"""MFCC summary features.

Each window is framed (25 ms frames, 10 ms step at 4 kHz by default), turned
into 26 log mel-filterbank energies, decorrelated with an orthonormal DCT-II,
and the first 24 cepstral coefficients are averaged over frames.  No lifter
and no energy substitution for coefficient 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import LABEL_NAMES
from .errors import EmptyInput, InputError, NegativeFrequency, ParseError, SegmentTooShort


FRAME_WINDOWS = {"rectangular": None, "hamming": np.hamming, "hann": np.hanning}


@dataclass(frozen=True)
class MfccConfig:
    sfreq: float = 4000.0
    winlen: float = 0.025
    winstep: float = 0.01
    numcep: int = 24
    nfilt: int = 26
    nfft: int = 512
    preemph: float = 0.97
    log_floor: float = 1e-10
    # taper applied to each frame before the FFT
    frame_window: str = "rectangular"

    def __post_init__(self):
        if min(self.sfreq, self.winlen, self.winstep, self.log_floor) <= 0:
            raise InputError("sfreq, winlen, winstep and log_floor must be positive")
        if min(self.numcep, self.nfilt, self.nfft) <= 0:
            raise InputError("numcep, nfilt and nfft must be positive")
        if self.numcep > self.nfilt:
            raise InputError(f"numcep {self.numcep} exceeds nfilt {self.nfilt}")
        if self.nfft < self.frame_len:
            raise InputError(f"nfft {self.nfft} shorter than a frame ({self.frame_len})")
        if not 0.0 <= self.preemph < 1.0:
            raise InputError(f"preemph must lie in [0, 1), got {self.preemph}")
        if self.frame_window not in FRAME_WINDOWS:
            raise InputError(f"frame_window must be one of {sorted(FRAME_WINDOWS)}")

    @property
    def frame_len(self) -> int:
        return int(round(self.winlen * self.sfreq))

    @property
    def frame_step(self) -> int:
        return int(round(self.winstep * self.sfreq))


def hz_to_mel(f):
    """Mel value ``1125 ln(1 + f/700)``; accepts scalars or arrays."""
    f = np.asarray(f, dtype=np.float64)
    if np.any(f < 0):
        raise NegativeFrequency(f"negative frequency: {f.min()}")
    out = 1125.0 * np.log1p(f / 700.0)
    return float(out) if out.ndim == 0 else out


def mel_to_hz(m):
    m = np.asarray(m, dtype=np.float64)
    out = 700.0 * np.expm1(m / 1125.0)
    return float(out) if out.ndim == 0 else out


def filter_edges_hz(cfg: MfccConfig) -> np.ndarray:
    """``nfilt + 2`` band edges in Hz, equally spaced in mel from 0 to Nyquist."""
    mels = np.linspace(0.0, hz_to_mel(cfg.sfreq / 2.0), cfg.nfilt + 2)
    return mel_to_hz(mels)


def filter_bins(cfg: MfccConfig) -> np.ndarray:
    return np.floor((cfg.nfft + 1) * filter_edges_hz(cfg) / cfg.sfreq).astype(int)


@lru_cache(maxsize=16)
def _filterbank(cfg: MfccConfig) -> np.ndarray:
    bins = filter_bins(cfg)
    fb = np.zeros((cfg.nfilt, cfg.nfft // 2 + 1))
    for j in range(cfg.nfilt):
        lo, mid, hi = bins[j], bins[j + 1], bins[j + 2]
        for i in range(lo, mid):
            fb[j, i] = (i - lo) / (mid - lo)
        for i in range(mid, hi):
            fb[j, i] = (hi - i) / (hi - mid)
        if mid == hi:
            fb[j, mid] = 1.0
    fb.setflags(write=False)
    return fb


def mel_filterbank(cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Triangular filters, shape ``(nfilt, nfft // 2 + 1)``, unit peak height."""
    return _filterbank(cfg).copy()


def filter_peaks_hz(cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    return filter_bins(cfg)[1:-1] * cfg.sfreq / cfg.nfft


@lru_cache(maxsize=16)
def _dct(n: int) -> np.ndarray:
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * k * (2 * i + 1) / (2 * n)) * math.sqrt(2.0 / n)
    m[0] /= math.sqrt(2.0)
    m.setflags(write=False)
    return m


def dct_matrix(n: int) -> np.ndarray:
    """Orthonormal DCT-II matrix; row k is the k-th basis vector."""
    return _dct(n).copy()


def _as_signal(seg) -> tuple[np.ndarray, float | None]:
    if hasattr(seg, "samples"):
        return np.asarray(seg.samples, dtype=np.float64), getattr(seg, "sample_rate", None)
    return np.asarray(seg, dtype=np.float64), None


def _frames(signals: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    """Pre-emphasised frames, shape ``(batch, n_frames, frame_len)``."""
    if signals.shape[-1] < cfg.frame_len:
        raise SegmentTooShort(
            f"{signals.shape[-1]} samples, need at least {cfg.frame_len}")
    emph = signals.copy()
    if cfg.preemph:
        emph[..., 1:] = signals[..., 1:] - cfg.preemph * signals[..., :-1]
    win = sliding_window_view(emph, cfg.frame_len, axis=-1)[..., ::cfg.frame_step, :]
    taper = FRAME_WINDOWS[cfg.frame_window]
    return win if taper is None else win * taper(cfg.frame_len)


def filterbank_energies(signals, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Per-frame mel energies (before the log), shape ``(..., frames, nfilt)``."""
    frames = _frames(np.atleast_2d(np.asarray(signals, dtype=np.float64)), cfg)
    spec = np.abs(np.fft.rfft(frames, cfg.nfft)) ** 2 / cfg.nfft
    return spec @ _filterbank(cfg).T


def _cepstra(energies: np.ndarray, cfg: MfccConfig) -> np.ndarray:
    logs = np.log(np.maximum(energies, cfg.log_floor))
    return logs @ _dct(cfg.nfilt)[: cfg.numcep].T


def mfcc_frames(seg, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    """Cepstra of every frame of one window, shape ``(frames, numcep)``."""
    x, rate = _as_signal(seg)
    if rate is not None and rate != cfg.sfreq:
        cfg = replace(cfg, sfreq=float(rate))
    if x.ndim != 1:
        raise InputError("expected a 1-D signal")
    return _cepstra(filterbank_energies(x, cfg)[0], cfg)


def summarize(frames) -> np.ndarray:
    frames = np.asarray(frames, dtype=np.float64)
    if frames.ndim != 2 or frames.shape[0] == 0:
        raise EmptyInput("need at least one frame")
    return frames.mean(axis=0)


def mfcc_vector(seg, cfg: MfccConfig = MfccConfig()) -> np.ndarray:
    return summarize(mfcc_frames(seg, cfg))


def featurize(segments, cfg: MfccConfig = MfccConfig(), batch: int = 64) -> np.ndarray:
    """Summary vectors for equal-length segments, shape ``(n, numcep)``."""
    segments = list(segments)
    if not segments:
        return np.empty((0, cfg.numcep))
    rate = getattr(segments[0], "sample_rate", None)
    if rate is not None and rate != cfg.sfreq:
        cfg = replace(cfg, sfreq=float(rate))
    out = np.empty((len(segments), cfg.numcep))
    for i in range(0, len(segments), batch):
        chunk = np.stack([_as_signal(s)[0] for s in segments[i:i + batch]])
        out[i:i + len(chunk)] = _cepstra(filterbank_energies(chunk, cfg), cfg).mean(axis=1)
    return out


# ----------------------------------------------------------------------
# feature cache: subject<TAB>start<TAB>label<TAB>c0,c1,...

@dataclass
class FeatureTable:
    subject_ids: list
    starts: np.ndarray
    labels: np.ndarray
    X: np.ndarray

    def __len__(self):
        return len(self.subject_ids)

    def subset(self, mask) -> "FeatureTable":
        mask = np.asarray(mask)
        idx = np.flatnonzero(mask) if mask.dtype == bool else mask
        return FeatureTable([self.subject_ids[i] for i in idx],
                            self.starts[idx], self.labels[idx], self.X[idx])

    def subjects(self) -> list:
        return list(dict.fromkeys(self.subject_ids))

    def for_subject(self, sid) -> "FeatureTable":
        return self.subset(np.array([s == sid for s in self.subject_ids], dtype=bool))

    @classmethod
    def concat(cls, tables) -> "FeatureTable":
        tables = list(tables)
        return cls(sum((t.subject_ids for t in tables), []),
                   np.concatenate([t.starts for t in tables]),
                   np.concatenate([t.labels for t in tables]),
                   np.concatenate([t.X for t in tables]))


def featurize_recording(rec, window: float, hop: float,
                        cfg: MfccConfig = MfccConfig()) -> FeatureTable:
    from .signal_io import segment_recording

    segs = segment_recording(rec, window, hop)
    return FeatureTable([s.subject_id for s in segs],
                        np.array([s.start for s in segs]),
                        np.array([s.truth_label for s in segs], dtype=int),
                        featurize(segs, cfg))


def write_features(path, table: FeatureTable) -> None:
    lines = []
    for sid, start, lab, row in zip(table.subject_ids, table.starts, table.labels, table.X):
        coeffs = ",".join(repr(float(v)) for v in row)
        lines.append(f"{sid}\t{float(start)!r}\t{LABEL_NAMES[lab]}\t{coeffs}")
    Path(path).write_text("\n".join(lines) + ("\n" if lines else ""))


def read_features(path) -> FeatureTable:
    sids, starts, labels, rows = [], [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 4 or parts[2] not in LABEL_NAMES:
            raise ParseError("malformed feature record", lineno)
        try:
            row = [float(v) for v in parts[3].split(",")]
            start = float(parts[1])
        except ValueError:
            raise ParseError("bad number in feature record", lineno) from None
        if rows and len(row) != len(rows[0]):
            raise ParseError("inconsistent coefficient count", lineno)
        sids.append(parts[0])
        starts.append(start)
        labels.append(LABEL_NAMES.index(parts[2]))
        rows.append(row)
    width = len(rows[0]) if rows else 24
    return FeatureTable(sids, np.array(starts, dtype=float), np.array(labels, dtype=int),
                        np.array(rows, dtype=float).reshape(-1, width))
