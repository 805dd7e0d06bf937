"""Recording ingestion, windowing and segment labelling.

File formats
------------
WAV
    RIFF/WAVE, mono, PCM 8/16/24/32-bit integer or 32-bit float.
Annotation TSV
    ``onset<TAB>offset<TAB>label`` per line, seconds, label one of
    ``bowel``, ``heart``, ``noise``, ``other``.  ``#`` lines are comments.
Manifest TSV
    ``subject_id<TAB>wav_path<TAB>annotation_path``; relative paths are
    resolved against the manifest's directory.
Segment index TSV
    ``subject_id<TAB>start<TAB>length<TAB>label`` with a ``#`` header.
"""

from __future__ import annotations

import enum
import logging
import math
import struct
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.io import wavfile

from . import LABEL_NAMES, NP, P
from .errors import (
    CorruptHeader,
    InputError,
    InvertedInterval,
    ParseError,
    UnsupportedFormat,
    WindowTooLong,
)

log = logging.getLogger(__name__)

EXPECTED_RATE = 4000
DEFAULT_WINDOW = 6.0
DEFAULT_HOP = 0.1
_EPS = 1e-9


class Category(enum.Enum):
    BowelSound = "bowel"
    HeartSound = "heart"
    Noise = "noise"
    Other = "other"


@dataclass(frozen=True)
class LabeledInterval:
    onset: float
    offset: float
    label: Category = Category.BowelSound

    def __post_init__(self):
        if not self.onset < self.offset:
            raise InvertedInterval(
                f"onset {self.onset} is not before offset {self.offset}")


@dataclass(frozen=True, eq=False)
class Recording:
    subject_id: str
    samples: np.ndarray
    sample_rate: int
    annotations: tuple = field(default_factory=tuple)

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise InputError("recording needs a non-empty mono sample array")
        if self.sample_rate <= 0:
            raise InputError(f"sample rate must be positive, got {self.sample_rate}")
        samples.setflags(write=False)
        object.__setattr__(self, "samples", samples)
        anns = tuple(sorted(self.annotations, key=lambda a: (a.onset, a.offset)))
        for a in anns:
            if a.onset < -_EPS or a.offset > self.duration + _EPS:
                raise InputError(
                    f"annotation [{a.onset}, {a.offset}] outside recording "
                    f"of {self.duration:.3f} s")
        object.__setattr__(self, "annotations", anns)

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True, eq=False)
class Segment:
    subject_id: str
    start: float
    length: float
    samples: np.ndarray
    truth_label: int
    sample_rate: int = EXPECTED_RATE

    @property
    def end(self) -> float:
        return self.start + self.length


# ----------------------------------------------------------------------
# WAV

def _normalize(data: np.ndarray) -> np.ndarray:
    kind, size = data.dtype.kind, data.dtype.itemsize
    if kind == "u" and size == 1:
        return (data.astype(np.float64) - 128.0) / 128.0
    if kind == "i":
        # scipy left-aligns 24-bit samples in int32, so the full int range applies
        return data.astype(np.float64) / float(2 ** (8 * size - 1))
    if kind == "f":
        return np.clip(data.astype(np.float64), -1.0, 1.0)
    raise UnsupportedFormat(f"unsupported sample type {data.dtype}")


def load_wav(path, subject_id: str | None = None) -> Recording:
    """Read a mono WAV file into a :class:`Recording` with samples in [-1, 1]."""
    path = Path(path)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", wavfile.WavFileWarning)
            rate, data = wavfile.read(path)
    except FileNotFoundError:
        raise
    except ValueError as exc:
        msg = str(exc)
        if "Unknown wave file format" in msg or "Unsupported bit depth" in msg:
            raise UnsupportedFormat(f"{path}: {msg}") from exc
        raise CorruptHeader(f"{path}: {msg}") from exc
    except (EOFError, OSError, struct.error, UnboundLocalError) as exc:
        # scipy surfaces some truncated headers as struct or unbound-name errors
        raise CorruptHeader(f"{path}: {exc}") from exc
    if data.ndim != 1:
        raise UnsupportedFormat(f"{path}: {data.shape[1]} channels, expected mono")
    if data.size == 0:
        raise CorruptHeader(f"{path}: no audio frames")
    if rate != EXPECTED_RATE:
        log.warning("%s: sample rate %d Hz (expected %d)", path, rate, EXPECTED_RATE)
    return Recording(subject_id or path.stem, _normalize(data), int(rate))


def write_wav(path, samples, sample_rate: int) -> None:
    """Write 16-bit PCM with the reader's scale (full scale 32768, +1.0 saturates)."""
    x = np.asarray(samples, dtype=np.float64)
    pcm = np.clip(np.round(x * 32768.0), -32768, 32767).astype("<i2")
    wavfile.write(path, int(sample_rate), pcm)


# ----------------------------------------------------------------------
# annotations and manifests

_LABELS = {c.value: c for c in Category}


def parse_annotations(text: str) -> list[LabeledInterval]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError(f"expected 3 tab-separated fields, got {len(parts)}", lineno)
        try:
            onset, offset = float(parts[0]), float(parts[1])
        except ValueError:
            raise ParseError(f"bad time value in {line!r}", lineno) from None
        if not (math.isfinite(onset) and math.isfinite(offset)):
            raise ParseError("non-finite time", lineno)
        label = _LABELS.get(parts[2].strip().lower())
        if label is None:
            raise ParseError(f"unknown label {parts[2]!r}", lineno)
        if onset >= offset:
            raise InvertedInterval(f"line {lineno}: onset {onset} >= offset {offset}")
        out.append(LabeledInterval(onset, offset, label))
    out.sort(key=lambda a: (a.onset, a.offset))
    return out


def load_annotations(path) -> list[LabeledInterval]:
    return parse_annotations(Path(path).read_text())


def format_annotations(intervals) -> str:
    lines = ["# onset\toffset\tlabel"]
    for a in intervals:
        lines.append(f"{a.onset!r}\t{a.offset!r}\t{a.label.value}")
    return "\n".join(lines) + "\n"


def write_annotations(path, intervals) -> None:
    Path(path).write_text(format_annotations(intervals))


@dataclass(frozen=True)
class ManifestEntry:
    subject_id: str
    wav_path: Path
    annotation_path: Path


def read_manifest(path) -> list[ManifestEntry]:
    path = Path(path)
    if not path.is_file():
        raise InputError(f"manifest not found: {path}")
    base = path.parent
    entries = []
    for lineno, raw in enumerate(path.read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 3:
            raise ParseError("expected subject_id, wav_path, annotation_path", lineno)
        sid, wav, ann = parts
        entries.append(ManifestEntry(sid, base / wav, base / ann))
    ids = [e.subject_id for e in entries]
    if len(set(ids)) != len(ids):
        raise InputError(f"{path}: duplicate subject ids")
    return entries


def write_manifest(path, entries) -> None:
    path = Path(path)
    lines = ["# subject_id\twav_path\tannotation_path"]
    for e in entries:
        wav = os.path.relpath(e.wav_path, path.parent)
        ann = os.path.relpath(e.annotation_path, path.parent)
        lines.append(f"{e.subject_id}\t{wav}\t{ann}")
    path.write_text("\n".join(lines) + "\n")


def load_recording(entry: ManifestEntry) -> Recording:
    for p in (entry.wav_path, entry.annotation_path):
        if not Path(p).is_file():
            raise InputError(f"{entry.subject_id}: missing file {p}")
    rec = load_wav(entry.wav_path, entry.subject_id)
    anns = load_annotations(entry.annotation_path)
    return Recording(rec.subject_id, rec.samples, rec.sample_rate, tuple(anns))


def load_dataset(manifest) -> list[Recording]:
    return [load_recording(e) for e in read_manifest(manifest)]


# ----------------------------------------------------------------------
# windowing

def segment_count(duration: float, window: float, hop: float) -> int:
    """Number of windows: ``floor((duration - window) / hop) + 1``."""
    if hop <= 0:
        raise InputError(f"hop must be positive, got {hop}")
    if window > duration + _EPS:
        raise WindowTooLong(f"window {window} s exceeds recording of {duration} s")
    return int(math.floor((duration - window) / hop + _EPS)) + 1


def label_segment(start: float, end: float, annotations) -> int:
    """P when the window overlaps any bowel-sound interval by more than zero."""
    for a in annotations:
        if a.label is not Category.BowelSound:
            continue
        if a.onset >= end:
            break
        if min(end, a.offset) - max(start, a.onset) > 0:
            return P
    return NP


def segment_recording(rec: Recording, window: float = DEFAULT_WINDOW,
                      hop: float = DEFAULT_HOP) -> list[Segment]:
    if window <= 0:
        raise InputError(f"window must be positive, got {window}")
    n = segment_count(rec.duration, window, hop)
    sr = rec.sample_rate
    width = int(round(window * sr))
    out = []
    for i in range(n):
        start = round(i * hop, 10)
        s0 = int(round(start * sr))
        # float rounding can push the final window a sample past the end
        s0 = min(s0, rec.samples.size - width)
        out.append(Segment(
            subject_id=rec.subject_id,
            start=start,
            length=window,
            samples=rec.samples[s0:s0 + width],
            truth_label=label_segment(start, start + window, rec.annotations),
            sample_rate=sr,
        ))
    return out


def write_segment_index(path, segments) -> None:
    lines = ["# subject_id\tstart\tlength\tlabel"]
    for s in segments:
        lines.append(f"{s.subject_id}\t{s.start!r}\t{s.length!r}\t{LABEL_NAMES[s.truth_label]}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_segment_index(path) -> list[tuple[str, float, float, int]]:
    rows = []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        if not raw.strip() or raw.startswith("#"):
            continue
        parts = raw.split("\t")
        if len(parts) != 4 or parts[3] not in LABEL_NAMES:
            raise ParseError("malformed segment index row", lineno)
        rows.append((parts[0], float(parts[1]), float(parts[2]), LABEL_NAMES.index(parts[3])))
    return rows
