"""Seeded synthetic data with known ground truth.

Two levels:

* observation level: alternating P/NP runs drawn from duration tables, with
  each observation ``mu_state + Laplace(0, obs_sigma)`` clamped to [0, 1];
* audio level: band-limited noise bursts (the P runs) over white background
  noise at a given SNR, written as WAV + annotation TSV + manifest.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields, replace
from pathlib import Path

import numpy as np

from . import NP, P
from .cnn import ProbSequence
from .errors import InputError, ParseError
from .signal_io import (
    Category,
    LabeledInterval,
    ManifestEntry,
    Recording,
    write_annotations,
    write_manifest,
    write_wav,
)

BURST_RMS = 0.25


def uniform_table(lo: int, hi: int) -> tuple:
    """Duration distribution uniform on ``lo..hi`` (index ``d - 1`` holds p(d))."""
    if not 1 <= lo <= hi:
        raise InputError(f"need 1 <= lo <= hi, got {lo}, {hi}")
    return tuple(0.0 if d < lo else 1.0 / (hi - lo + 1) for d in range(1, hi + 1))


@dataclass(frozen=True)
class SynthSpec:
    subjects: int = 8
    duration: float = 60.0
    dur_p: tuple = uniform_table(10, 60)
    dur_np: tuple = uniform_table(3, 15)
    pi_p: float = 0.7
    burst_band: tuple = (100.0, 500.0)
    snr_db: float = 10.0
    obs_sigma: float = 0.3
    seed: int = 0
    sample_rate: int = 4000
    # seconds per duration unit when the tables drive audio synthesis
    time_unit: float = 1.0
    # None: each P period is one continuous burst.  Otherwise P periods hold
    # trains of short events with these (lo, hi) ranges: length and gap in
    # seconds, gain in dB relative to full burst level.
    event_len: tuple | None = None
    event_gap: tuple = (0.5, 3.0)
    event_gain_db: tuple = (0.0, 0.0)

    def __post_init__(self):
        for name in ("dur_p", "dur_np"):
            t = np.asarray(getattr(self, name), dtype=np.float64)
            if t.ndim != 1 or t.size == 0 or np.any(t < 0) or abs(t.sum() - 1) > 1e-9:
                raise InputError(f"{name} must be a probability table over d = 1..D")
            object.__setattr__(self, name, tuple(float(v) for v in t))
        if not 0.0 <= self.pi_p <= 1.0:
            raise InputError(f"pi_p must lie in [0, 1], got {self.pi_p}")
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise InputError("snr_db must be a number (use inf for noiseless audio)")
        lo, hi = self.burst_band
        if not 0 <= lo < hi <= self.sample_rate / 2:
            raise InputError(f"burst band {self.burst_band} must lie inside [0, Nyquist]")
        if min(self.subjects, self.duration, self.sample_rate, self.time_unit) <= 0:
            raise InputError("subjects, duration, sample_rate and time_unit must be positive")
        if self.obs_sigma < 0:
            raise InputError("obs_sigma must be non-negative")
        if self.event_len is not None:
            object.__setattr__(self, "event_len", tuple(float(v) for v in self.event_len))
            for name in ("event_len", "event_gap", "event_gain_db"):
                lo, hi = getattr(self, name)
                if lo > hi:
                    raise InputError(f"{name} must be a (lo, hi) pair with lo <= hi")
            if self.event_len[0] <= 0 or self.event_gap[0] < 0:
                raise InputError("event lengths must be positive and gaps non-negative")

    @classmethod
    def audio_benchmark(cls, **kw) -> "SynthSpec":
        """Eight subjects whose P periods are trains of short clicks of varying loudness."""
        base = dict(subjects=8, duration=60.0, dur_p=uniform_table(10, 25),
                    dur_np=uniform_table(8, 20), pi_p=0.5, time_unit=1.0, snr_db=10.0,
                    event_len=(0.1, 0.6), event_gap=(0.5, 6.0), event_gain_db=(-15.0, 0.0))
        base.update(kw)
        return cls(**base)


def _rng(seed, *stream):
    head = list(np.atleast_1d(seed).astype(int))
    return np.random.default_rng(head + [int(v) for v in stream])


def gen_state_sequence(spec: SynthSpec, length: int, seed=None, rng=None) -> np.ndarray:
    """Alternating runs with durations drawn from the SynthSpec tables, cut to ``length``."""
    if length < 0:
        raise InputError("length must be non-negative")
    if rng is None:
        rng = _rng(spec.seed if seed is None else seed)
    tables = {NP: np.asarray(spec.dur_np), P: np.asarray(spec.dur_p)}
    out = np.empty(length, dtype=int)
    state = P if rng.random() < spec.pi_p else NP
    t = 0
    while t < length:
        tab = tables[state]
        d = int(rng.choice(tab.size, p=tab)) + 1
        out[t:t + d] = state
        t += d
        state = 1 - state
    return out


def gen_observations(labels, obs_sigma: float, seed=0, hop: float = 0.1,
                     subject_id: str = "") -> ProbSequence:
    labels = np.asarray(labels).astype(int)
    rng = _rng(seed)
    mu = labels.astype(np.float64)
    noise = rng.laplace(0.0, obs_sigma, labels.size) if obs_sigma > 0 else np.zeros(labels.size)
    obs = np.clip(mu + noise, 0.0, 1.0)
    return ProbSequence(subject_id, np.round(np.arange(labels.size) * hop, 10), obs)


def _band_noise(n, rate, band, rng) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / rate)
    spec[(freqs < band[0]) | (freqs > band[1])] = 0.0
    x = np.fft.irfft(spec, n)
    rms = np.sqrt(np.mean(x ** 2))
    return x / rms if rms > 0 else x


def _taper(n) -> np.ndarray:
    """Tukey-style envelope: cosine ramps over the outer 10 % at each side."""
    if n < 3:
        return np.ones(n)
    w = np.ones(n)
    r = max(1, int(0.1 * n))
    ramp = 0.5 * (1 - np.cos(np.pi * (np.arange(r) + 0.5) / r))
    w[:r] = ramp
    w[-r:] = ramp[::-1]
    return w


def gen_audio(spec: SynthSpec, index: int = 0) -> Recording:
    """One synthetic recording; bursts are annotated as bowel sounds."""
    rng = _rng(spec.seed, 1, index)
    rate = spec.sample_rate
    n = int(round(spec.duration * rate))
    units = int(math.ceil(spec.duration / spec.time_unit))
    states = gen_state_sequence(spec, units, rng=rng)

    signal = np.zeros(n)
    intervals = []
    for start_u, end_u in _p_spans(states):
        for t0, t1, gain in _events(start_u * spec.time_unit, end_u * spec.time_unit, spec, rng):
            s0 = int(round(t0 * rate))
            s1 = min(n, int(round(t1 * rate)))
            if s1 - s0 < 2:
                continue
            burst = _band_noise(s1 - s0, rate, spec.burst_band, rng) * _taper(s1 - s0)
            signal[s0:s1] += gain * BURST_RMS * burst
            intervals.append(LabeledInterval(s0 / rate, s1 / rate, Category.BowelSound))

    if math.isfinite(spec.snr_db):
        noise_rms = BURST_RMS / 10 ** (spec.snr_db / 20.0)
        signal += noise_rms * rng.standard_normal(n)
    peak = np.max(np.abs(signal))
    if peak > 1.0:
        signal /= peak
    return Recording(f"S{index + 1:02d}", signal, rate, tuple(intervals))


def _events(t0: float, t1: float, spec: SynthSpec, rng) -> list[tuple[float, float, float]]:
    """Sound events ``(onset, offset, gain)`` inside one P period ``[t0, t1)``."""
    if spec.event_len is None:
        return [(t0, t1, 1.0)]
    out, t = [], t0
    while t < t1:
        end = min(t1, t + rng.uniform(*spec.event_len))
        gain = 10 ** (rng.uniform(*spec.event_gain_db) / 20.0)
        out.append((t, end, gain))
        t = end + rng.uniform(*spec.event_gap)
    return out


def _p_spans(states):
    spans, t = [], 0
    arr = np.asarray(states)
    while t < arr.size:
        e = t
        while e < arr.size and arr[e] == arr[t]:
            e += 1
        if arr[t] == P:
            spans.append((t, e))
        t = e
    return spans


def gen_dataset(spec: SynthSpec) -> list[Recording]:
    return [gen_audio(spec, i) for i in range(spec.subjects)]


def write_dataset(spec: SynthSpec, out_dir) -> Path:
    """Write WAV, annotation TSV and ``manifest.tsv``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for rec in gen_dataset(spec):
        wav, ann = out / f"{rec.subject_id}.wav", out / f"{rec.subject_id}.tsv"
        write_wav(wav, rec.samples, rec.sample_rate)
        write_annotations(ann, rec.annotations)
        entries.append(ManifestEntry(rec.subject_id, wav, ann))
    manifest = out / "manifest.tsv"
    write_manifest(manifest, entries)
    (out / "spec.txt").write_text(format_spec(spec))
    return manifest


# ----------------------------------------------------------------------
# spec file: "key = value", tuples comma-separated

def format_spec(spec: SynthSpec) -> str:
    lines = []
    for f in fields(spec):
        v = getattr(spec, f.name)
        text = ",".join(repr(float(x)) for x in v) if isinstance(v, tuple) else repr(v)
        lines.append(f"{f.name} = {text}")
    return "\n".join(lines) + "\n"


def parse_spec(text: str, base: SynthSpec | None = None) -> SynthSpec:
    base = base or SynthSpec()
    kinds = {f.name: type(getattr(base, f.name)) for f in fields(base)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError("expected 'key = value'", lineno)
        key, val = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ParseError(f"unknown key {key!r}", lineno)
        try:
            if val == "None":
                values[key] = None
            elif kinds[key] is tuple or key == "event_len":
                values[key] = tuple(float(x) for x in val.split(","))
            elif kinds[key] is int:
                values[key] = int(val)
            else:
                values[key] = float(val)
        except ValueError:
            raise ParseError(f"bad value for {key}: {val!r}", lineno) from None
    return replace(base, **values)


def load_spec(path, base: SynthSpec | None = None) -> SynthSpec:
    return parse_spec(Path(path).read_text(), base)
