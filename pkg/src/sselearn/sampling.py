"""Sequence sampling: stretch-augmented pairs, mining candidates, eval ngrams, topline pairs."""
from __future__ import annotations

import csv
import math
import zlib
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy.signal import correlate

from .corpus import PhonemeAlignment, SpeechInterval, VASegment, Waveform
from .errors import DataError, FormatError
from .features import FeatureSequence, FeatureStore, compute_mfcc

PROVENANCES = ("stretch", "mined", "topline")


@dataclass
class StretchConfig:
    factor_min: float = 0.5
    factor_max: float = 1.8
    min_len_s: float = 0.08
    max_len_s: float = 1.0
    grid_s: float = 0.08
    # stretch only the second variant, keeping the first at its natural rate
    pin_first: bool = False
    pairs_per_segment: int = 8
    # independent variant pairs drawn per segment for pretraining
    rounds: int = 2

    def __post_init__(self):
        if not 0 < self.factor_min <= self.factor_max:
            raise ValueError("need 0 < factor_min <= factor_max")
        if not 0 < self.min_len_s <= self.max_len_s:
            raise ValueError("need 0 < min_len_s <= max_len_s")

    def grid_frames(self, r: float) -> int:
        return max(1, int(round(self.grid_s * r)))


@dataclass(frozen=True)
class FrameSpan:
    seq_ref: str
    s: int
    e: int

    def __post_init__(self):
        if not 0 <= self.s < self.e:
            raise ValueError(f"invalid frame span {self}")

    @property
    def length(self) -> int:
        return self.e - self.s


@dataclass(frozen=True)
class PositivePair:
    """Two spans presumed to share phonetic content.

    ``a``/``b`` locate the spans in corpus time (what gets written to CSV).
    ``span_a``/``span_b`` override the frame lookup when the spans live in an
    augmented variant rather than in the original file features.
    """

    a: SpeechInterval
    b: SpeechInterval
    provenance: str
    distance: float | None = None
    span_a: FrameSpan | None = None
    span_b: FrameSpan | None = None

    def frame_spans(self, store: FeatureStore) -> tuple[FrameSpan, FrameSpan]:
        def resolve(iv, span):
            if span is not None:
                return span
            s, e = store.frames_of(iv)
            return FrameSpan(iv.file_id, s, e)

        return resolve(self.a, self.span_a), resolve(self.b, self.span_b)


@dataclass(frozen=True)
class NgramToken:
    interval: SpeechInterval
    transcription: tuple[str, ...]


def segment_rng(seed: int, file_id: str, index: int) -> np.random.Generator:
    """Independent stream per (seed, file, segment), stable across processes."""
    return np.random.default_rng([seed, zlib.crc32(file_id.encode()), index])


# ----------------------------------------------------------------------------
# time stretching


def time_stretch_waveform(
    w: Waveform, factor: float, window_ms: float = 20.0, tolerance_ms: float = 5.0
) -> Waveform:
    """WSOLA: output duration is ``factor`` times the input, pitch kept.

    Synthesis windows sit at a fixed hop of half a window. Each analysis
    window starts near ``k * hop / factor``, shifted within ``tolerance_ms``
    to best cross-correlate with the natural continuation of the previous
    window.
    """
    if not 0.1 <= factor <= 10:
        raise ValueError(f"stretch factor {factor} outside [0.1, 10]")
    sr = w.sample_rate
    n = int(round(window_ms * sr / 1000))
    n += n % 2
    if w.samples.size < n:
        raise DataError(f"waveform of {w.samples.size} samples shorter than one {n}-sample window")
    hs = n // 2
    ha = hs / factor
    tol = int(round(tolerance_ms * sr / 1000))
    x = w.samples.astype(np.float64)
    out_len = int(round(x.size * factor))
    xp = np.concatenate([np.zeros(tol), x, np.zeros(2 * n + 3 * tol + int(ha) + 2)])
    win = np.hanning(n + 1)[:n]

    n_frames = int(math.ceil(out_len / hs)) + 1
    y = np.zeros(n_frames * hs + n)
    wsum = np.zeros_like(y)
    prev = 0  # analysis start (in unpadded coordinates) of the previous window
    for k in range(n_frames):
        nominal = int(round(k * ha))
        if k == 0:
            pos = 0
        else:
            natural = xp[tol + prev + hs : tol + prev + hs + n]
            lo = nominal - tol
            region = xp[tol + lo : tol + lo + n + 2 * tol]
            score = correlate(region, natural, mode="valid", method="auto")
            pos = lo + int(np.argmax(score))
            pos = min(max(pos, -tol), x.size + hs)
        seg = xp[tol + pos : tol + pos + n]
        y[k * hs : k * hs + n] += seg * win
        wsum[k * hs : k * hs + n] += win
        prev = pos
    y = np.where(wsum > 1e-3, y / np.maximum(wsum, 1e-3), y)
    return Waveform(y[:out_len].astype(np.float32), sr)


def time_stretch_features(f: FeatureSequence, factor: float) -> FeatureSequence:
    """Linear-interpolation resampling of frames along time."""
    if factor <= 0:
        raise ValueError("factor must be positive")
    t_out = int(round(f.num_frames * factor))
    if t_out < 1:
        raise DataError(f"stretching {f.num_frames} frames by {factor} leaves no frames")
    pos = np.clip(np.arange(t_out) / factor, 0, f.num_frames - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, f.num_frames - 1)
    frac = (pos - lo)[:, None]
    data = f.data[lo] * (1 - frac) + f.data[hi] * frac
    return FeatureSequence(data, f.frame_rate, f.source)


# ----------------------------------------------------------------------------
# stretch pairs


def map_span(s: int, e: int, d1: int, d2: int) -> tuple[int, int]:
    """Frames of variant 2 realigned to ``[s, e)`` of variant 1 (over-covering)."""
    s2 = (s * d2) // d1
    e2 = -((-e * d2) // d1)
    return s2, min(e2, d2)


def sample_grid_spans(
    d1: int, r: float, cfg: StretchConfig, count: int, rng: np.random.Generator
) -> list[tuple[int, int]]:
    """Grid-aligned spans with distinct starts and lengths in [grid, max_len]."""
    q = cfg.grid_frames(r)
    min_len = max(q, int(math.ceil(round(cfg.min_len_s * r) / q)) * q)
    max_len = (int(round(cfg.max_len_s * r)) // q) * q
    starts = np.arange(0, d1 - min_len + 1, q)
    if starts.size == 0 or max_len < min_len:
        return []
    chosen = np.sort(rng.choice(starts, size=min(count, starts.size), replace=False))
    spans = []
    for s in chosen:
        lengths = np.arange(min_len, min(max_len, d1 - s) + 1, q)
        spans.append((int(s), int(s + rng.choice(lengths))))
    return spans


class StretchAugmenter:
    """Builds stretched feature variants of VA segments.

    With ``waveforms`` the segment audio is stretched by WSOLA and featurized
    with MFCC; otherwise the stored features are interpolated in time.
    """

    def __init__(self, store: FeatureStore, waveforms: dict[str, Waveform] | None = None, mfcc_kwargs=None):
        self.store = store
        self.waveforms = waveforms
        self.mfcc_kwargs = mfcc_kwargs or {}

    def variant(self, seg: VASegment, factor: float) -> FeatureSequence:
        r = self.store.frame_rate
        if self.waveforms is not None:
            w = self.waveforms[seg.file_id]
            a = int(round(seg.start_s * w.sample_rate))
            b = int(round(seg.end_s * w.sample_rate))
            piece = Waveform(w.samples[a:b], w.sample_rate)
            return compute_mfcc(time_stretch_waveform(piece, factor), **self.mfcc_kwargs)
        s, e = self.store.frames_of(seg.interval())
        e = min(e, self.store.num_frames(seg.file_id))
        base = FeatureSequence(self.store.span(seg.file_id, s, e), r)
        if self.store.normalize_features:
            mean, std = self.store.stats[seg.file_id]
            base = FeatureSequence(base.data * std + mean, r)
        return time_stretch_features(base, factor)


def sample_stretch_pairs(
    seg: VASegment,
    cfg: StretchConfig,
    count: int,
    rng: np.random.Generator,
    augmenter: StretchAugmenter,
    key: str,
    min_frames: int = 4,
) -> list[PositivePair]:
    """Positive pairs from two independently stretched variants of one segment.

    The variants are registered in the augmenter's store as ``key/0`` and
    ``key/1``. Spans in variant 1 are grid aligned; their partners in
    variant 2 are the floor/ceil realigned frames. Pairs whose spans are
    shorter than ``min_frames`` are skipped.
    """
    f1_factor = 1.0 if cfg.pin_first else rng.uniform(cfg.factor_min, cfg.factor_max)
    f2_factor = rng.uniform(cfg.factor_min, cfg.factor_max)
    try:
        v1 = augmenter.variant(seg, f1_factor)
        v2 = augmenter.variant(seg, f2_factor)
    except DataError:
        return []
    store = augmenter.store
    r = store.frame_rate
    d1, d2 = v1.num_frames, v2.num_frames
    spans = sample_grid_spans(d1, r, cfg, count, rng)
    if not spans:
        return []
    k1, k2 = f"{key}/0", f"{key}/1"
    store.add_variant(k1, seg.file_id, v1)
    store.add_variant(k2, seg.file_id, v2)

    def source_time(frame, d):
        # variant frame -> corpus time, by proportional position in the segment
        return seg.start_s + min(frame / d, 1.0) * (seg.end_s - seg.start_s)

    pairs = []
    for s, e in spans:
        s2, e2 = map_span(s, e, d1, d2)
        if e - s < min_frames or e2 - s2 < min_frames:
            continue
        pairs.append(
            PositivePair(
                SpeechInterval(seg.file_id, source_time(s, d1), source_time(e, d1)),
                SpeechInterval(seg.file_id, source_time(s2, d2), source_time(e2, d2)),
                "stretch",
                span_a=FrameSpan(k1, s, e),
                span_b=FrameSpan(k2, s2, e2),
            )
        )
    return pairs


# ----------------------------------------------------------------------------
# mining candidates


def enumerate_candidates(segments: Iterable[VASegment], r: float, cfg: StretchConfig) -> list[SpeechInterval]:
    """All grid-aligned sub-intervals of each VA segment up to ``max_len_s``.

    ``r`` is accepted for signature symmetry with the frame-domain samplers;
    the grid itself is in seconds.
    """
    g = cfg.grid_s
    max_k = int(math.floor(cfg.max_len_s / g + 1e-9))
    out = []
    for seg in segments:
        slots = int(math.floor((seg.end_s - seg.start_s) / g + 1e-9))
        # both endpoints from one formula so touching candidates share exact times
        for i in range(slots):
            for k in range(1, min(max_k, slots - i) + 1):
                out.append(SpeechInterval(seg.file_id, seg.start_s + i * g, seg.start_s + (i + k) * g))
    out.sort()
    return out


def count_candidates(durations: Iterable[float], cfg: StretchConfig) -> int:
    """Closed form of ``len(enumerate_candidates(...))`` from segment durations."""
    max_k = int(math.floor(cfg.max_len_s / cfg.grid_s + 1e-9))
    total = 0
    for d in durations:
        n = int(math.floor(d / cfg.grid_s + 1e-9))
        m = min(n, max_k)
        # start slots with a full max_k range, then a triangular tail
        total += (n - m) * max_k + m * (m + 1) // 2
    return total


# ----------------------------------------------------------------------------
# ngrams and topline pairs


def enumerate_ngrams(alignment: PhonemeAlignment, max_dur: float = 1.0) -> list[NgramToken]:
    """Every silence-free contiguous phone run of duration <= ``max_dur``."""
    out = []
    for fid in sorted(alignment.files):
        runs, cur = [], []
        for p in alignment[fid]:
            if p.silence:
                if cur:
                    runs.append(cur)
                cur = []
            else:
                cur.append(p)
        if cur:
            runs.append(cur)
        for run in runs:
            for i in range(len(run)):
                for j in range(i, len(run)):
                    if run[j].end - run[i].start > max_dur + 1e-9:
                        break
                    out.append(
                        NgramToken(
                            SpeechInterval(fid, run[i].start, run[j].end),
                            tuple(p.label for p in run[i : j + 1]),
                        )
                    )
    return out


def sample_eval_ngrams(
    alignment: PhonemeAlignment,
    max_dur: float = 1.0,
    rng: np.random.Generator | None = None,
    max_count: int | None = None,
    min_dur: float = 0.0,
) -> list[NgramToken]:
    """Random phone ngrams, with transcriptions seen once in the sample removed."""
    tokens = [t for t in enumerate_ngrams(alignment, max_dur) if t.interval.duration >= min_dur]
    if max_count is not None and max_count < len(tokens):
        rng = rng or np.random.default_rng(0)
        keep = np.sort(rng.choice(len(tokens), size=max_count, replace=False))
        tokens = [tokens[i] for i in keep]
    counts: dict[tuple[str, ...], int] = defaultdict(int)
    for t in tokens:
        counts[t.transcription] += 1
    return [t for t in tokens if counts[t.transcription] >= 2]


def sample_topline_pairs(
    alignment: PhonemeAlignment,
    rng: np.random.Generator,
    count: int,
    max_dur: float = 1.0,
    min_dur: float = 0.0,
) -> list[PositivePair]:
    """Pairs of distinct ngram tokens sharing a transcription.

    A first member is drawn uniformly over tokens whose transcription is
    shared, its partner uniformly among the other tokens of its class.
    """
    classes: dict[tuple[str, ...], list[SpeechInterval]] = defaultdict(list)
    for t in enumerate_ngrams(alignment, max_dur):
        if t.interval.duration >= min_dur:
            classes[t.transcription].append(t.interval)
    pool = [(label, i) for label, members in classes.items() if len(members) >= 2 for i in range(len(members))]
    if not pool:
        raise DataError("no transcription occurs twice; cannot form topline pairs")
    pairs = []
    for idx in rng.integers(0, len(pool), size=count):
        label, i = pool[idx]
        members = classes[label]
        j = int(rng.integers(0, len(members) - 1))
        j += j >= i
        pairs.append(PositivePair(members[i], members[j], "topline"))
    return pairs


# ----------------------------------------------------------------------------
# CSV interchange

PAIR_FIELDS = ["file_a", "start_a", "end_a", "file_b", "start_b", "end_b", "provenance", "distance"]


def write_pairs(pairs: Iterable[PositivePair], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(PAIR_FIELDS)
        for p in pairs:
            dist = "" if p.distance is None else f"{p.distance:.6f}"
            w.writerow(
                [p.a.file_id, f"{p.a.start:.6f}", f"{p.a.end:.6f}",
                 p.b.file_id, f"{p.b.start:.6f}", f"{p.b.end:.6f}", p.provenance, dist]
            )


def read_pairs(path) -> list[PositivePair]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or header[:7] != PAIR_FIELDS[:7]:
            raise FormatError(f"{path}: missing or wrong pair CSV header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) not in (7, 8):
                raise FormatError(f"{path}:{lineno}: expected 7 or 8 columns")
            try:
                a = SpeechInterval(row[0], float(row[1]), float(row[2]))
                b = SpeechInterval(row[3], float(row[4]), float(row[5]))
                dist = float(row[7]) if len(row) == 8 and row[7] != "" else None
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            if row[6] not in PROVENANCES:
                raise FormatError(f"{path}:{lineno}: unknown provenance {row[6]!r}")
            out.append(PositivePair(a, b, row[6], dist))
    return out


def write_ngrams(tokens: Iterable[NgramToken], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["file", "start", "end", "transcription"])
        for t in tokens:
            iv = t.interval
            w.writerow([iv.file_id, f"{iv.start:.6f}", f"{iv.end:.6f}", "+".join(t.transcription)])


def read_ngrams(path) -> list[NgramToken]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        if next(reader, None) != ["file", "start", "end", "transcription"]:
            raise FormatError(f"{path}: missing or wrong ngram CSV header")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 4:
                raise FormatError(f"{path}:{lineno}: expected 4 columns")
            try:
                iv = SpeechInterval(row[0], float(row[1]), float(row[2]))
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: {exc}") from None
            out.append(NgramToken(iv, tuple(row[3].split("+"))))
    return out
