"""Query-by-example MAP over phone ngrams and NED/COV for discovered pairs."""
from __future__ import annotations

import bisect
import csv
import json
from collections import Counter
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .corpus import PhonemeAlignment, SpeechInterval
from .errors import DataError


@dataclass(frozen=True)
class RetrievalItem:
    embedding: np.ndarray
    transcription: tuple[str, ...]
    interval: SpeechInterval | None = None


@dataclass(frozen=True)
class NedCovPoint:
    threshold: float
    ned: float
    cov: float
    n_pairs: int


def edit_distance(a: Sequence, b: Sequence) -> int:
    """Levenshtein distance over label sequences with unit costs."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, x in enumerate(a, start=1):
        cur = [i]
        for j, y in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (x != y)))
        prev = cur
    return prev[-1]


def ned(a: Sequence, b: Sequence) -> float:
    if len(a) == 0 or len(b) == 0:
        raise DataError("NED undefined for an empty transcription")
    return edit_distance(a, b) / max(len(a), len(b))


class Transcriber:
    """Phone sequence heard within an interval.

    A non-silence phone is included when the interval covers at least
    ``min_fraction`` of it or at least ``min_overlap_s`` seconds of it.
    """

    def __init__(self, alignment: PhonemeAlignment, min_fraction: float = 0.5, min_overlap_s: float = 0.03):
        self.alignment = alignment
        self.min_fraction = min_fraction
        self.min_overlap_s = min_overlap_s
        self._starts = {f: [p.start for p in ph] for f, ph in alignment.files.items()}

    def phone_indices(self, iv: SpeechInterval) -> list[int]:
        phones = self.alignment[iv.file_id]
        tol = 1e-6
        if iv.start < phones[0].start - tol or iv.end > phones[-1].end + tol:
            raise DataError(f"interval {iv} outside the alignment span of {iv.file_id!r}")
        i = max(0, bisect.bisect_right(self._starts[iv.file_id], iv.start) - 1)
        out = []
        while i < len(phones) and phones[i].start < iv.end:
            p = phones[i]
            ov = min(p.end, iv.end) - max(p.start, iv.start)
            if not p.silence and ov > 0:
                if ov >= self.min_fraction * (p.end - p.start) - 1e-9 or ov >= self.min_overlap_s - 1e-9:
                    out.append(i)
            i += 1
        return out

    def __call__(self, iv: SpeechInterval) -> tuple[str, ...]:
        phones = self.alignment[iv.file_id]
        return tuple(phones[i].label for i in self.phone_indices(iv))


def transcribe_interval(iv: SpeechInterval, alignment: PhonemeAlignment, **kw) -> tuple[str, ...]:
    return Transcriber(alignment, **kw)(iv)


# ----------------------------------------------------------------------------
# MAP


def average_precision_ranked(distances: np.ndarray, relevant: np.ndarray) -> float:
    """Rank-form AP: rank by ascending distance, ties in input order."""
    order = np.argsort(distances, kind="stable")
    hits = np.asarray(relevant, dtype=bool)[order]
    if not hits.any():
        raise DataError("average precision needs at least one relevant item")
    ranks = np.flatnonzero(hits) + 1
    return float(np.mean(np.arange(1, ranks.size + 1) / ranks))


def cosine_distance(q: np.ndarray, pool: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    pool = np.asarray(pool, dtype=np.float64)
    qn = q / np.linalg.norm(q)
    pn = pool / np.linalg.norm(pool, axis=1, keepdims=True)
    return 1.0 - pn @ qn


def average_precision(query: RetrievalItem, pool: Sequence[RetrievalItem]) -> float:
    dists = cosine_distance(query.embedding, np.stack([p.embedding for p in pool]))
    relevant = np.array([p.transcription == query.transcription for p in pool])
    return average_precision_ranked(dists, relevant)


def map_scores(embeddings: np.ndarray, transcriptions: Sequence[tuple[str, ...]], block_size: int = 512) -> np.ndarray:
    """Per-query AP of every item against all remaining items."""
    x = np.asarray(embeddings, dtype=np.float64)
    x = x / np.linalg.norm(x, axis=1, keepdims=True)
    m = x.shape[0]
    _, labels = np.unique(np.array(["+".join(t) for t in transcriptions], dtype=object), return_inverse=True)
    counts = np.bincount(labels)
    lonely = np.flatnonzero(counts[labels] < 2)
    if lonely.size:
        raise DataError(f"transcription {'+'.join(transcriptions[lonely[0]])!r} has no peer")
    out = np.zeros(m)
    for k in range(0, m, block_size):
        blk = np.arange(k, min(m, k + block_size))
        dist = 1.0 - x[blk] @ x.T
        for row, q in enumerate(blk):
            keep = np.arange(m) != q
            out[q] = average_precision_ranked(dist[row, keep], labels[keep] == labels[q])
    return out


def map_score(items: Sequence[RetrievalItem]) -> float:
    if len(items) < 2:
        raise DataError("MAP needs at least two items")
    emb = np.stack([i.embedding for i in items])
    return float(map_scores(emb, [i.transcription for i in items]).mean())


def map_report(embeddings: np.ndarray, transcriptions: Sequence[tuple[str, ...]]) -> dict:
    scores = map_scores(embeddings, transcriptions)
    classes = Counter("+".join(t) for t in transcriptions)
    return {
        "n_queries": int(scores.size),
        "map": float(scores.mean()),
        "per_transcription_class_count": dict(sorted(classes.items())),
    }


# ----------------------------------------------------------------------------
# NED / COV


def coverage(intervals: Iterable[SpeechInterval], alignment: PhonemeAlignment, transcriber: Transcriber | None = None) -> float:
    """Fraction of non-silence phone tokens included in at least one interval."""
    tr = transcriber or Transcriber(alignment)
    total = alignment.n_speech_tokens()
    if total == 0:
        raise DataError("alignment holds no speech phones")
    covered = set()
    for iv in intervals:
        covered.update((iv.file_id, i) for i in tr.phone_indices(iv))
    return len(covered) / total


def nedcov_sweep(
    pairs: Sequence,
    alignment: PhonemeAlignment,
    n_points: int = 20,
    transcriber: Transcriber | None = None,
    thresholds: Sequence[float] | None = None,
) -> list[NedCovPoint]:
    """NED and coverage of the pairs under ``n_points`` distance thresholds.

    ``pairs`` carry ``a``, ``b`` and ``distance`` (PositivePair) or
    ``query``, ``neighbor`` and ``distance`` (MinedPair). Thresholds sit at
    quantiles k/n_points (k = 1..n_points) of the pair distances. An empty
    selection is reported as ned 0, cov 0, n_pairs 0. Explicit ``thresholds``
    (ascending) override the quantile grid.
    """
    if not pairs:
        raise DataError("NED/COV sweep needs at least one pair")
    tr = transcriber or Transcriber(alignment)
    total = alignment.n_speech_tokens()
    rows = []
    for p in pairs:
        a, b = (p.a, p.b) if hasattr(p, "a") else (p.query, p.neighbor)
        if p.distance is None:
            raise DataError("NED/COV sweep needs pair distances")
        ia, ib = tr.phone_indices(a), tr.phone_indices(b)
        ta = tuple(alignment[a.file_id][i].label for i in ia)
        tb = tuple(alignment[b.file_id][i].label for i in ib)
        # a side that covers no phone is maximally wrong
        d = ned(ta, tb) if ta and tb else (0.0 if ta == tb else 1.0)
        tokens = {(a.file_id, i) for i in ia} | {(b.file_id, i) for i in ib}
        rows.append((float(p.distance), d, tokens))
    rows.sort(key=lambda r: r[0])
    dists = np.array([r[0] for r in rows])
    if thresholds is None:
        thresholds = np.quantile(dists, np.arange(1, n_points + 1) / n_points)
    elif any(b < a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError("thresholds must be ascending")

    points, covered, ned_sum, j = [], set(), 0.0, 0
    for t in thresholds:
        while j < len(rows) and rows[j][0] <= t:
            ned_sum += rows[j][1]
            covered |= rows[j][2]
            j += 1
        points.append(NedCovPoint(float(t), ned_sum / j if j else 0.0, len(covered) / total, j))
    return points


def write_nedcov(points: Sequence[NedCovPoint], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["threshold", "ned", "cov", "n_pairs"])
        for p in points:
            w.writerow([f"{p.threshold:.6f}", f"{p.ned:.6f}", f"{p.cov:.6f}", p.n_pairs])


def write_map_report(report: dict, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, indent=1, sort_keys=True)
