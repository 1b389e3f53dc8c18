"""kNN self-labeling: exact cosine search, overlap filtering, NMS, threshold calibration."""
from __future__ import annotations

import json
import logging
import math
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .corpus import SpeechInterval, VASegment
from .embedder import EncoderConfig, EncoderModel, TrainLog, embed_intervals, load_checkpoint, save_checkpoint, train
from .errors import DataError
from .features import FeatureStore
from .sampling import (
    PositivePair,
    StretchAugmenter,
    StretchConfig,
    enumerate_candidates,
    read_pairs,
    sample_stretch_pairs,
    segment_rng,
    write_pairs,
)

log = logging.getLogger(__name__)


@dataclass
class MiningConfig:
    n_neighbors: int = 10
    target_pair_fraction: float = 0.5
    # count every indexed query in the calibration denominator (else only
    # queries that kept at least one neighbor after filtering)
    count_all_queries: bool = True
    # add iteration-0 stretch pairs to the mined pairs of later iterations
    mix_stretch_pairs: bool = False
    block_size: int = 1024

    def __post_init__(self):
        if self.n_neighbors < 1:
            raise ValueError("n_neighbors must be >= 1")
        if not 0 < self.target_pair_fraction < 1:
            raise ValueError("target_pair_fraction must be in (0, 1)")


@dataclass(frozen=True)
class MinedPair:
    query: SpeechInterval
    neighbor: SpeechInterval
    distance: float

    def as_positive(self) -> PositivePair:
        return PositivePair(self.query, self.neighbor, "mined", self.distance)


@dataclass
class EmbeddingIndex:
    embeddings: np.ndarray
    intervals: list[SpeechInterval]

    def __len__(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def build_index(embeddings, intervals: Sequence[SpeechInterval]) -> EmbeddingIndex:
    """Exact index over row-normalized embeddings."""
    x = np.asarray(embeddings, dtype=np.float32)
    if x.ndim != 2 or x.shape[0] == 0:
        raise DataError("index needs a non-empty 2-D embedding matrix")
    if x.shape[0] != len(intervals):
        raise DataError(f"{x.shape[0]} embeddings but {len(intervals)} intervals")
    if not np.all(np.isfinite(x)):
        raise DataError("non-finite embedding rows")
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise DataError("zero-norm embedding rows")
    return EmbeddingIndex(x / norms, list(intervals))


def _top_n(dist: np.ndarray, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Row-wise n smallest entries, ordered by (distance, column)."""
    kth = np.partition(dist, n - 1, axis=1)[:, n - 1]
    rows, cols = [], []
    for i in range(dist.shape[0]):
        cand = np.flatnonzero(dist[i] <= kth[i])
        order = np.lexsort((cand, dist[i, cand]))[:n]
        cols.append(cand[order])
    cols = np.stack(cols)
    return cols, np.take_along_axis(dist, cols, axis=1)


def search(idx: EmbeddingIndex, rows: np.ndarray, n: int, block_size: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Top-``n`` neighbors of indexed rows (self excluded) by blocked inner products."""
    if n >= len(idx):
        raise ValueError(f"N={n} must be smaller than the index size {len(idx)}")
    rows = np.asarray(rows)
    out_i = np.zeros((rows.size, n), dtype=np.int64)
    out_d = np.zeros((rows.size, n), dtype=np.float64)
    for k in range(0, rows.size, block_size):
        blk = rows[k : k + block_size]
        sims = idx.embeddings[blk] @ idx.embeddings.T
        dist = np.clip(1.0 - sims.astype(np.float64), 0.0, 2.0)
        dist[np.arange(blk.size), blk] = np.inf
        out_i[k : k + blk.size], out_d[k : k + blk.size] = _top_n(dist, n)
    return out_i, out_d


def search_vectors(idx: EmbeddingIndex, queries, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Top-``n`` rows for external query vectors (nothing excluded)."""
    q = np.atleast_2d(np.asarray(queries, dtype=np.float32))
    if q.shape[1] != idx.dim:
        raise DataError(f"query dim {q.shape[1]} != index dim {idx.dim}")
    if not 1 <= n <= len(idx):
        raise ValueError(f"N={n} out of range for index size {len(idx)}")
    q = q / np.linalg.norm(q, axis=1, keepdims=True)
    dist = np.clip(1.0 - (q @ idx.embeddings.T).astype(np.float64), 0.0, 2.0)
    return _top_n(dist, n)


def query_neighbors(idx: EmbeddingIndex, query_row: int, n: int) -> list[tuple[int, float]]:
    cols, dists = search(idx, np.array([query_row]), n)
    return [(int(c), float(d)) for c, d in zip(cols[0], dists[0])]


def overlaps(a: SpeechInterval, b: SpeechInterval) -> bool:
    return a.file_id == b.file_id and min(a.end, b.end) - max(a.start, b.start) > 0


def filter_neighbors(
    query: SpeechInterval, neighbors: Sequence[tuple[SpeechInterval, float]]
) -> list[tuple[SpeechInterval, float]]:
    """Drop neighbors overlapping the query, then greedy non-maximal suppression."""
    dists = [d for _, d in neighbors]
    if any(b < a for a, b in zip(dists, dists[1:])):
        raise ValueError("neighbors must be sorted by ascending distance")
    kept: list[tuple[SpeechInterval, float]] = []
    for iv, d in neighbors:
        if overlaps(iv, query):
            continue
        if any(overlaps(iv, k) for k, _ in kept):
            continue
        kept.append((iv, d))
    return kept


def calibrate_threshold(per_query_best: Sequence[float | None], target_fraction: float = 0.5) -> float:
    """Smallest t with at least ``target_fraction`` of queries having best <= t."""
    if len(per_query_best) == 0:
        raise DataError("cannot calibrate on an empty query list")
    avail = np.sort([d for d in per_query_best if d is not None])
    if avail.size == 0:
        raise DataError("no query kept any neighbor after filtering")
    need = max(1, math.ceil(target_fraction * len(per_query_best) - 1e-9))
    if avail.size < need:
        warnings.warn(
            f"only {avail.size}/{len(per_query_best)} queries have a neighbor; "
            f"target fraction {target_fraction} unreachable, using max best distance",
            RuntimeWarning,
            stacklevel=2,
        )
        return float(avail[-1])
    return float(avail[need - 1])


def mine_pairs(idx: EmbeddingIndex, cfg: MiningConfig) -> tuple[list[MinedPair], float]:
    n = min(cfg.n_neighbors, len(idx) - 1)
    if n < 1:
        raise DataError("index too small to mine pairs")
    cols, dists = search(idx, np.arange(len(idx)), n, cfg.block_size)
    filtered: list[list[tuple[int, float]]] = []
    best: list[float | None] = []
    for q in range(len(idx)):
        qi = idx.intervals[q]
        kept: list[tuple[int, float]] = []
        for c, d in zip(cols[q], dists[q]):
            iv = idx.intervals[c]
            if overlaps(iv, qi) or any(overlaps(iv, idx.intervals[k]) for k, _ in kept):
                continue
            kept.append((int(c), float(d)))
        filtered.append(kept)
        best.append(kept[0][1] if kept else None)
    if cfg.count_all_queries:
        threshold = calibrate_threshold(best, cfg.target_pair_fraction)
    else:
        threshold = calibrate_threshold([b for b in best if b is not None], cfg.target_pair_fraction)

    seen: set[tuple[int, int]] = set()
    out: list[tuple[float, int, MinedPair]] = []
    for q, kept in enumerate(filtered):
        for c, d in kept:
            if d > threshold:
                break
            key = (min(q, c), max(q, c))
            if key in seen:
                continue
            seen.add(key)
            out.append((d, len(out), MinedPair(idx.intervals[q], idx.intervals[c], d)))
    out.sort(key=lambda t: (t[0], t[1]))
    return [p for _, _, p in out], threshold


# ----------------------------------------------------------------------------
# iteration driver


@dataclass
class IterationResult:
    iteration: int
    model: EncoderModel
    pairs: list[PositivePair]
    stats: dict
    train_log: TrainLog | None = None


@dataclass
class CorpusContext:
    store: FeatureStore
    segments: list[VASegment]
    augmenter: StretchAugmenter


def stretch_pairs(ctx: CorpusContext, cfg: StretchConfig, seed: int) -> list[PositivePair]:
    """Pretraining pairs from every VA segment, ``cfg.rounds`` variant pairs each."""
    pairs = []
    for round_ in range(cfg.rounds):
        for i, seg in enumerate(ctx.segments):
            rng = segment_rng(seed + 7919 * round_, seg.file_id, i)
            key = f"stretch/{round_}/{seg.file_id}/{i}"
            pairs.extend(sample_stretch_pairs(seg, cfg, cfg.pairs_per_segment, rng, ctx.augmenter, key))
    return pairs


def _stats_path(out_dir, k) -> Path:
    return Path(out_dir) / f"iter_{k}" / "stats.json"


def run_iterations(
    ctx: CorpusContext,
    enc_cfg: EncoderConfig,
    stretch_cfg: StretchConfig,
    mining_cfg: MiningConfig,
    n_iters: int,
    seed: int,
    out_dir=None,
    on_iteration: Callable[[IterationResult], None] | None = None,
) -> list[IterationResult]:
    """Stretch pretraining followed by ``n_iters`` rounds of mine-then-retrain.

    With ``out_dir`` every iteration is checkpointed to ``iter_<k>/`` and
    completed iterations found there are loaded instead of recomputed.
    """
    if n_iters < 0:
        raise ValueError("n_iters must be >= 0")
    results: list[IterationResult] = []
    base_pairs: list[PositivePair] | None = None
    r = ctx.store.frame_rate

    for k in range(n_iters + 1):
        it_dir = None if out_dir is None else Path(out_dir) / f"iter_{k}"
        if it_dir is not None and (it_dir / "stats.json").exists() and (it_dir / "model.ssem").exists():
            log.info("iteration %d: resuming from %s", k, it_dir)
            res = IterationResult(
                k,
                load_checkpoint(it_dir / "model.ssem"),
                read_pairs(it_dir / "pairs.csv"),
                json.loads((it_dir / "stats.json").read_text()),
            )
            results.append(res)
            if on_iteration:
                on_iteration(res)
            continue

        cfg_k = EncoderConfig(**{**asdict(enc_cfg), "seed": enc_cfg.seed + k})
        if k == 0:
            pairs = stretch_pairs(ctx, stretch_cfg, seed)
            base_pairs = pairs
            stats = {"iteration": 0, "n_candidates": len(ctx.segments), "n_pairs": len(pairs), "threshold": None}
        else:
            candidates = enumerate_candidates(ctx.segments, r, stretch_cfg)
            emb = embed_intervals(results[-1].model, candidates, ctx.store)
            mined, threshold = mine_pairs(build_index(emb, candidates), mining_cfg)
            pairs = [m.as_positive() for m in mined]
            stats = {"iteration": k, "n_candidates": len(candidates), "n_pairs": len(pairs), "threshold": threshold}
            if not pairs:
                log.warning("iteration %d: no mined pairs, stopping", k)
                stats.update(train_steps=0, final_dev_loss=None, stopped="no mined pairs")
                if it_dir is not None:
                    it_dir.mkdir(parents=True, exist_ok=True)
                    (it_dir / "stats.json").write_text(json.dumps(stats, indent=1))
                break
            if mining_cfg.mix_stretch_pairs:
                if base_pairs is None:
                    base_pairs = stretch_pairs(ctx, stretch_cfg, seed)
                pairs = pairs + base_pairs

        model, tlog = train(pairs, ctx.store, cfg_k)
        stats.update(train_steps=tlog.steps, final_dev_loss=tlog.best_dev_loss)
        res = IterationResult(k, model, pairs, stats, tlog)
        if it_dir is not None:
            it_dir.mkdir(parents=True, exist_ok=True)
            save_checkpoint(model, it_dir / "model.ssem")
            write_pairs(pairs, it_dir / "pairs.csv")
            tlog.write_csv(it_dir / "train_log.csv")
            (it_dir / "stats.json").write_text(json.dumps(stats, indent=1))
        results.append(res)
        if on_iteration:
            on_iteration(res)
        log.info("iteration %d: %s", k, stats)
    return results
