"""Command-line pipeline: ``sselearn <subcommand> [--config run.json] ...``.

Run directory layout::

    features/<file_id>.ssef
    iter_<k>/{model.ssem, pairs.csv, stats.json, map.json, train_log.csv}
    discovered_pairs.csv, nedcov.csv, summary.json
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from . import corpus as corpus_mod
from .config import RunConfig, load_config
from .corpus import CorpusManifest, VASegment, energy_vad, generate_synthetic_corpus, load_manifest, load_vad, read_audio
from .embedder import (
    EncoderModel,
    embed_intervals,
    load_checkpoint,
    maxpool_intervals,
    save_checkpoint,
    train,
)
from .errors import DataError, NumericalError, SSEError
from .evaluation import map_report, nedcov_sweep, write_map_report, write_nedcov
from .features import FeatureStore, compute_mfcc, feature_path, write_features
from .mining import CorpusContext, IterationResult, build_index, mine_pairs, run_iterations, stretch_pairs
from .sampling import (
    StretchAugmenter,
    enumerate_candidates,
    read_pairs,
    sample_eval_ngrams,
    sample_topline_pairs,
    write_ngrams,
    write_pairs,
)

log = logging.getLogger("sselearn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


# ----------------------------------------------------------------------------
# commands


def cmd_synth(cfg: RunConfig) -> CorpusManifest:
    return generate_synthetic_corpus(
        cfg.synth.n_files, cfg.synth.phone_inventory_size, cfg.seed, cfg.corpus_dir
    )


def _mfcc_job(args):
    entry, out, fs = args
    w = read_audio(entry)
    f = compute_mfcc(w, n_coeffs=fs["n_coeffs"], frame_ms=fs["frame_ms"], hop_ms=fs["hop_ms"])
    write_features(f, out)
    return entry.file_id


def cmd_features(cfg: RunConfig) -> list[str]:
    """Compute (or verify) one feature file per manifest entry; returns recomputed ids."""
    manifest = load_manifest(cfg.manifest_path)
    fdir = cfg.features_path
    if cfg.features.source == "imported":
        missing = [e.file_id for e in manifest if not feature_path(fdir, e.file_id).exists()]
        if missing:
            raise DataError(f"imported features missing for file ids: {', '.join(missing)}")
        return []
    fdir.mkdir(parents=True, exist_ok=True)
    fs = {"n_coeffs": cfg.features.n_coeffs, "frame_ms": cfg.features.frame_ms, "hop_ms": cfg.features.hop_ms}
    todo = []
    for e in manifest:
        out = feature_path(fdir, e.file_id)
        if out.exists() and out.stat().st_mtime >= e.audio.stat().st_mtime:
            continue
        todo.append((e, out, fs))
    errors, done = [], []
    if cfg.jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            futures = [(t[0].file_id, pool.submit(_mfcc_job, t)) for t in todo]
            for fid, fut in futures:
                try:
                    done.append(fut.result())
                except SSEError as exc:
                    errors.append(f"{fid}: {exc}")
    else:
        for t in todo:
            try:
                done.append(_mfcc_job(t))
            except SSEError as exc:
                errors.append(f"{t[0].file_id}: {exc}")
    if errors:
        raise DataError("feature extraction failed for " + "; ".join(errors))
    log.info("features: %d computed, %d up to date", len(done), len(manifest) - len(done))
    return done


def load_segments(cfg: RunConfig, manifest: CorpusManifest, waveforms=None) -> list[VASegment]:
    segs: list[VASegment] = []
    loaded_vad: dict[Path, dict] = {}
    for e in manifest:
        if e.vad is not None:
            if e.vad not in loaded_vad:
                loaded_vad[e.vad] = load_vad(e.vad)
            segs.extend(loaded_vad[e.vad].get(e.file_id, []))
            continue
        w = waveforms[e.file_id] if waveforms is not None else read_audio(e)
        v = cfg.vad
        segs.extend(
            energy_vad(w, v.frame_ms, v.hop_ms, v.energy_quantile, v.min_speech_ms, v.min_gap_ms, file_id=e.file_id)
        )
    return segs


def load_context(cfg: RunConfig) -> tuple[CorpusManifest, CorpusContext]:
    manifest = load_manifest(cfg.manifest_path)
    store = FeatureStore.from_dir(cfg.features_path, manifest.file_ids, cfg.features.normalize)
    if cfg.encoder.input_dim != store.dim:
        raise DataError(f"encoder input_dim {cfg.encoder.input_dim} != feature dim {store.dim}")
    waveforms = None
    if cfg.features.source == "mfcc":
        waveforms = {e.file_id: read_audio(e) for e in manifest}
    segments = load_segments(cfg, manifest, waveforms)
    # clip segments to the feature extent of their file
    clipped = []
    for s in segments:
        end = min(s.end_s, store.num_frames(s.file_id) / store.frame_rate)
        if end > s.start_s:
            clipped.append(VASegment(s.file_id, s.start_s, end))
    mfcc_kwargs = {"n_coeffs": cfg.features.n_coeffs, "frame_ms": cfg.features.frame_ms, "hop_ms": cfg.features.hop_ms}
    return manifest, CorpusContext(store, clipped, StretchAugmenter(store, waveforms, mfcc_kwargs))


def eval_ngrams(cfg: RunConfig, manifest: CorpusManifest, store: FeatureStore):
    alignment = manifest.load_alignments()
    min_dur = cfg.encoder.conv_kernel / store.frame_rate
    tokens = sample_eval_ngrams(
        alignment, cfg.eval.max_ngram_dur, np.random.default_rng([cfg.seed, 1]), cfg.eval.max_ngrams, min_dur=min_dur
    )
    if not tokens:
        raise DataError("no evaluation ngram has a same-transcription peer")
    return alignment, tokens


def evaluate_map(model: EncoderModel | None, cfg: RunConfig, manifest, store, out_path=None) -> dict:
    _, tokens = eval_ngrams(cfg, manifest, store)
    intervals = [t.interval for t in tokens]
    emb = maxpool_intervals(intervals, store) if model is None else embed_intervals(model, intervals, store)
    report = map_report(emb, [t.transcription for t in tokens])
    if out_path is not None:
        write_map_report(report, out_path)
    return report


def train_topline(cfg: RunConfig, manifest, store) -> EncoderModel:
    alignment = manifest.load_alignments()
    rng = np.random.default_rng([cfg.seed, 2])
    min_dur = cfg.encoder.conv_kernel / store.frame_rate
    pairs = sample_topline_pairs(alignment, rng, cfg.eval.topline_pairs, cfg.eval.max_ngram_dur, min_dur)
    model, _ = train(pairs, store, cfg.encoder)
    return model


def cmd_eval_map(cfg: RunConfig, checkpoint=None, baseline: str | None = None, topline: bool = False, out=None) -> dict:
    manifest, store = _manifest_and_store(cfg)
    if baseline is not None:
        if baseline != "maxpool":
            raise DataError(f"unknown baseline {baseline!r}")
        model, name = None, "maxpool"
    elif topline:
        model, name = train_topline(cfg, manifest, store), "topline"
        cfg.run_path.mkdir(parents=True, exist_ok=True)
        save_checkpoint(model, cfg.run_path / "topline.ssem")
    elif checkpoint is not None:
        model, name = load_checkpoint(checkpoint), Path(checkpoint).parent.name
    else:
        raise DataError("eval-map needs --checkpoint, --baseline maxpool or --topline")
    out = Path(out) if out else cfg.run_path / f"map_{name}.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    report = evaluate_map(model, cfg, manifest, store, out)
    log.info("MAP %s: %.4f over %d queries", name, report["map"], report["n_queries"])
    return report


def _manifest_and_store(cfg: RunConfig):
    manifest = load_manifest(cfg.manifest_path)
    store = FeatureStore.from_dir(cfg.features_path, manifest.file_ids, cfg.features.normalize)
    return manifest, store


def cmd_mine(cfg: RunConfig, checkpoint, out=None):
    manifest, ctx = load_context(cfg)
    model = load_checkpoint(checkpoint)
    candidates = enumerate_candidates(ctx.segments, ctx.store.frame_rate, cfg.stretch)
    emb = embed_intervals(model, candidates, ctx.store)
    mined, threshold = mine_pairs(build_index(emb, candidates), cfg.mining)
    out = Path(out) if out else cfg.run_path / "mined_pairs.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_pairs([m.as_positive() for m in mined], out)
    log.info("mined %d pairs from %d candidates (threshold %.4f)", len(mined), len(candidates), threshold)
    return mined, threshold


def cmd_train(cfg: RunConfig, pairs_csv=None, out=None) -> EncoderModel:
    manifest, ctx = load_context(cfg)
    pairs = read_pairs(pairs_csv) if pairs_csv else stretch_pairs(ctx, cfg.stretch, cfg.seed)
    model, tlog = train(pairs, ctx.store, cfg.encoder)
    out = Path(out) if out else cfg.run_path / "model.ssem"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, out)
    tlog.write_csv(out.with_suffix(".log.csv"))
    return model


def cmd_eval_nedcov(cfg: RunConfig, pairs_csv, out=None):
    manifest = load_manifest(cfg.manifest_path)
    pairs = read_pairs(pairs_csv)
    if not pairs:
        raise DataError(f"{pairs_csv}: no pairs")
    points = nedcov_sweep(pairs, manifest.load_alignments(), cfg.eval.sweep_points)
    out = Path(out) if out else cfg.run_path / "nedcov.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    write_nedcov(points, out)
    return points


def cmd_pipeline(cfg: RunConfig, n_iters: int | None = None) -> dict:
    """All iterations, MAP after each, final discovery sweep, and ``summary.json``."""
    n_iters = cfg.n_iters if n_iters is None else n_iters
    run = cfg.run_path
    run.mkdir(parents=True, exist_ok=True)
    manifest, ctx = load_context(cfg)
    alignment, tokens = eval_ngrams(cfg, manifest, ctx.store)
    write_ngrams(tokens, run / "eval_ngrams.csv")
    maps: dict[int, dict] = {}

    def after(res: IterationResult):
        path = run / f"iter_{res.iteration}" / "map.json"
        if path.exists():
            maps[res.iteration] = json.loads(path.read_text())
            return
        maps[res.iteration] = evaluate_map(res.model, cfg, manifest, ctx.store, path)
        log.info("iteration %d MAP %.4f", res.iteration, maps[res.iteration]["map"])

    results = run_iterations(
        ctx, cfg.encoder, cfg.stretch, cfg.mining, n_iters, cfg.seed, out_dir=run, on_iteration=after
    )
    final = results[-1]
    candidates = enumerate_candidates(ctx.segments, ctx.store.frame_rate, cfg.stretch)
    emb = embed_intervals(final.model, candidates, ctx.store)
    mined, threshold = mine_pairs(build_index(emb, candidates), cfg.mining)
    discovered = [m.as_positive() for m in mined]
    write_pairs(discovered, run / "discovered_pairs.csv")
    points = nedcov_sweep(discovered, alignment, cfg.eval.sweep_points)
    write_nedcov(points, run / "nedcov.csv")

    summary = {
        "seed": cfg.seed,
        "n_iters": n_iters,
        "iterations": [
            {**r.stats, "map": maps[r.iteration]["map"], "n_queries": maps[r.iteration]["n_queries"]} for r in results
        ],
        "discovery": {
            "model_iteration": final.iteration,
            "n_pairs": len(discovered),
            "threshold": threshold,
            "nedcov": [p.__dict__ for p in points],
        },
    }
    (run / "summary.json").write_text(json.dumps(summary, indent=1, sort_keys=True))
    return summary


# ----------------------------------------------------------------------------
# argument parsing


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config")
    common.add_argument("--seed", type=int, help="global seed (overrides config)")
    common.add_argument("--jobs", type=int, help="worker processes for per-file work")
    common.add_argument("--run-dir", help="run directory (overrides config)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="sselearn", description="Self-supervised speech sequence embeddings.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    sub.add_parser("synth", parents=[common], help="generate the synthetic corpus")
    sub.add_parser("features", parents=[common], help="compute or verify feature files")

    sp = sub.add_parser("pipeline", parents=[common], help="pretrain, iterate, evaluate")
    sp.add_argument("--n-iters", type=int)

    sp = sub.add_parser("eval-map", parents=[common], help="ngram query-by-example MAP")
    g = sp.add_mutually_exclusive_group(required=True)
    g.add_argument("--checkpoint")
    g.add_argument("--baseline", choices=["maxpool"])
    g.add_argument("--topline", action="store_true")
    sp.add_argument("--out")

    sp = sub.add_parser("eval-nedcov", parents=[common], help="NED/COV threshold sweep")
    sp.add_argument("--pairs", required=True)
    sp.add_argument("--out")

    sp = sub.add_parser("mine", parents=[common], help="mine pairs with a trained model")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out")

    sp = sub.add_parser("train", parents=[common], help="train one model on a pair CSV (default: stretch pairs)")
    sp.add_argument("--pairs")
    sp.add_argument("--out")
    return p


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    if args.jobs is not None:
        cfg = replace(cfg, jobs=args.jobs)
    if args.run_dir is not None:
        cfg = replace(cfg, run_dir=args.run_dir)
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(name)s %(message)s"
    )
    # fixed intra-op threading keeps results independent of --jobs
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        if cfg.jobs < 1:
            cfg = replace(cfg, jobs=os.cpu_count() or 1)
        if args.command == "synth":
            m = cmd_synth(cfg)
            print(f"wrote {len(m)} files to {cfg.corpus_dir}")
        elif args.command == "features":
            done = cmd_features(cfg)
            print(f"computed {len(done)} feature files")
        elif args.command == "pipeline":
            summary = cmd_pipeline(cfg, args.n_iters)
            for it in summary["iterations"]:
                print(f"iter {it['iteration']}: MAP {it['map']:.4f} ({it['n_pairs']} pairs)")
        elif args.command == "eval-map":
            r = cmd_eval_map(cfg, args.checkpoint, args.baseline, args.topline, args.out)
            print(f"MAP {r['map']:.4f} over {r['n_queries']} queries")
        elif args.command == "eval-nedcov":
            points = cmd_eval_nedcov(cfg, args.pairs, args.out)
            for p in points:
                print(f"{p.threshold:.4f}\t{p.ned:.4f}\t{p.cov:.4f}\t{p.n_pairs}")
        elif args.command == "mine":
            mined, t = cmd_mine(cfg, args.checkpoint, args.out)
            print(f"mined {len(mined)} pairs (threshold {t:.4f})")
        elif args.command == "train":
            cmd_train(cfg, args.pairs, args.out)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
