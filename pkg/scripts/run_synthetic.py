"""Desk-scale synthetic experiment.

Generates the corpus, extracts features, runs the self-labeling pipeline and
both reference systems, then prints a MAP table and the NED/COV sweep.

    python3 scripts/run_synthetic.py --run-dir runs/desk
"""
import argparse
import json
import logging
import time
from pathlib import Path

import torch

from sselearn.cli import cmd_eval_map, cmd_features, cmd_pipeline, cmd_synth
from sselearn.config import load_config

HERE = Path(__file__).resolve().parent


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default=str(HERE / "desk.json"))
    p.add_argument("--run-dir", default="runs/desk")
    p.add_argument("--seed", type=int)
    p.add_argument("--n-iters", type=int)
    p.add_argument("--skip-topline", action="store_true")
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(name)s %(message)s")
    torch.set_num_threads(1)

    cfg = load_config(args.config)
    cfg.run_dir = args.run_dir
    cfg.jobs = 1
    if args.seed is not None:
        cfg.seed = args.seed

    t0 = time.perf_counter()
    cmd_synth(cfg)
    cmd_features(cfg)
    summary = cmd_pipeline(cfg, args.n_iters)
    rows = [("max-pool baseline", cmd_eval_map(cfg, baseline="maxpool")["map"])]
    rows += [(f"iteration {it['iteration']}", it["map"]) for it in summary["iterations"]]
    if not args.skip_topline:
        rows.append(("topline", cmd_eval_map(cfg, topline=True)["map"]))
    minutes = (time.perf_counter() - t0) / 60

    print(f"\n{'system':<20}{'MAP':>8}")
    for name, m in rows:
        print(f"{name:<20}{m:>8.4f}")
    disc = summary["discovery"]
    print(f"\nNED/COV with iteration {disc['model_iteration']} model, {disc['n_pairs']} pairs")
    print(f"{'threshold':>10}{'NED':>8}{'COV':>8}{'pairs':>8}")
    for pt in disc["nedcov"]:
        print(f"{pt['threshold']:>10.4f}{pt['ned']:>8.3f}{pt['cov']:>8.3f}{pt['n_pairs']:>8d}")
    print(f"\nwall time {minutes:.1f} min; artifacts in {cfg.run_path}")
    (cfg.run_path / "results.json").write_text(json.dumps({"map": dict(rows), "minutes": minutes}, indent=1))


if __name__ == "__main__":
    main()
