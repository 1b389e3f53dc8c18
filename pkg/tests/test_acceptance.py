"""Acceptance suite: one reported PASS/FAIL line per criterion.

Criteria 1-8 and 10 are oracle and property checks that run in seconds.
Criterion 9 is a full desk-scale synthetic run (50 files, inventory 8,
C=64) executed twice for the determinism check; it takes roughly 20 minutes
on one core. Lines are collected and echoed in the pytest terminal summary.
"""
import json
import math
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from sselearn.cli import cmd_eval_map, cmd_features, cmd_pipeline, cmd_synth
from sselearn.config import load_config
from sselearn.corpus import PhonemeAlignment, Phone, SpeechInterval, load_alignment, load_manifest, write_alignment
from sselearn.embedder import EncoderConfig, EncoderModel, load_checkpoint, ntxent_loss, save_checkpoint
from sselearn.evaluation import Transcriber, average_precision_ranked, edit_distance, map_scores, ned
from sselearn.features import FeatureSequence, read_features, write_features
from sselearn.mining import build_index, calibrate_threshold, filter_neighbors, overlaps, search
from sselearn.sampling import PositivePair, map_span, read_pairs, write_pairs

from oracles import brute_top_n, finite_difference, recursive_edit, sweep_ap

REPORT: list[str] = []
DESK_CONFIG = Path(__file__).resolve().parents[1] / "scripts" / "desk.json"
TAU = 0.15


def report(criterion: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] {criterion}: {detail}"
    REPORT.append(line)
    print(line)


# ---------------------------------------------------------------- 1


def test_c01_gradient_finite_difference():
    t0 = time.perf_counter()
    rng = np.random.default_rng(101)
    worst = 0.0
    for k in range(20):
        n = (2, 4, 8)[k % 3]
        z = rng.normal(size=(2 * n, 16))
        _, g = ntxent_loss(z, TAU)
        num = finite_difference(lambda v: ntxent_loss(v, TAU)[0], z, eps=1e-4)
        worst = max(worst, np.abs(g - num).max() / np.abs(num).max())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and elapsed < 60
    report("1 gradient vs finite differences", ok, f"max rel err {worst:.2e} (<1e-4), {elapsed:.1f}s (<60s)")
    assert ok


# ---------------------------------------------------------------- 2


def _orthogonal_batch():
    e = np.eye(4)
    return np.stack([e[0], e[0], e[1], e[1]])


def test_c02_loss_oracle():
    one = ntxent_loss(np.random.default_rng(0).normal(size=(2, 8)), TAU)[0]
    two = ntxent_loss(_orthogonal_batch(), TAU)[0]
    direct = -math.log(math.exp(1 / TAU) / (math.exp(1 / TAU) + 2))
    ok = one == 0.0 and abs(two - direct) <= 1e-12
    report(
        "2 loss oracle",
        ok,
        f"n=1 loss {one!r}; orthogonal n=2 loss {two:.10f} vs direct evaluation {direct:.10f}",
    )
    assert ok


@pytest.mark.xfail(
    strict=True,
    reason="stated constant 0.002545 is the first-order value 2*exp(-1/tau); the exact "
    "per-anchor loss log(1 + 2*exp(-1/tau)) is 0.0025420, 3.0e-6 away",
)
def test_c02_stated_constant():
    two = ntxent_loss(_orthogonal_batch(), TAU)[0]
    report("2 stated constant 0.002545 +/- 1e-6", abs(two - 0.002545) <= 1e-6,
           f"got {two:.7f}; exact formula value differs (expected failure, see decisions ledger)")
    assert abs(two - 0.002545) <= 1e-6


# ---------------------------------------------------------------- 3


def test_c03_map_oracles():
    rng = np.random.default_rng(303)
    worst = 0.0
    for _ in range(200):
        size = int(rng.integers(2, 60))
        d = rng.permutation(size) + rng.uniform(0, 0.9, size)
        rel = rng.random(size) < rng.uniform(0.1, 0.7)
        rel[rng.integers(size)] = True
        worst = max(worst, abs(average_precision_ranked(d, rel) - sweep_ap(d, rel)))
    cls = np.repeat(np.arange(7), 5)
    one_hot = map_scores(np.eye(7)[cls], [(str(c),) for c in cls]).mean()
    ok = worst <= 1e-9 and one_hot == 1.0
    report("3 MAP oracle equivalence", ok, f"max |rank AP - sweep AP| {worst:.1e} over 200; one-hot MAP {one_hot!r}")
    assert ok


# ---------------------------------------------------------------- 4


def test_c04_knn_exact():
    x = np.random.default_rng(404).normal(size=(1000, 64))
    idx = build_index(x, [SpeechInterval("f", i, i + 1) for i in range(1000)])
    oracle = brute_top_n(x, 10)
    mismatches = {}
    for n in (1, 5, 10):
        cols, _ = search(idx, np.arange(1000), n, block_size=256)
        mismatches[n] = sum(cols[i].tolist() != oracle[i][:n] for i in range(1000))
    ok = not any(mismatches.values())
    report("4 kNN exactness", ok, f"mismatching queries per N {mismatches} over 1000x64")
    assert ok


# ---------------------------------------------------------------- 5


def test_c05_nms_property():
    rng = np.random.default_rng(505)
    violations = 0
    for _ in range(500):
        def draw():
            f = "fg"[rng.integers(2)]
            s = rng.integers(0, 60) / 8
            return SpeechInterval(f, s, s + rng.integers(1, 12) / 8)

        q = draw()
        ns = sorted(((draw(), float(rng.uniform(0, 2))) for _ in range(rng.integers(0, 15))), key=lambda t: t[1])
        kept = filter_neighbors(q, ns)
        kept_iv = [k for k, _ in kept]
        bad = any(overlaps(a, b) for i, a in enumerate(kept_iv) for b in kept_iv[i + 1 :])
        bad |= any(overlaps(a, q) for a in kept_iv)
        for i, (n, d) in enumerate(ns):
            if (n, d) in kept:
                continue
            closer = [k for k, kd in kept if kd < d or (kd == d and ns.index((k, kd)) < i)]
            bad |= not (overlaps(n, q) or any(overlaps(n, k) for k in closer))
        violations += bad
    report("5 NMS property", violations == 0, f"{violations} violating sets of 500")
    assert violations == 0


# ---------------------------------------------------------------- 6


def test_c06_threshold_calibration():
    t = calibrate_threshold([0.1, 0.2, 0.3, 0.4], 0.5)
    rng = np.random.default_rng(606)
    non_monotone = 0
    for _ in range(300):
        best = list(rng.uniform(0, 2, rng.integers(1, 50)))
        targets = np.sort(rng.uniform(0.01, 0.99, 8))
        ts = [calibrate_threshold(best, f) for f in targets]
        non_monotone += any(b < a for a, b in zip(ts, ts[1:]))
    ok = t == 0.2 and non_monotone == 0
    report("6 threshold calibration", ok, f"[0.1,0.2,0.3,0.4]@0.5 -> {t}; {non_monotone}/300 non-monotone lists")
    assert ok


# ---------------------------------------------------------------- 7


def test_c07_stretch_alignment():
    rng = np.random.default_rng(707)
    bad = 0
    worst = 0.0
    for _ in range(1000):
        d1, d2 = (int(v) for v in rng.integers(1, 400, 2))
        s = int(rng.integers(0, d1))
        e = int(rng.integers(s + 1, d1 + 1))
        s2, e2 = map_span(s, e, d1, d2)
        # back in variant-1 frame units
        lo, hi = s2 * d1 / d2, e2 * d1 / d2
        err = max(s - lo, hi - e)
        worst = max(worst, err / (d1 / d2))
        bad += not (lo <= s + 1e-9 and hi >= e - 1e-9) or (s - lo) >= d1 / d2 or (hi - e) >= d1 / d2
    equal = all(map_span(s, e, d, d) == (s, e) for d in range(1, 60) for s in range(d) for e in range(s + 1, d + 1))
    ok = bad == 0 and equal
    report("7 stretch alignment", ok,
           f"{bad}/1000 spans under-cover or err >= 1 frame (worst {worst:.3f} frames); identity case {equal}")
    assert ok


# ---------------------------------------------------------------- 8


def test_c08_edit_distance():
    rng = np.random.default_rng(808)
    mismatch = 0
    for _ in range(500):
        a = list(rng.choice(list("abcdefg"), rng.integers(0, 12)))
        b = list(rng.choice(list("abcdefg"), rng.integers(0, 12)))
        mismatch += edit_distance(a, b) != recursive_edit(a, b)
    v = ned("k a t".split(), "k u t".split())
    ok = mismatch == 0 and v == 1 / 3
    report("8 edit distance", ok, f"{mismatch}/500 mismatches vs recursion; ned(kat,kut) = {v:.6f}")
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_format_round_trips(tmp_path):
    rng = np.random.default_rng(1010)
    failures = []
    for k in range(25):
        t, d = (int(v) for v in rng.integers(1, 80, 2))
        f = FeatureSequence(rng.normal(size=(t, d)) * 10 ** rng.uniform(-3, 3), float(rng.choice([50, 100])))
        f = FeatureSequence(f.data, f.frame_rate, SpeechInterval(f"x{k}", 0.0, t / f.frame_rate))
        write_features(f, tmp_path / f"x{k}.ssef")
        if read_features(tmp_path / f"x{k}.ssef") != f:
            failures.append(f"features {k}")

        c = int(rng.choice([4, 8, 16]))
        torch.manual_seed(k)
        m = EncoderModel(EncoderConfig(input_dim=int(rng.integers(2, 10)), conv_channels=c, n_heads=2,
                                       ffn_dim=int(rng.integers(4, 20)), projection_dim=c, seed=k))
        save_checkpoint(m, tmp_path / f"m{k}.ssem")
        m2 = load_checkpoint(tmp_path / f"m{k}.ssem")
        if m2.cfg != m.cfg or any(not torch.equal(a, b) for a, b in zip(m.state_dict().values(), m2.state_dict().values())):
            failures.append(f"checkpoint {k}")

        files = {}
        for fid in ("a", "b2"):
            pos, phones = float(rng.uniform(0, 1)), []
            for _ in range(int(rng.integers(1, 30))):
                dur = float(rng.uniform(0.01, 0.2))
                lab = str(rng.choice(["a", "b", "zh", "SIL"]))
                phones.append(Phone(lab, pos, pos + dur, lab == "SIL"))
                pos += dur + float(rng.choice([0.0, rng.uniform(0, 0.1)]))
            files[fid] = phones
        al = PhonemeAlignment(files)
        write_alignment(al, tmp_path / f"a{k}.tsv")
        if load_alignment(tmp_path / f"a{k}.tsv") != al:
            failures.append(f"alignment {k}")

        pairs = []
        for _ in range(int(rng.integers(0, 40))):
            s1, s2 = (int(v) for v in rng.integers(0, 10**7, 2))
            l1, l2 = (int(v) for v in rng.integers(1, 10**6, 2))
            dist = None if rng.random() < 0.3 else int(rng.integers(0, 2 * 10**6)) / 1e6
            pairs.append(PositivePair(SpeechInterval("u1", s1 / 1e6, (s1 + l1) / 1e6),
                                      SpeechInterval("u2", s2 / 1e6, (s2 + l2) / 1e6),
                                      str(rng.choice(["stretch", "mined", "topline"])), dist))
        write_pairs(pairs, tmp_path / f"p{k}.csv")
        if read_pairs(tmp_path / f"p{k}.csv") != pairs:
            failures.append(f"pairs {k}")
    report("10 format round-trips", not failures, f"25 randomized instances x 4 formats; failures {failures or 'none'}")
    assert not failures


# ---------------------------------------------------------------- 9


def _full_run(run_dir: Path) -> dict:
    cfg = load_config(DESK_CONFIG)
    cfg.run_dir = str(run_dir)
    cfg.jobs = 1
    t0 = time.perf_counter()
    cmd_synth(cfg)
    cmd_features(cfg)
    summary = cmd_pipeline(cfg)
    maxpool = cmd_eval_map(cfg, baseline="maxpool")["map"]
    topline = cmd_eval_map(cfg, topline=True)["map"]
    return {"cfg": cfg, "summary": summary, "maxpool": maxpool, "topline": topline,
            "seconds": time.perf_counter() - t0}


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    torch.set_num_threads(1)
    first = _full_run(tmp_path_factory.mktemp("e2e_a"))
    t1 = time.perf_counter()
    second_dir = tmp_path_factory.mktemp("e2e_b")
    cfg = load_config(DESK_CONFIG)
    cfg.run_dir = str(second_dir)
    cfg.jobs = 1
    cmd_synth(cfg)
    cmd_features(cfg)
    cmd_pipeline(cfg)
    first["rerun_seconds"] = time.perf_counter() - t1
    first["summary_a"] = (Path(first["cfg"].run_dir) / "summary.json").read_bytes()
    first["summary_b"] = (second_dir / "summary.json").read_bytes()
    return first


def test_c09a_map_ordering(e2e):
    maps = {it["iteration"]: it["map"] for it in e2e["summary"]["iterations"]}
    top, it2, it0, mp = e2e["topline"], maps[2], maps[0], e2e["maxpool"]
    ok = top > it2 > it0 - 0.02 > mp + 0.05
    report("9a MAP ordering", ok,
           f"topline {top:.4f} > iter2 {it2:.4f} > iter0-0.02 {it0 - 0.02:.4f} > maxpool+0.05 {mp + 0.05:.4f}")
    assert ok


def test_c09b_iter0_mined_pairs_ned_zero(e2e):
    run = Path(e2e["cfg"].run_dir)
    al = load_manifest(e2e["cfg"].manifest_path).load_alignments()
    tr = Transcriber(al)
    # pairs mined with the iteration-0 model are the training set of iteration 1
    pairs = read_pairs(run / "iter_1" / "pairs.csv")
    zero = sum(1 for p in pairs if tr(p.a) and tr(p.a) == tr(p.b))
    frac = zero / len(pairs)
    report("9b iter-0 mined pairs with NED=0", frac >= 0.5, f"{zero}/{len(pairs)} = {frac:.3f} (>= 0.5)")
    assert frac >= 0.5


def test_c09c_lowest_threshold_ned(e2e):
    first = e2e["summary"]["discovery"]["nedcov"][0]
    ok = first["ned"] < 0.2
    report("9c lowest-threshold NED", ok,
           f"NED {first['ned']:.4f} (< 0.2) at threshold {first['threshold']:.4f}, cov {first['cov']:.3f}")
    assert ok


def test_c09d_wall_time(e2e):
    minutes = e2e["seconds"] / 60
    ok = minutes < 30
    report("9d wall time", ok, f"one full run incl. baselines {minutes:.1f} min (< 30), single core")
    assert ok


def test_c09e_deterministic_summary(e2e):
    ok = e2e["summary_a"] == e2e["summary_b"]
    report("9e bitwise-identical summary", ok,
           f"two same-seed runs, {len(e2e['summary_a'])} bytes, rerun {e2e['rerun_seconds'] / 60:.1f} min")
    assert ok
