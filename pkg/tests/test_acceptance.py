"""Acceptance criteria, one test each, each printing a single PASS/FAIL line.

Run alone with ``pytest tests/test_acceptance.py -v`` or as a script:
``python tests/test_acceptance.py``. The staged overfit experiment takes
about ten minutes and carries the ``slow`` marker.
"""
import json
import os
import sys
import time

import numpy as np
import pytest

from hybridnet import autodiff as ad
from hybridnet import cli, gradcheck
from hybridnet.autodiff import Tensor
from hybridnet.datakit import (GenConfig, assemble_tiles, coverage_count, decode_dmap, decode_pgm, decode_ppm,
                               encode_dmap, encode_pgm, encode_ppm, extract_tiles, make_tile_layout,
                               synth_dataset)
from hybridnet.losses import combine_losses, depth_normalized_loss, hybrid_loss, seg_cross_entropy
from hybridnet.metrics import confusion_accumulate, depth_metrics, seg_metrics
from hybridnet.nets import HybridNet, ModelConfig
from hybridnet.trainer import (Checkpoint, TrainConfig, decode_checkpoint, encode_checkpoint, evaluate,
                               merge_checkpoints, train_stage)
from oracles import depth_metrics_loop, random_metric_case, seg_metrics_loop

RESULTS = []


def record(name, ok, detail, elapsed, limit):
    ok = bool(ok) and elapsed < limit
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail} [{elapsed:.1f}s, limit {limit:.0f}s]"
    RESULTS.append(line)
    print(line, flush=True)
    assert ok, line


def small_cfg(seed=0):
    return ModelConfig(input_h=32, input_w=64, num_classes=3, feature_channels=[4, 6, 8], aspp_rates=[1, 2],
                       aspp_channels=6, global_channels=[3, 4, 4, 4], global_fc_dim=8, refine_channels=5, seed=seed)


def test_report_row_structure():
    t = time.perf_counter()
    d, s = evaluate(None, synth_dataset(GenConfig(h=32, w=64), 1), num_classes=5, oracle=True)
    report = cli.build_report(d, s)
    rows = list(report["depth"]) + [k for k in report["segmentation"] if k != "per_class_iou"]
    want = ["γ < 1.25", "γ < 1.25^2", "γ < 1.25^3", "ARD", "SRD", "RMSE-linear", "RMSE-log", "SIE",
            "G", "C", "IoUclass"]
    ok = rows == want and cli.parse_report(json.dumps(report)) == (d, s)
    record("report rows follow the fixed depth and segmentation row layout",
           ok, f"{len(rows)} rows", time.perf_counter() - t, 10)


def test_gradient_suite():
    t = time.perf_counter()
    results = [r for scope in gradcheck.SCOPES for r in gradcheck.run_scope(scope)]
    worst = {scope: max(r.error for r in results if r.scope == scope) for scope in gradcheck.SCOPES}
    ok = all(r.ok for r in results)
    detail = ", ".join(f"{k} worst {v:.1e}" for k, v in worst.items())
    record("gradient suite (ops, losses < 1e-6; toy model < 1e-4; eps 1e-4)", ok, detail,
           time.perf_counter() - t, 120)


def _rel_ok(a, b, rel=1e-12):
    return a == b or abs(a - b) <= rel * max(abs(a), abs(b))


def test_metric_oracle_suite():
    t = time.perf_counter()
    bad = []
    for seed in range(100):
        pred, gt, pl, gl, k = random_metric_case(seed)
        valid = gt > 0
        got = depth_metrics(pred, gt)
        want = depth_metrics_loop(pred[valid], gt[valid])
        bad += [(seed, f) for f, v in want.items() if not _rel_ok(getattr(got, f), v)]
        seg = seg_metrics(confusion_accumulate(pl, gl, k))
        want = seg_metrics_loop(pl, gl, k, 255)
        bad += [(seed, f) for f, v in want.items() if not _rel_ok(getattr(seg, f), v)]
        for c in (0.1, 2.0, 10.0):
            if abs(depth_metrics(c * pred, gt).sie - got.sie) >= 1e-9:
                bad.append((seed, f"sie x{c}"))
        if not got.delta1 <= got.delta2 <= got.delta3:
            bad.append((seed, "delta order"))
    record("metric oracle suite (100 cases, rel 1e-12, SIE scale, delta order)", not bad,
           f"{len(bad)} mismatches", time.perf_counter() - t, 30)


def test_loss_identities():
    t = time.perf_counter()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        gt = rng.uniform(1.0, 20.0, (1, 12, 16))
        a, b = rng.uniform(0.05, 20.0), rng.uniform(-10.0, 10.0)
        worst = max(worst, depth_normalized_loss(Tensor(a * gt + b), gt).item())

    rng = np.random.default_rng(99)
    labels = rng.integers(0, 4, (6, 8))
    labels[rng.random((6, 8)) < 0.3] = 255
    scores = Tensor(rng.standard_normal((4, 6, 8)), requires_grad=True)
    ad.backward(seg_cross_entropy(scores, labels))
    zero_grad = bool(np.all(scores.grad[:, labels == 255] == 0.0))

    worked = combine_losses(0.5, 1.0, 2.0, alpha=1000.0)
    pred = rng.uniform(1, 5, (1, 6, 8))
    br = hybrid_loss(Tensor(scores.data), labels, Tensor(pred), pred * 1.5)
    consistent = br.l_h == 1000.0 * br.l_s + br.l_dl + br.l_dn == br.total.item()
    ok = worst < 1e-9 and zero_grad and worked == 503.0 and consistent
    record("loss identities", ok, f"max L_DN(a*gt+b, gt) {worst:.1e}, ignored grads zero {zero_grad}, "
           f"worked example {worked}", time.perf_counter() - t, 10)


def test_graph_separation_suite():
    t = time.perf_counter()
    model = HybridNet(ModelConfig())
    img = np.random.default_rng(0).random((3, 64, 128))

    def outputs():
        with ad.no_grad():
            out = model.forward(img)
        return out.depth.data.tobytes(), out.class_scores.data.tobytes()

    base = outputs()
    rng = np.random.default_rng(1)
    verdicts = {}
    for block in ("aspp", "global", "refine", "features"):
        changed_depth = changed_seg = False
        for p in model.parameters(block):
            if not p.name.endswith("weight"):
                continue
            old = p.data.copy()
            p.assign(old + 0.05 * rng.standard_normal(p.dims))
            d, s = outputs()
            changed_depth |= d != base[0]
            changed_seg |= s != base[1]
            p.assign(old)
        verdicts[block] = (changed_depth, changed_seg)
    ok = (verdicts["aspp"] == (False, True) and verdicts["global"] == (True, False)
          and verdicts["refine"] == (True, False) and verdicts["features"] == (True, True))
    detail = ", ".join(f"{k}: depth {'moves' if v[0] else 'fixed'}/seg {'moves' if v[1] else 'fixed'}"
                       for k, v in verdicts.items())
    record("graph separation", ok, detail, time.perf_counter() - t, 30)


def test_tiling_suite():
    t = time.perf_counter()
    rng = np.random.default_rng(0)
    trips = 0
    for _ in range(200):
        h, w = int(rng.integers(1, 80)), int(rng.integers(1, 120))
        rows, cols = int(rng.integers(1, min(h, 7) + 1)), int(rng.integers(1, min(w, 9) + 1))
        lay = make_tile_layout(h, w, rows, cols)
        r = rng.standard_normal((int(rng.integers(1, 4)), h, w))
        trips += assemble_tiles(extract_tiles(r, lay), lay).tobytes() == r.tobytes() and coverage_count(lay).min() >= 1
    city = make_tile_layout(1024, 2048, 3, 6)
    city_ok = len(city) == 18 and coverage_count(city).min() >= 1
    model = HybridNet(small_cfg())
    data = synth_dataset(GenConfig(h=32, w=64, num_classes=3, seed=4), 3)
    same = repr(evaluate(model, data, (1, 1))) == repr(evaluate(model, data))
    ok = trips == 200 and city_ok and same
    record("tiling suite", ok, f"{trips}/200 round trips exact, 3x6 on 1024x2048 gives {len(city)} covering tiles, "
           f"1x1 equals untiled {same}", time.perf_counter() - t, 30)


def test_determinism_and_persistence(monkeypatch):
    t = time.perf_counter()
    data = synth_dataset(GenConfig(h=32, w=64, num_classes=3, seed=2), 2)
    again = synth_dataset(GenConfig(h=32, w=64, num_classes=3, seed=2), 2)
    data_same = all(a.rgb.tobytes() == b.rgb.tobytes() and a.depth_gt.tobytes() == b.depth_gt.tobytes()
                    and a.labels_gt.tobytes() == b.labels_gt.tobytes() for a, b in zip(data, again))
    blobs, reports = [], []
    for n in ("1", "3"):
        monkeypatch.setenv("HYBRIDNET_THREADS", n)
        model = HybridNet(small_cfg())
        ck = train_stage(model, data, TrainConfig(iterations=4, lr=1e-5)).checkpoint
        blobs.append(encode_checkpoint(ck))
        reports.append(repr(evaluate(model, data)))
    ckpt_same = blobs[0] == blobs[1] and encode_checkpoint(decode_checkpoint(blobs[0])) == blobs[0]
    s = data[0]
    formats = (decode_ppm(encode_ppm(s.rgb)).tobytes() == s.rgb.tobytes()
               and decode_pgm(encode_pgm(s.labels_gt)).tobytes() == s.labels_gt.tobytes()
               and decode_dmap(encode_dmap(s.depth_gt)).tobytes() == s.depth_gt.tobytes())
    ok = data_same and ckpt_same and reports[0] == reports[1] and formats
    record("determinism and persistence", ok, f"data {data_same}, checkpoints {ckpt_same}, "
           f"reports across thread counts {reports[0] == reports[1]}, formats {formats}",
           time.perf_counter() - t, 60)


def staged_overfit(log_every=10):
    """Depth 500, seg 500, merge, hybrid 2000 on four 64×128 scenes."""
    run = cli.RunConfig()
    data = synth_dataset(run.gen_config(), 4)
    first = {}

    def keep(entry):
        first.setdefault("l_h", entry.losses.l_h)

    depth_model = HybridNet(run.model_config())
    depth = train_stage(depth_model, data, run.train_config("depth"), on_log=keep)
    seg = train_stage(HybridNet(run.model_config()), data, run.train_config("seg"))
    model = merge_checkpoints(depth.checkpoint, seg.checkpoint).to_model()
    hcfg = run.train_config("hybrid")
    hcfg.log_every = log_every
    hybrid = train_stage(model, data, hcfg)
    d, s = evaluate(model, data)
    return first["l_h"], hybrid, d, s


@pytest.mark.slow
def test_staged_overfit_experiment():
    t = time.perf_counter()
    first, hybrid, d, s = staged_overfit()
    curve = np.array([e.losses.l_h for e in hybrid.log])
    final = curve[-1]
    # smoothed curve: mean of the last and first five logged points
    smooth_end, smooth_start = curve[-5:].mean(), curve[1:6].mean()
    ratio = first / final
    ok = s.global_acc >= 0.95 and d.ard <= 0.15 and ratio >= 100 and smooth_end < smooth_start
    record("staged overfit experiment", ok,
           f"G {s.global_acc:.4f} (>= 0.95), ARD {d.ard:.4f} (<= 0.15), l_h {first:.1f} -> {final:.3f} "
           f"= {ratio:.0f}x (>= 100x; hybrid stage alone {curve[0] / final:.0f}x)",
           time.perf_counter() - t, 900)


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q", "-s"]))
