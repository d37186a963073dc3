"""Acceptance criteria 1-9, each at its stated tolerance.

The desk-scale runs (criteria 5-7 and 9) train small models on a
200-episode synthetic corpus and take roughly half an hour in total on
one CPU core. Each test records a PASS/FAIL line that is printed in the
terminal summary.
"""

import dataclasses
import json
import time

import numpy as np
import pytest

from touchbench import capture, cli, config, corpus, gradcheck, store, synthgen
from touchbench import metrics as mt
from touchbench import model as mdl
from touchbench import train as tr
from touchbench.core import ViewId

SEEDS = (0, 1, 2)
ALL = "ego+wl+wr"


def _record(log, n, ok, detail):
    log[n] = (bool(ok), detail)
    return bool(ok)


# ----------------------------------------------------------------------------
# 1. gradient correctness


def test_c1_gradient_correctness(acceptance_log):
    assert mdl.ModelConfig.micro().N == 4 and mdl.ModelConfig.micro().T == 2
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seeds=100, model_seeds=3)
    results["model_loss"] = {"model64": max(gradcheck.model_error(s, with_loss=True) for s in range(3))}
    elapsed = time.perf_counter() - t0
    worst64 = max(v for r in results.values() for k, v in r.items() if k != "jvp32")
    ok = gradcheck.passed(results) and worst64 < 1e-4 and elapsed < 120
    _record(acceptance_log, 1, ok, f"max 64-bit rel err {worst64:.2e} (< 1e-4), {len(gradcheck.CASES)} primitives "
                                   f"x 100 seeds + model, {elapsed:.1f}s (< 120s)")
    assert ok


# ----------------------------------------------------------------------------
# 2. metric oracle equivalence


def _oracle(pairs, tau=mt.DEFAULT_TAU):
    inter = union = 0
    smin = smax = 0.0
    for pred, gt in pairs:
        for p, g in zip(pred.ravel().tolist(), gt.ravel().tolist()):
            inter += (p > tau) and (g > tau)
            union += (p > tau) or (g > tau)
            smin += min(p, g)
            smax += max(p, g)
    return inter / union, smin / smax


def test_c2_metric_oracle(acceptance_log):
    rng = np.random.default_rng(2)
    pairs = []
    for _ in range(1000):
        shape = (1, 2, 3, 3)
        pairs.append((rng.uniform(size=shape) * (rng.uniform(size=shape) < 0.5),
                      rng.uniform(size=shape) * (rng.uniform(size=shape) < 0.5)))
    acc = mt.MetricAccumulator()
    for p, g in pairs:
        acc.update(p, g)
    ciou, viou = _oracle(pairs)
    err = max(abs(acc.contact_iou() - ciou), abs(acc.volumetric_iou() - viou))

    def cell(vals):
        g = np.zeros((1, 2, 21, 21))
        g[0, 0, 0, : len(vals)] = vals
        return g

    valid = np.zeros((2, 21, 21), bool)
    valid[0, 0, :2] = True
    c_hand = mt.contact_iou(cell([0.5, 0.5]), cell([0.5, 0.0]), valid=valid)
    v_hand = mt.volumetric_iou(cell([0.5, 0.5]), cell([1.0, 0.0]), valid=valid)
    ok = err <= 1e-12 and c_hand == 0.5 and abs(v_hand - 1 / 3) <= 1e-12
    _record(acceptance_log, 2, ok, f"streaming vs oracle max |diff| {err:.1e} over 1000 pairs; "
                                   f"C.IoU {c_hand}, V.IoU {v_hand:.6f}")
    assert ok


# ----------------------------------------------------------------------------
# 3. pipeline fidelity


def test_c3_pipeline_fidelity(tmp_path, acceptance_log):
    # zero jitter: every sensor at 30 Hz with no latency
    rig = tmp_path / "ideal.json"
    rig.write_text(json.dumps({"sensors": [dataclasses.asdict(s) for s in capture.ideal_rig()]}))
    steps = [
        ["gen", "--seed", "11", "--episodes", "4", "--out", tmp_path / "scripts"],
        ["capture-sim", "--in", tmp_path / "scripts", "--out", tmp_path / "raw", "--sensors", rig, "--seed", "11"],
        ["preprocess", "--root", tmp_path / "raw"],
        ["convert", "--root", tmp_path / "raw", "--out", tmp_path / "c"],
    ]
    for argv in steps:
        assert cli.main([str(a) for a in argv]) == 0
    worst = 0.0
    loaded = store.load_corpus(tmp_path / "c")
    assert len(loaded) == 4
    for ep in loaded:
        script = _script(tmp_path, ep)
        assert len(ep.frames) == script.duration_frames
        for t, fr in enumerate(ep.frames):
            o = synthgen.oracle_pressure(script, fr.frame_index)
            worst = max(worst, float(np.abs(ep.pressure[t][o.valid] - o.values[o.valid]).max()))
    fidelity = worst <= 1 / 255 + 1e-6

    # jittered rig: synchronisation invariants over 100 episodes
    bad = 0
    for i in range(100):
        script = synthgen.generate_script(corpus.episode_seed(3, i))
        n = script.duration_frames
        events = capture.simulate_streams(n, capture.default_rig(), seed=i)
        log = capture.synchronize(events, n, sensors=capture.SENSOR_NAMES)
        by_sensor = {s: sorted(e.available_ts for e in events if e.sensor == s) for s in capture.SENSOR_NAMES}
        ok = [s.frame_index for s in log.snapshots] == list(range(n))
        ok &= all(s.ts == k / 30 for k, s in enumerate(log.snapshots))
        for snap in log.snapshots:
            for name, chosen in snap.source.items():
                avail = np.asarray(by_sensor[name])
                visible = avail[avail <= snap.ts]
                if chosen is None:
                    ok &= visible.size == 0
                else:
                    ok &= chosen.available_ts <= snap.ts and chosen.available_ts == visible.max()
        bad += not ok
    result = _record(acceptance_log, 3, fidelity and bad == 0,
                     f"zero-jitter max |pressure - oracle| {worst:.2e} (<= {1 / 255 + 1e-6:.2e}); "
                     f"jittered sync invariants violated in {bad}/100 episodes")
    assert result


def _script(root, ep):
    path = root / "scripts" / f"{ep.meta.episode_id}.json"
    return synthgen.ScenarioScript.from_dict(json.loads(path.read_text()))


# ----------------------------------------------------------------------------
# 4. report arithmetic


def test_c4_report_arithmetic(acceptance_log):
    def rep(c, v):
        return mt.MetricsReport(0.9, c, v, 0.03, 1, 2)

    table = mt.report_table(rep(0.4792, 0.4575), [("all", rep(0.5030, 0.4575)), ("ego", rep(0.4792, 0.4311))])
    rows = table.splitlines()
    dv = mt.relative_change(0.4311, 0.4575)
    c_cell, v_cell = "0.5030↑+5.0%", "0.4311↓-5.8%"
    ok = c_cell in rows[3] and v_cell in rows[4] and abs(dv - (-5.78)) <= 0.05
    _record(acceptance_log, 4, ok, f"table cells {c_cell!r} present: {c_cell in rows[3]}, {v_cell!r} present: "
                                   f"{v_cell in rows[4]}; exact V.IoU change {dv:.3f}% (-5.78 +/- 0.05)")
    assert ok


# ----------------------------------------------------------------------------
# desk-scale training shared by 5, 6, 7 and 9


@pytest.fixture(scope="session")
def desk():
    run = config.desk_config()
    eps = corpus.synthetic_corpus(200, run.data.corpus_seed, run.gen)
    _, parts = corpus.split_corpus(eps, run.data.split_seed, frozenset(run.data.holdout_objects))
    dtype = np.dtype(run.train.dtype)
    feats = {k: mdl.prepare_episodes(v, run.model, dtype) for k, v in parts.items() if v}
    return run, parts, feats


@pytest.fixture(scope="session")
def trained(desk):
    """Memoised (dropout, fraction, seed) -> (best params, train seconds)."""
    run, parts, feats = desk
    cache = {}

    def get(dropout, fraction, seed):
        key = (dropout, fraction, seed)
        if key not in cache:
            train_eps = corpus.subset(parts["train"], fraction, run.data.split_seed)
            ids = {e.meta.episode_id for e in train_eps}
            train_feats = [f for f in feats["train"] if f.episode_id in ids]
            cfg = dataclasses.replace(run.train, seed=seed, view_dropout=dropout)
            t0 = time.perf_counter()
            res = tr.train(train_feats, feats["val"], run.model, cfg, run.loss)
            cache[key] = (res.best_params, time.perf_counter() - t0)
        return cache[key]

    return get


def _eval(desk, params, views):
    run, _, feats = desk
    return mt.evaluate(params, feats["test_seen"], views, run.eval, run.model)


@pytest.fixture(scope="session")
def view_results(desk, trained):
    """Per seed: test_seen reports for ego-only and all views, with and without view dropout."""
    run = desk[0]
    out = {}
    for drop in (run.train.view_dropout, 0.0):
        for s in SEEDS:
            params, secs = trained(drop, 1.0, s)
            out[drop, s] = {"ego": _eval(desk, params, "ego"), ALL: _eval(desk, params, ALL), "seconds": secs}
    return out


@pytest.mark.slow
def test_c5_multiview_benefit(desk, view_results, acceptance_log):
    drop = desk[0].train.view_dropout
    rows = [view_results[drop, s] for s in SEEDS]
    mae_all = float(np.median([r[ALL].mae for r in rows]))
    mae_ego = float(np.median([r["ego"].mae for r in rows]))
    v_all = float(np.median([r[ALL].volumetric_iou for r in rows]))
    v_ego = float(np.median([r["ego"].volumetric_iou for r in rows]))
    slowest = max(r["seconds"] for r in rows)
    ok = mae_all <= 0.95 * mae_ego and v_all > v_ego and slowest <= 1800
    _record(acceptance_log, 5, ok, f"median MAE all {mae_all:.4f} vs ego {mae_ego:.4f} (ratio {mae_all / mae_ego:.3f}"
                                   f" <= 0.95); V.IoU all {v_all:.4f} > ego {v_ego:.4f}; slowest run {slowest:.0f}s")
    assert ok


@pytest.mark.slow
def test_c6_dropout_robustness(desk, view_results, acceptance_log):
    drop = desk[0].train.view_dropout

    def rel_drop(key, s):
        r = view_results[key, s]
        return (r[ALL].volumetric_iou - r["ego"].volumetric_iou) / r[ALL].volumetric_iou

    with_d = float(np.median([rel_drop(drop, s) for s in SEEDS]))
    without = float(np.median([rel_drop(0.0, s) for s in SEEDS]))
    ok = with_d < without
    _record(acceptance_log, 6, ok, f"median relative V.IoU drop all->ego: dropout {100 * with_d:.1f}% "
                                   f"< no-dropout {100 * without:.1f}%")
    assert ok


@pytest.mark.slow
def test_c7_data_scaling(desk, trained, acceptance_log):
    drop = desk[0].train.view_dropout
    med = []
    for frac in (0.25, 0.5, 1.0):
        med.append(float(np.median([_eval(desk, trained(drop, frac, s)[0], ALL).volumetric_iou for s in SEEDS])))
    ok = med[0] <= med[1] <= med[2]
    _record(acceptance_log, 7, ok, "median V.IoU at 25/50/100% data: " + " / ".join(f"{m:.4f}" for m in med))
    assert ok


# ----------------------------------------------------------------------------
# 8. loss anchors


def test_c8_loss_anchors(acceptance_log):
    from touchbench.tactile import hand_shape

    rng = np.random.default_rng(8)
    tac, _ = hand_shape()
    valid = np.stack([tac, tac])
    m = rng.uniform(size=(2, 4, 2, 21, 21))
    total, comps = tr.loss(m, m, valid)
    loss_ok = float(total.data) == tr.LossConfig().lambda_tv * comps["tv"] and comps["tv"] > 0

    cfg = tr.TrainConfig()
    steps = 25 * 12
    w = tr.warmup_steps(steps, cfg)
    lr_err = max(abs(tr.lr_at(w, steps, cfg) - 5e-5), abs(tr.lr_at(steps, steps, cfg) - 1e-6))

    small = mdl.ModelConfig(D=8, heads=2, T=4, decoder_hidden=16, gate_hidden=8)
    eps = corpus.synthetic_corpus(4, 8, synthgen.GenConfig(min_frames=40, max_frames=48))
    feats = mdl.prepare_episodes(eps, small)
    samples = tr.epoch_samples(feats, 0, dataclasses.replace(cfg, clips_per_episode=2), small)[:6]
    fz = mdl.Featurizer(small)
    params = mdl.init_params(small, 0)
    g3, _ = tr.accumulate_gradients(params, [tr.batch_arrays(feats, samples[i:i + 2], fz) for i in (0, 2, 4)],
                                    small, tr.LossConfig())
    g1, _ = tr.accumulate_gradients(params, [tr.batch_arrays(feats, samples, fz)], small, tr.LossConfig())
    acc_err = max(float(np.max(np.abs(g3[k] - g1[k]))) for k in g1)

    ok = loss_ok and lr_err <= 1e-12 and acc_err <= 1e-6
    _record(acceptance_log, 8, ok, f"loss(M,M) = lambda_tv*TV exactly: {loss_ok}; lr anchor err {lr_err:.1e}; "
                                   f"accumulation k=3 vs batch 6 max |dg| {acc_err:.1e}")
    assert ok


# ----------------------------------------------------------------------------
# 9. flexible inference


@pytest.mark.slow
def test_c9_flexible_inference(desk, trained, tmp_path, acceptance_log):
    run, parts, feats = desk
    params, _ = trained(run.train.view_dropout, 1.0, SEEDS[0])
    ck = mdl.save_checkpoint(tmp_path / "best.tbc", params, run.model)
    loaded, model_cfg, _, _ = mdl.load_checkpoint(ck)
    reports = {v: mt.evaluate(loaded, feats["test_seen"], v, run.eval, model_cfg)
               for v in ("ego", "ego+wl", "ego+wr", ALL)}

    # same episodes with the wrist streams removed entirely
    worst = 0.0
    fz = mdl.Featurizer(model_cfg)
    for ep, f in zip(parts["test_seen"], feats["test_seen"]):
        stripped = dataclasses.replace(ep, frames=[
            dataclasses.replace(fr, images={ViewId.EGO: fr.images[ViewId.EGO]}) for fr in ep.frames])
        g = mdl.prepare_episode(stripped, fz, f.tokens.dtype)
        assert not g.available[1:].any()
        a, _ = mt.predict_episode(loaded, f, "ego", model_cfg)
        b, _ = mt.predict_episode(loaded, g, "ego", model_cfg)
        worst = max(worst, float(np.max(np.abs(a - b))))
    ok = len(reports) == 4 and worst == 0.0
    _record(acceptance_log, 9, ok, "one checkpoint evaluated under " + ", ".join(
        f"{v} (V.IoU {r.volumetric_iou:.4f})" for v, r in reports.items())
        + f"; ego-only output change without wrist streams {worst:.1e}")
    assert ok
