import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from touchbench import model as mdl
from touchbench import tensor as tn
from touchbench import train as tr
from touchbench.core import ALL_VIEWS, ViewId

MCFG = mdl.ModelConfig(D=8, heads=2, T=4, decoder_hidden=16, gate_hidden=8)


def _tv(m, valid):
    """Brute-force pooled TV over valid adjacent pairs (single clip)."""
    diffs = []
    T, H = m.shape[0], m.shape[1]
    for t in range(T):
        for h in range(H):
            for r in range(21):
                for c in range(21):
                    if c + 1 < 21 and valid[h, r, c] and valid[h, r, c + 1]:
                        diffs.append(abs(m[t, h, r, c + 1] - m[t, h, r, c]))
                    if r + 1 < 21 and valid[h, r, c] and valid[h, r + 1, c]:
                        diffs.append(abs(m[t, h, r + 1, c] - m[t, h, r, c]))
    return float(np.mean(diffs)) if diffs else 0.0


def _valid():
    from touchbench.tactile import hand_shape
    tac, _ = hand_shape()
    return np.stack([tac, tac])


def test_loss_identity_is_tv_only():
    rng = np.random.default_rng(0)
    valid = _valid()
    m = rng.uniform(size=(3, 2, 21, 21))
    total, comps = tr.loss(m, m, valid)
    assert comps["mse"] == 0 and comps["l1"] == 0
    assert float(total.data) == tr.LossConfig().lambda_tv * comps["tv"]
    assert comps["tv"] == pytest.approx(_tv(m, valid), rel=1e-12)


def test_loss_single_cell_hand_value():
    valid = np.zeros((2, 21, 21), bool)
    valid[0, 10, 10] = True
    target = np.zeros((1, 2, 21, 21))
    target[0, 0, 10, 10] = 0.5
    total, comps = tr.loss(np.zeros_like(target), target, valid)
    assert comps["mse"] == pytest.approx(0.25) and comps["l1"] == pytest.approx(0.5)
    assert comps["tv"] == 0 and float(total.data) == pytest.approx(0.5)


def test_constant_prediction_has_zero_tv():
    _, comps = tr.loss(np.full((2, 2, 21, 21), 0.3), np.zeros((2, 2, 21, 21)), _valid())
    assert comps["tv"] == 0


def test_loss_shape_mismatch():
    with pytest.raises(tn.ShapeError):
        tr.loss(np.zeros((2, 2, 21, 21)), np.zeros((3, 2, 21, 21)), _valid())


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6))
def test_loss_nonnegative(seed):
    rng = np.random.default_rng(seed)
    p, t = rng.uniform(size=(2, 2, 2, 21, 21)), rng.uniform(size=(2, 2, 2, 21, 21))
    valid = rng.uniform(size=(2, 2, 21, 21)) > 0.3
    assert float(tr.loss(p, t, valid)[0].data) >= 0


def test_contact_weighting_directional():
    # same small error at a contact cell and at a non-contact cell
    valid = np.zeros((2, 21, 21), bool)
    valid[0, 5, 5] = valid[0, 15, 15] = True
    target = np.zeros((1, 2, 21, 21))
    target[0, 0, 5, 5] = 0.5
    base = target.copy()
    cfg = tr.LossConfig(lambda_l1=0.0, lambda_tv=0.0)

    def L(pred):
        return float(tr.loss(pred, target, valid, cfg)[0].data)

    eps = 1e-4
    hot, cold = base.copy(), base.copy()
    hot[0, 0, 5, 5] += eps
    cold[0, 0, 15, 15] += eps
    assert (L(hot) - L(base)) / (L(cold) - L(base)) == pytest.approx(3.0, rel=1e-9)


def test_view_dropout_edges():
    rng = np.random.default_rng(0)
    assert all(tr.view_dropout(ALL_VIEWS, 1.0, rng) == {ViewId.EGO} for _ in range(100))
    assert all(tr.view_dropout(ALL_VIEWS, 0.0, rng) == set(ALL_VIEWS) for _ in range(100))
    assert tr.view_dropout([ViewId.EGO, ViewId.WRIST_LEFT], 0.0, rng) == {ViewId.EGO, ViewId.WRIST_LEFT}
    with pytest.raises(ValueError):
        tr.view_dropout([ViewId.WRIST_LEFT], 0.0, rng)


def test_view_dropout_frequencies():
    rng = np.random.default_rng(123)
    n = 100_000
    counts = {}
    for _ in range(n):
        k = mdl.viewset_label(tr.view_dropout(ALL_VIEWS, 0.3, rng))
        counts[k] = counts.get(k, 0) + 1
    # analytic binomial: keep prob 0.7 per wrist
    expected = {"ego+wl+wr": 0.49, "ego+wl": 0.21, "ego+wr": 0.21, "ego": 0.09}
    assert set(counts) == set(expected)
    for k, p in expected.items():
        assert abs(counts[k] / n - p) <= 0.01


def test_lr_anchors():
    cfg = tr.TrainConfig()
    total = 250  # 10 steps per epoch
    w = tr.warmup_steps(total, cfg)
    assert w == 100
    assert tr.lr_at(0, total, cfg) == 0.0
    assert abs(tr.lr_at(w, total, cfg) - 5e-5) <= 1e-12
    assert abs(tr.lr_at(total, total, cfg) - 1e-6) <= 1e-12
    mid = w + (total - w) // 2
    assert abs(tr.lr_at(mid, total, cfg) - (5e-5 + 1e-6) / 2) <= 1e-12
    with pytest.raises(ValueError):
        tr.lr_at(total + 1, total, cfg)


def test_lr_continuous_and_unimodal():
    cfg = tr.TrainConfig()
    total = 250
    lrs = [tr.lr_at(s, total, cfg) for s in range(total + 1)]
    peak = int(np.argmax(lrs))
    assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))
    w = tr.warmup_steps(total, cfg)
    # steepest step: linear warmup slope or the cosine slope at its midpoint
    bound = max(cfg.lr / w, (cfg.lr - cfg.min_lr) * math.pi / 2 / (total - w))
    assert max(abs(a - b) for a, b in zip(lrs, lrs[1:])) <= bound + 1e-15


def test_train_config_invariants():
    with pytest.raises(ValueError):
        tr.TrainConfig(view_dropout=1.0)
    with pytest.raises(ValueError):
        tr.TrainConfig(epochs=5, warmup_epochs=6)


def _scalar_param(x):
    return {"w": tn.parameter(np.array([x]))}


def test_adamw_zero_grad_no_decay():
    p = _scalar_param(0.7)
    tr.optimizer_step(p, {"w": np.zeros(1)}, tr.AdamState(), tr.TrainConfig(weight_decay=0.0), lr=0.1)
    assert p["w"].data[0] == 0.7


def test_adamw_unit_step():
    p = _scalar_param(1.0)
    tr.optimizer_step(p, {"w": np.ones(1)}, tr.AdamState(), tr.TrainConfig(weight_decay=0.0), lr=0.1)
    # bias-corrected m/sqrt(v) = 1, so the step is lr / (1 + eps)
    assert p["w"].data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)


def test_adamw_decoupled_decay():
    cfg = tr.TrainConfig(weight_decay=0.05)
    lr, g = 1e-3, 1e-300
    p = _scalar_param(2.0)
    state = tr.AdamState()
    for _ in range(3):
        before = p["w"].data[0]
        tr.optimizer_step(p, {"w": np.array([g])}, state, cfg, lr=lr)
        shrink = before - p["w"].data[0]
        assert shrink == pytest.approx(lr * cfg.weight_decay * before, rel=1e-6)


def test_glove_augmentation():
    rng = np.random.default_rng(0)
    img = (np.random.default_rng(1).uniform(size=(8, 8, 3)) * 255).astype(np.uint8)
    img[2:5, 2:5] = np.rint(tr.GLOVE_RGB * 255).astype(np.uint8)
    assert np.array_equal(tr.augment_glove_color(img, 0.0, rng), img / 255.0)
    out = tr.augment_glove_color(img, 1.0, np.random.default_rng(5))
    assert out.min() >= 0 and out.max() <= 1
    assert np.array_equal(out, tr.augment_glove_color(img, 1.0, np.random.default_rng(5)))
    # only glove pixels change
    changed = np.any(out != img / 255.0, axis=-1)
    assert changed[2:5, 2:5].all() and not changed[tr.glove_mask(img / 255.0) == False].any()


@pytest.fixture(scope="module")
def feats(small_corpus):
    return mdl.prepare_episodes(small_corpus[:8], MCFG)


def _tcfg(**kw):
    base = dict(lr=2e-3, epochs=2, warmup_epochs=1, batch_size=2, grad_accum=3, clips_per_episode=2,
                glove_aug_prob=0.2, val_max_episodes=2)
    base.update(kw)
    return tr.TrainConfig(**base)


def test_grad_accumulation_matches_large_batch(feats):
    cfg = _tcfg()
    samples = tr.epoch_samples(feats, 0, cfg, MCFG)[:6]
    featurizer = mdl.Featurizer(MCFG)
    params = mdl.init_params(MCFG, 0)
    micro = [tr.batch_arrays(feats, samples[i:i + 2], featurizer) for i in range(0, 6, 2)]
    g_acc, c_acc = tr.accumulate_gradients(params, micro, MCFG, tr.LossConfig())
    big = [tr.batch_arrays(feats, samples, featurizer)]
    g_big, c_big = tr.accumulate_gradients(params, big, MCFG, tr.LossConfig())
    assert abs(c_acc["total"] - c_big["total"]) <= 1e-12
    for k in g_big:
        assert np.max(np.abs(g_acc[k] - g_big[k])) <= 1e-6 * max(1.0, np.abs(g_big[k]).max())


def test_smoke_loss_decreases(feats):
    for seed in range(3):
        res = tr.train(feats[:8], [], MCFG, _tcfg(seed=seed, clips_per_episode=8))
        assert res.log[1]["loss_median"] < res.log[0]["loss_median"]


def test_training_deterministic_and_resumable(feats, tmp_path):
    cfg = _tcfg(epochs=3, seed=4)
    a = tr.train(feats[:6], feats[6:8], MCFG, cfg, out_dir=tmp_path / "a")
    b = tr.train(feats[:6], feats[6:8], MCFG, cfg, out_dir=tmp_path / "b")
    assert a.log == b.log
    assert (tmp_path / "a/last.tbc").read_bytes() == (tmp_path / "b/last.tbc").read_bytes()
    assert (tmp_path / "a/best.tbc").read_bytes() == (tmp_path / "b/best.tbc").read_bytes()

    tr.train(feats[:6], feats[6:8], MCFG, cfg, out_dir=tmp_path / "c", stop_after=1)
    c = tr.train(feats[:6], feats[6:8], MCFG, cfg, out_dir=tmp_path / "c", resume=tmp_path / "c/last.tbc")
    assert c.log == a.log
    assert all(np.array_equal(c.params[k].data, a.params[k].data) for k in a.params)
    assert (tmp_path / "c/last.tbc").read_bytes() == (tmp_path / "a/last.tbc").read_bytes()


def test_log_contents_and_best_selection(feats):
    res = tr.train(feats[:6], feats[6:8], MCFG, _tcfg(epochs=2))
    for e in res.log:
        assert {"epoch", "loss", "lr", "mse", "l1", "tv", "val_volumetric_iou"} <= set(e)
    vals = [e["val_volumetric_iou"] for e in res.log]
    assert res.best_epoch == 1 + int(np.argmax(vals)) and res.best_val == max(vals)


def test_featurizer_frozen_through_training(feats, small_corpus):
    img = small_corpus[0].frames[0].images[ViewId.EGO]
    before = mdl.Featurizer(MCFG)(img)
    res = tr.train(feats[:4], [], MCFG, _tcfg(epochs=1, warmup_epochs=0))
    assert not any(k.startswith("featurizer") for k in res.params)
    assert np.array_equal(mdl.Featurizer(MCFG)(img), before)


def test_empty_training_set():
    with pytest.raises(ValueError):
        tr.train([], [], MCFG, _tcfg())
