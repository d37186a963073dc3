"""Contact-weighted loss, view dropout, AdamW with warmup-cosine, training loop."""

from __future__ import annotations

import dataclasses
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import metrics as mt
from . import model as mdl
from . import tensor as tn
from .core import ViewId, clip_starts
from .synthgen import GLOVE_RGB
from .tensor import Tensor


@dataclass
class LossConfig:
    lambda_mse: float = 1.0
    lambda_l1: float = 0.5
    lambda_tv: float = 0.01
    contact_threshold: float = 0.1
    contact_weight: float = 3.0

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be nonnegative")


@dataclass
class TrainConfig:
    lr: float = 5e-5
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = 1e-8
    epochs: int = 25
    warmup_epochs: int = 10
    min_lr: float = 1e-6
    view_dropout: float = 0.3
    glove_aug_prob: float = 0.2
    batch_size: int = 4
    grad_accum: int = 3
    clips_per_episode: int = 1
    seed: int = 0
    init_seed: int | None = None
    val_views: str = "ego+wl+wr"
    val_max_episodes: int = 1000
    dtype: str = "float64"

    def __post_init__(self):
        self.betas = tuple(float(b) for b in self.betas)
        if not 0 <= self.view_dropout < 1:
            raise ValueError("view_dropout must lie in [0, 1)")
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs exceeds epochs")
        if self.batch_size < 1 or self.grad_accum < 1 or self.epochs < 1:
            raise ValueError("batch_size, grad_accum and epochs must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d


# ----------------------------------------------------------------------------
# loss


def _weights(target: np.ndarray, valid: np.ndarray, cfg: LossConfig) -> np.ndarray:
    w = np.where(target > cfg.contact_threshold, cfg.contact_weight, 1.0)
    return w * valid


def loss(pred, target: np.ndarray, valid: np.ndarray, cfg: LossConfig | None = None):
    """Contact-weighted MSE + L1 plus total variation of the prediction.

    Shapes: pred/target (B, T, 2, G, G) or (T, 2, G, G); valid (B, 2, G, G),
    (2, G, G) or the full target shape. Each clip gets its own weighted mean
    and the batch loss is the mean over clips. Returns (total Tensor, dict of
    float components).
    """
    cfg = cfg or LossConfig()
    pred = tn.as_tensor(pred)
    target = np.asarray(target, dtype=pred.data.dtype)
    if pred.shape != target.shape:
        raise tn.ShapeError(f"loss: prediction {pred.shape} vs target {target.shape}")
    valid = np.asarray(valid, dtype=bool)
    if pred.ndim == 4:
        pred = tn.reshape(pred, (1,) + pred.shape)
        target = target[None]
        valid = valid[None]
    if valid.ndim == 4:
        valid = valid[:, None]
    B = target.shape[0]
    valid = np.broadcast_to(valid, target.shape)
    target = np.where(valid, np.nan_to_num(target, nan=0.0), 0.0)

    w = _weights(target, valid, cfg)
    wsum = w.reshape(B, -1).sum(axis=1)
    wn = np.divide(w, wsum.reshape(B, 1, 1, 1, 1) * B, out=np.zeros_like(w), where=wsum.reshape(B, 1, 1, 1, 1) > 0)

    err = tn.sub(pred, target)
    mse = tn.sum_(tn.mul(tn.mul(err, err), wn))
    l1 = tn.sum_(tn.mul(tn.abs_(err), wn))

    # TV over adjacent pairs of valid cells, pooled per clip
    mh = valid[..., :, 1:] & valid[..., :, :-1]
    mv = valid[..., 1:, :] & valid[..., :-1, :]
    npairs = mh.reshape(B, -1).sum(axis=1) + mv.reshape(B, -1).sum(axis=1)
    scale = np.divide(1.0, npairs * B, out=np.zeros(B), where=npairs > 0).reshape(B, 1, 1, 1, 1)
    dh = tn.abs_(tn.sub(tn.slice_(pred, (Ellipsis, slice(None), slice(1, None))),
                        tn.slice_(pred, (Ellipsis, slice(None), slice(None, -1)))))
    dv = tn.abs_(tn.sub(tn.slice_(pred, (Ellipsis, slice(1, None), slice(None))),
                        tn.slice_(pred, (Ellipsis, slice(None, -1), slice(None)))))
    tv = tn.add(tn.sum_(tn.mul(dh, mh * scale)), tn.sum_(tn.mul(dv, mv * scale)))

    total = tn.add(tn.add(tn.mul(mse, cfg.lambda_mse), tn.mul(l1, cfg.lambda_l1)), tn.mul(tv, cfg.lambda_tv))
    comps = {"mse": float(mse.data), "l1": float(l1.data), "tv": float(tv.data), "total": float(total.data)}
    return total, comps


# ----------------------------------------------------------------------------
# view dropout, schedule, optimizer


def view_dropout(available: Iterable[ViewId], p: float, rng: np.random.Generator) -> frozenset[ViewId]:
    """Keep ego; keep each wrist view independently with probability 1 - p."""
    avail = mdl.make_viewset(available)
    kept = {ViewId.EGO}
    for v in (ViewId.WRIST_LEFT, ViewId.WRIST_RIGHT):
        u = rng.random()
        if v in avail and u >= p:
            kept.add(v)
    return frozenset(kept)


def warmup_steps(total_steps: int, cfg: TrainConfig) -> int:
    return int(round(total_steps * cfg.warmup_epochs / cfg.epochs))


def lr_at(step: int, total_steps: int, cfg: TrainConfig) -> float:
    if not 0 <= step <= total_steps:
        raise ValueError(f"step {step} outside [0, {total_steps}]")
    w = warmup_steps(total_steps, cfg)
    if w > 0 and step <= w:
        return cfg.lr * step / w
    if total_steps == w:
        return cfg.lr
    frac = (step - w) / (total_steps - w)
    return cfg.min_lr + 0.5 * (cfg.lr - cfg.min_lr) * (1.0 + math.cos(math.pi * frac))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def arrays(self) -> dict[str, np.ndarray]:
        out = {f"m.{k}": a for k, a in self.m.items()}
        out.update({f"v.{k}": a for k, a in self.v.items()})
        return out

    @classmethod
    def from_arrays(cls, step: int, arrays: Mapping[str, np.ndarray]) -> "AdamState":
        s = cls(step)
        for k, a in arrays.items():
            kind, _, name = k.partition(".")
            if kind == "m":
                s.m[name] = a
            elif kind == "v":
                s.v[name] = a
        return s


def optimizer_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray], state: AdamState,
                   cfg: TrainConfig, lr: float | None = None) -> AdamState:
    """One AdamW update in place: decoupled decay, then bias-corrected Adam."""
    lr = cfg.lr if lr is None else lr
    b1, b2 = cfg.betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise tn.ShapeError(f"gradient for {k}: {g.shape} vs {p.data.shape}")
        m = state.m.get(k)
        v = state.v.get(k)
        m = b1 * m + (1 - b1) * g if m is not None else (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g if v is not None else (1 - b2) * g * g
        state.m[k], state.v[k] = m, v
        data = p.data - lr * cfg.weight_decay * p.data
        p.data = data - lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)
    return state


# ----------------------------------------------------------------------------
# augmentation


def glove_mask(image: np.ndarray, tol: float = 0.15) -> np.ndarray:
    """Pixels whose colour is within ``tol`` (per channel) of the glove colour."""
    return np.all(np.abs(image - GLOVE_RGB) <= tol, axis=-1)


def _hue_matrix(angle: float) -> np.ndarray:
    """Rotation about the grey axis of RGB space."""
    c, s = math.cos(angle), math.sin(angle)
    k = 1.0 / 3.0
    r = math.sqrt(k)
    return np.array([
        [c + (1 - c) * k, k * (1 - c) - r * s, k * (1 - c) + r * s],
        [k * (1 - c) + r * s, c + k * (1 - c), k * (1 - c) - r * s],
        [k * (1 - c) - r * s, k * (1 - c) + r * s, c + k * (1 - c)],
    ])


def draw_glove_jitter(rng: np.random.Generator) -> tuple[float, float]:
    return float(rng.uniform(-0.6, 0.6)), float(rng.uniform(0.7, 1.3))


def apply_glove_jitter(image: np.ndarray, jitter: tuple[float, float]) -> np.ndarray:
    """Float image in [0, 1]; hue rotation and brightness gain on glove pixels."""
    angle, gain = jitter
    mask = glove_mask(image)
    out = image.copy()
    out[mask] = np.clip(gain * (image[mask] @ _hue_matrix(angle).T), 0.0, 1.0)
    return out


def augment_glove_color(image: np.ndarray, prob: float, rng: np.random.Generator) -> np.ndarray:
    """With probability ``prob`` jitter the glove colour; returns floats in [0, 1]."""
    img = np.asarray(image)
    img = img / 255.0 if img.dtype == np.uint8 else img.astype(float)
    if rng.random() >= prob:
        return img
    return apply_glove_jitter(img, draw_glove_jitter(rng))


# ----------------------------------------------------------------------------
# batches and steps


@dataclass
class Sample:
    episode: int
    indices: tuple[int, ...]
    views: frozenset
    jitter: tuple[float, float] | None = None


def batch_arrays(feats: Sequence[mdl.EpisodeFeatures], samples: Sequence[Sample], featurizer: mdl.Featurizer):
    tok, vm, jt, tg, va = mdl.gather(feats, [(s.episode, s.indices, s.views) for s in samples])
    for b, s in enumerate(samples):
        if s.jitter is None:
            continue
        ep = feats[s.episode].episode
        for v in s.views:
            imgs = np.stack([apply_glove_jitter(ep.frames[i].images[v] / 255.0, s.jitter) for i in s.indices])
            tok[b, :, int(v)] = featurizer(imgs)
    return tok.astype(tn.get_default_dtype()), vm, jt.astype(tn.get_default_dtype()), tg, va


def accumulate_gradients(params: Mapping[str, Tensor], micro_batches: Sequence[tuple], model_cfg: mdl.ModelConfig,
                         loss_cfg: LossConfig) -> tuple[dict[str, np.ndarray], dict[str, float]]:
    """Summed gradients of the mean per-clip loss over all micro-batches.

    Each micro-batch loss is scaled by its share of clips, so k micro-batches
    of size b give the gradient of one batch of size k*b.
    """
    total = sum(mb[0].shape[0] for mb in micro_batches)
    grads = {k: np.zeros_like(p.data) for k, p in params.items()}
    comps = {"mse": 0.0, "l1": 0.0, "tv": 0.0, "total": 0.0}
    for tok, vm, jt, tg, va in micro_batches:
        share = tok.shape[0] / total
        for p in params.values():
            p.grad = None
        pred = mdl.forward_tokens(params, tok, vm, jt, model_cfg)
        L, c = loss(pred, tg, va, loss_cfg)
        tn.backward(tn.mul(L, share))
        for k, p in params.items():
            if p.grad is not None:
                grads[k] += p.grad
            p.grad = None
        for key in comps:
            comps[key] += share * c[key]
    return grads, comps


def epoch_samples(feats: Sequence[mdl.EpisodeFeatures], epoch: int, cfg: TrainConfig, model_cfg: mdl.ModelConfig,
                  rng: np.random.Generator | None = None) -> list[Sample]:
    """Shuffled clip samples for one epoch, drawn from a per-epoch generator."""
    rng = rng or np.random.default_rng([cfg.seed, epoch])
    order = rng.permutation(np.repeat(np.arange(len(feats)), cfg.clips_per_episode))
    out = []
    for e in order:
        f = feats[int(e)]
        starts = clip_starts(len(f), model_cfg.T, model_cfg.stride)
        s0 = int(starts[int(rng.integers(len(starts)))])
        idx = tuple(range(s0, s0 + model_cfg.stride * model_cfg.T, model_cfg.stride))
        avail = [ViewId(i) for i in np.flatnonzero(f.available)]
        views = view_dropout(avail, cfg.view_dropout, rng)
        jitter = draw_glove_jitter(rng) if rng.random() < cfg.glove_aug_prob else None
        out.append(Sample(int(e), idx, views, jitter))
    return out


def steps_per_epoch(n_samples: int, cfg: TrainConfig) -> int:
    return math.ceil(n_samples / (cfg.batch_size * cfg.grad_accum))


# ----------------------------------------------------------------------------
# loop


@dataclass
class TrainResult:
    params: dict[str, Tensor]
    best_params: dict[str, Tensor]
    best_epoch: int
    best_val: float
    log: list[dict]
    state: AdamState


def _copy_params(params: Mapping[str, Tensor]) -> dict[str, Tensor]:
    return {k: tn.parameter(p.data.copy()) for k, p in params.items()}


def save_training_state(path: Path, params, best, state: AdamState, model_cfg, cfg: TrainConfig,
                        loss_cfg: LossConfig, epoch: int, best_epoch: int, best_val: float, log: list[dict],
                        meta: Mapping | None = None) -> Path:
    arrays = state.arrays()
    arrays.update({f"best.{k}": p.data for k, p in best.items()})
    extra = {**dict(meta or {}), "kind": "training_state", "epoch": epoch, "adam_step": state.step, "best_epoch": best_epoch,
             "best_val": best_val, "train_config": cfg.to_dict(), "loss_config": dataclasses.asdict(loss_cfg),
             "log": log}
    return mdl.save_checkpoint(path, params, model_cfg, extra, arrays)


def train(train_feats: Sequence[mdl.EpisodeFeatures], val_feats: Sequence[mdl.EpisodeFeatures],
          model_cfg: mdl.ModelConfig, cfg: TrainConfig, loss_cfg: LossConfig | None = None,
          out_dir: str | Path | None = None, resume: str | Path | None = None,
          stop_after: int | None = None, log_fn: Callable[[dict, float], None] | None = None,
          meta: Mapping | None = None) -> TrainResult:
    """Train from scratch or resume from a training-state checkpoint.

    Writes ``last.tbc`` (full state) and ``best.tbc`` (parameters with the
    best validation V.IoU) to ``out_dir`` after each epoch when given.
    ``stop_after`` ends the run early after that many epochs (for resume tests).
    ``meta`` is embedded in both checkpoints. ``log_fn(entry, seconds)`` sees
    each epoch's log entry; wall time stays out of the log so reruns match.
    """
    if not train_feats:
        raise ValueError("train: empty training set")
    loss_cfg = loss_cfg or LossConfig()
    featurizer = mdl.Featurizer(model_cfg)
    with tn.precision(np.dtype(cfg.dtype)):
        if resume is not None:
            params, _, extra, arrays = mdl.load_checkpoint(resume)
            state = AdamState.from_arrays(extra["adam_step"], {k: v for k, v in arrays.items() if not k.startswith("best.")})
            best = {k[5:]: tn.parameter(v) for k, v in arrays.items() if k.startswith("best.")}
            start, best_epoch, best_val, log = extra["epoch"], extra["best_epoch"], extra["best_val"], list(extra["log"])
        else:
            init_seed = cfg.seed if cfg.init_seed is None else cfg.init_seed
            params = mdl.init_params(model_cfg, init_seed)
            for p in params.values():
                p.data = p.data.astype(cfg.dtype)
            state = AdamState()
            best, start, best_epoch, best_val, log = _copy_params(params), 0, -1, -1.0, []

        n_samples = len(train_feats) * cfg.clips_per_episode
        per_epoch = steps_per_epoch(n_samples, cfg)
        total_steps = per_epoch * cfg.epochs
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        val_cfg = mt.EvalConfig(max_trajectories=cfg.val_max_episodes)
        end = cfg.epochs if stop_after is None else min(cfg.epochs, stop_after)
        for epoch in range(start, end):
            t0 = time.perf_counter()
            samples = epoch_samples(train_feats, epoch, cfg, model_cfg)
            group = cfg.batch_size * cfg.grad_accum
            losses = []
            comp_sum = {"mse": 0.0, "l1": 0.0, "tv": 0.0}
            lr = 0.0
            for lo in range(0, len(samples), group):
                chunk = samples[lo : lo + group]
                micro = [batch_arrays(train_feats, chunk[i : i + cfg.batch_size], featurizer)
                         for i in range(0, len(chunk), cfg.batch_size)]
                grads, comps = accumulate_gradients(params, micro, model_cfg, loss_cfg)
                lr = lr_at(state.step + 1, total_steps, cfg)
                optimizer_step(params, grads, state, cfg, lr)
                losses.append(comps["total"])
                for k in comp_sum:
                    comp_sum[k] += comps[k] / per_epoch
            entry = {"epoch": epoch + 1, "loss": float(np.mean(losses)), "loss_median": float(np.median(losses)),
                     "lr": lr, **comp_sum}
            if val_feats:
                rep = mt.evaluate(params, val_feats, cfg.val_views, val_cfg, model_cfg)
                entry.update({f"val_{m}": rep.value(m) for m in mt.METRICS})
                if rep.volumetric_iou > best_val:
                    best_val, best_epoch, best = rep.volumetric_iou, epoch + 1, _copy_params(params)
            else:
                best_epoch, best = epoch + 1, _copy_params(params)
            log.append(entry)
            if log_fn:
                log_fn(entry, time.perf_counter() - t0)
            if out is not None:
                save_training_state(out / "last.tbc", params, best, state, model_cfg, cfg, loss_cfg,
                                    epoch + 1, best_epoch, best_val, log, meta)
                mdl.save_checkpoint(out / "best.tbc", best, model_cfg,
                                    {**dict(meta or {}), "kind": "best", "epoch": best_epoch,
                                     "val_volumetric_iou": best_val})
        return TrainResult(params, best, best_epoch, best_val, log, state)


def write_log(path: str | Path, log: Sequence[Mapping]) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".partial")
    tmp.write_text("".join(json.dumps(e, sort_keys=True) + "\n" for e in log))
    tmp.replace(path)
    return path
