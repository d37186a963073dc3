"""Multi-view vision-to-touch network.

Pipeline per clip: frozen patch featurizer + learned view embedding for
each present view, a small transformer over per-view summary tokens, a
softmax gate that mixes the per-view feature maps, a temporal transformer
per patch position, a pose encoder over the 42 joints, joint-to-patch
cross-attention, and one MLP decoder per hand producing 21x21 maps.

Views always occupy fixed slots (ego, wl, wr); absent views are masked
out with additive -inf so the same weights serve every view subset.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import tensor as tn
from .container import ContainerReader, ContainerWriter
from .core import ALL_VIEWS, GRID, NUM_JOINTS, Clip, Episode, ViewId
from .tensor import NEG_INF, Tensor

CHECKPOINT_FORMAT = "touchbench-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    D: int = 32
    heads: int = 2
    image_size: int = 56
    patch: int = 14
    T: int = 8
    stride: int = 2
    grid: int = GRID
    joints: int = NUM_JOINTS
    cross_view_layers: int = 1
    temporal_layers: int = 1
    pose_layers: int = 1
    mlp_ratio: int = 2
    gate_hidden: int = 16
    decoder_hidden: int = 64
    featurizer_seed: int = 0
    temporal_encoding: bool = True
    pose_scale: float = 10.0
    decoder_bias_init: float = -2.0

    def __post_init__(self):
        if self.D % self.heads:
            raise ValueError(f"D={self.D} not divisible by heads={self.heads}")
        if self.image_size % self.patch:
            raise ValueError(f"image_size={self.image_size} not divisible by patch={self.patch}")
        if self.joints != NUM_JOINTS or self.grid != GRID:
            raise ValueError("joints and grid are fixed at 42 and 21")

    @property
    def N(self) -> int:
        return (self.image_size // self.patch) ** 2

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def micro(cls, **kw) -> "ModelConfig":
        base = dict(D=8, heads=2, image_size=28, T=2, gate_hidden=4, decoder_hidden=8)
        base.update(kw)
        return cls(**base)


# ----------------------------------------------------------------------------
# views


def make_viewset(views: Iterable[ViewId | str] | str) -> frozenset[ViewId]:
    """Accepts ViewIds, short names, or a string like ``"ego,wl"`` / ``"ego+wl"``."""
    if isinstance(views, str):
        views = [p for p in views.replace("+", ",").split(",") if p.strip()]
    vs = frozenset(v if isinstance(v, ViewId) else ViewId.parse(v) for v in views)
    if ViewId.EGO not in vs:
        raise ValueError("a view set must contain the egocentric view")
    return vs


def parse_views(text: str) -> frozenset[ViewId]:
    return make_viewset(text)


def viewset_label(vs: Iterable[ViewId]) -> str:
    return "+".join(v.short for v in sorted(vs))


VIEWSETS = (
    make_viewset([ViewId.EGO]),
    make_viewset([ViewId.EGO, ViewId.WRIST_LEFT]),
    make_viewset([ViewId.EGO, ViewId.WRIST_RIGHT]),
    make_viewset(ALL_VIEWS),
)


def view_mask(vs: Iterable[ViewId]) -> np.ndarray:
    m = np.zeros(3, dtype=bool)
    for v in vs:
        m[int(v)] = True
    return m


# ----------------------------------------------------------------------------
# frozen featurizer


def sinusoidal(n: int, d: int, base: float = 10000.0) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d // 2)[None, :]
    ang = pos / base ** (2 * i / d)
    out = np.zeros((n, d))
    out[:, 0::2] = np.sin(ang)
    out[:, 1::2] = np.cos(ang)[:, : (d - d // 2)]
    return out


def sinusoidal_2d(side: int, d: int) -> np.ndarray:
    """Row encoding in the first half of the channels, column in the second."""
    half = d // 2
    rows = sinusoidal(side, half)
    cols = sinusoidal(side, d - half)
    return np.concatenate([np.repeat(rows, side, axis=0), np.tile(cols, (side, 1))], axis=1)


class Featurizer:
    """Fixed random patch projection standing in for a frozen backbone."""

    def __init__(self, cfg: ModelConfig):
        self.cfg = cfg
        p = cfg.patch
        rng = np.random.default_rng([cfg.featurizer_seed, 31337])
        self.weight = rng.standard_normal((p * p * 3, cfg.D)) / math.sqrt(p * p * 3)
        self.pos = 0.1 * sinusoidal_2d(cfg.image_size // p, cfg.D)
        self.weight.setflags(write=False)
        self.pos.setflags(write=False)

    def patches(self, images: np.ndarray) -> np.ndarray:
        """(..., H, W, 3) -> (..., N, patch*patch*3) in [-0.5, 0.5]."""
        images = np.asarray(images)
        h, w = images.shape[-3:-1]
        p = self.cfg.patch
        if h != self.cfg.image_size or w != self.cfg.image_size:
            raise ValueError(f"image is {h}x{w}, model expects {self.cfg.image_size}x{self.cfg.image_size}")
        lead = images.shape[:-3]
        x = images.reshape((-1, h // p, p, w // p, p, 3)).transpose(0, 1, 3, 2, 4, 5)
        x = x.reshape(lead + ((h // p) * (w // p), p * p * 3))
        scale = 1.0 / 255.0 if images.dtype == np.uint8 else 1.0
        return x * scale - 0.5

    def __call__(self, images: np.ndarray, with_position: bool = True) -> np.ndarray:
        tok = self.patches(images) @ self.weight
        return tok + self.pos if with_position else tok


# ----------------------------------------------------------------------------
# parameters


def _linear(rng, fan_in, fan_out, scale=1.0):
    return rng.standard_normal((fan_in, fan_out)) * (scale / math.sqrt(fan_in))


def _block_params(rng, prefix: str, D: int, r: int, cross: bool = False) -> dict[str, np.ndarray]:
    p = {
        f"{prefix}.ln1.w": np.ones(D), f"{prefix}.ln1.b": np.zeros(D),
        f"{prefix}.attn.wq": _linear(rng, D, D), f"{prefix}.attn.wk": _linear(rng, D, D),
        f"{prefix}.attn.wv": _linear(rng, D, D), f"{prefix}.attn.wo": _linear(rng, D, D, 0.5),
        f"{prefix}.attn.bo": np.zeros(D),
        f"{prefix}.ln2.w": np.ones(D), f"{prefix}.ln2.b": np.zeros(D),
        f"{prefix}.mlp.w1": _linear(rng, D, r * D), f"{prefix}.mlp.b1": np.zeros(r * D),
        f"{prefix}.mlp.w2": _linear(rng, r * D, D, 0.5), f"{prefix}.mlp.b2": np.zeros(D),
    }
    if cross:
        p[f"{prefix}.lnkv.w"] = np.ones(D)
        p[f"{prefix}.lnkv.b"] = np.zeros(D)
    return p


def init_params(cfg: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    rng = np.random.default_rng([seed, 4242])
    D, r = cfg.D, cfg.mlp_ratio
    p: dict[str, np.ndarray] = {"view_embed": rng.standard_normal((3, D)) * 0.1}
    for i in range(cfg.cross_view_layers):
        p.update(_block_params(rng, f"xview.{i}", D, r))
    p.update({
        "gate.w1": _linear(rng, D, cfg.gate_hidden), "gate.b1": np.zeros(cfg.gate_hidden),
        # no output bias: a shift shared by all views cancels in the softmax
        "gate.w2": _linear(rng, cfg.gate_hidden, 1, 0.1),
    })
    for i in range(cfg.temporal_layers):
        p.update(_block_params(rng, f"temporal.{i}", D, r))
    p.update({
        "pose.w": _linear(rng, 3, D), "pose.b": np.zeros(D),
        "pose.joint_embed": rng.standard_normal((cfg.joints, D)) * 0.5,
    })
    for i in range(cfg.pose_layers):
        p.update(_block_params(rng, f"pose.{i}", D, r))
    p.update(_block_params(rng, "fuse", D, r, cross=True))
    flat = (cfg.joints // 2) * D
    for side in ("left", "right"):
        p.update({
            f"dec.{side}.w1": _linear(rng, flat, cfg.decoder_hidden), f"dec.{side}.b1": np.zeros(cfg.decoder_hidden),
            f"dec.{side}.w2": _linear(rng, cfg.decoder_hidden, cfg.grid * cfg.grid, 0.5),
            f"dec.{side}.b2": np.full(cfg.grid * cfg.grid, cfg.decoder_bias_init),
        })
    return {k: tn.parameter(v) for k, v in p.items()}


def param_count(params: Mapping[str, Tensor]) -> int:
    return int(sum(t.data.size for t in params.values()))


# ----------------------------------------------------------------------------
# building blocks


def _mha(params, prefix: str, xq: Tensor, xkv: Tensor, heads: int, mask: np.ndarray | None) -> Tensor:
    B, Lq, D = xq.shape
    Lk = xkv.shape[1]
    dh = D // heads

    def split(x, L):
        return tn.transpose(tn.reshape(x, (B, L, heads, dh)), (0, 2, 1, 3))

    q = split(tn.matmul(xq, params[f"{prefix}.attn.wq"]), Lq)
    k = split(tn.matmul(xkv, params[f"{prefix}.attn.wk"]), Lk)
    v = split(tn.matmul(xkv, params[f"{prefix}.attn.wv"]), Lk)
    o = tn.scaled_dot_product_attention(q, k, v, mask)
    o = tn.reshape(tn.transpose(o, (0, 2, 1, 3)), (B, Lq, D))
    return tn.add(tn.matmul(o, params[f"{prefix}.attn.wo"]), params[f"{prefix}.attn.bo"])


def _mlp(params, prefix: str, x: Tensor) -> Tensor:
    h = tn.gelu(tn.add(tn.matmul(x, params[f"{prefix}.mlp.w1"]), params[f"{prefix}.mlp.b1"]))
    return tn.add(tn.matmul(h, params[f"{prefix}.mlp.w2"]), params[f"{prefix}.mlp.b2"])


def _ln(params, name: str, x: Tensor) -> Tensor:
    return tn.layernorm(x, params[f"{name}.w"], params[f"{name}.b"])


def transformer_layer(params, prefix: str, x: Tensor, heads: int, mask: np.ndarray | None = None) -> Tensor:
    """Pre-norm self-attention block on (B, L, D)."""
    h = _ln(params, f"{prefix}.ln1", x)
    x = tn.add(x, _mha(params, prefix, h, h, heads, mask))
    return tn.add(x, _mlp(params, prefix, _ln(params, f"{prefix}.ln2", x)))


def cross_attention_layer(params, prefix: str, q: Tensor, kv: Tensor, heads: int) -> Tensor:
    x = tn.add(q, _mha(params, prefix, _ln(params, f"{prefix}.ln1", q), _ln(params, f"{prefix}.lnkv", kv), heads, None))
    return tn.add(x, _mlp(params, prefix, _ln(params, f"{prefix}.ln2", x)))


# ----------------------------------------------------------------------------
# stages


def encode_views(params, tokens: np.ndarray) -> Tensor:
    """Add view embeddings to featurized tokens laid out (B, T, N, 3, D)."""
    return tn.add(tokens, params["view_embed"])


def cross_view_fuse(params, F: Tensor, vmask: np.ndarray, cfg: ModelConfig, acts: dict | None = None):
    """Summary tokens -> cross-view transformer -> softmax gates -> mixed features.

    ``F`` is (B, T, N, 3, D); ``vmask`` (B, 3) marks present views.
    Returns F_fused (B, T, N, D).
    """
    B, T, N, V, D = F.shape
    summary = tn.mean(F, axis=2)  # (B, T, V, D)
    x = tn.reshape(summary, (B * T, V, D))
    key_mask = np.where(np.repeat(vmask, T, axis=0), 0.0, NEG_INF)  # (B*T, V)
    for i in range(cfg.cross_view_layers):
        x = transformer_layer(params, f"xview.{i}", x, cfg.heads, key_mask[:, None, None, :])
    h = tn.gelu(tn.add(tn.matmul(x, params["gate.w1"]), params["gate.b1"]))
    logits = tn.reshape(tn.matmul(h, params["gate.w2"]), (B * T, V))
    w = tn.softmax(tn.add(logits, key_mask), axis=-1)
    Fv = tn.reshape(tn.transpose(F, (0, 1, 3, 2, 4)), (B * T, V, N * D))
    fused = tn.reshape(tn.matmul(tn.reshape(w, (B * T, 1, V)), Fv), (B, T, N, D))
    if acts is not None:
        acts["s"] = summary.data
        acts["s_hat"] = x.data.reshape(B, T, V, D)
        acts["w"] = w.data.reshape(B, T, V)
        acts["F_fused"] = fused.data
    return fused


def temporal(params, Ff: Tensor, cfg: ModelConfig) -> Tensor:
    """Bidirectional self-attention over time, independently per patch index."""
    B, T, N, D = Ff.shape
    x = tn.transpose(Ff, (0, 2, 1, 3))
    if cfg.temporal_encoding:
        x = tn.add(x, sinusoidal(T, D))
    x = tn.reshape(x, (B * N, T, D))
    for i in range(cfg.temporal_layers):
        x = transformer_layer(params, f"temporal.{i}", x, cfg.heads)
    return tn.transpose(tn.reshape(x, (B, N, T, D)), (0, 2, 1, 3))


def pose_encode(params, joints: np.ndarray, cfg: ModelConfig, joint_ids: np.ndarray | None = None) -> Tensor:
    """(B, T, 42, 3) joints -> (B*T, 42, D) per-joint features."""
    joints = np.asarray(joints, dtype=float)
    if not np.all(np.isfinite(joints)):
        raise ValueError("pose_encode: non-finite joint coordinates")
    B, T, J, _ = joints.shape
    ids = np.arange(J) if joint_ids is None else np.asarray(joint_ids)
    x = tn.add(tn.matmul(joints * cfg.pose_scale, params["pose.w"]), params["pose.b"])
    x = tn.add(x, tn.embedding_lookup(params["pose.joint_embed"], ids))
    x = tn.reshape(x, (B * T, J, cfg.D))
    for i in range(cfg.pose_layers):
        x = transformer_layer(params, f"pose.{i}", x, cfg.heads)
    return x


def pose_vision_attend(params, G: Tensor, H: Tensor, cfg: ModelConfig) -> Tensor:
    """Per-timestep cross-attention: joints (B*T, 42, D) query patches of H (B, T, N, D)."""
    B, T, N, D = H.shape
    return cross_attention_layer(params, "fuse", G, tn.reshape(H, (B * T, N, D)), cfg.heads)


def decode(params, Z: Tensor, B: int, T: int, cfg: ModelConfig) -> Tensor:
    """(B*T, 42, D) -> (B, T, 2, 21, 21) in (0, 1); joints 0-20 left, 21-41 right."""
    half = cfg.joints // 2
    Z = tn.reshape(Z, (B, T, cfg.joints, cfg.D))
    maps = []
    for h, side in enumerate(("left", "right")):
        z = tn.reshape(tn.slice_(Z, (slice(None), slice(None), slice(h * half, (h + 1) * half))), (B, T, half * cfg.D))
        hid = tn.gelu(tn.add(tn.matmul(z, params[f"dec.{side}.w1"]), params[f"dec.{side}.b1"]))
        out = tn.sigmoid(tn.add(tn.matmul(hid, params[f"dec.{side}.w2"]), params[f"dec.{side}.b2"]))
        maps.append(tn.reshape(out, (B, T, 1, cfg.grid, cfg.grid)))
    return tn.concat(maps, axis=2)


def forward_tokens(params, tokens: np.ndarray, vmask: np.ndarray, joints: np.ndarray, cfg: ModelConfig,
                   acts: dict | None = None) -> Tensor:
    """Core forward on pre-featurized inputs.

    tokens (B, T, 3, N, D) with zeros in absent slots, vmask (B, 3) bool with
    ego always set, joints (B, T, 42, 3). Returns (B, T, 2, 21, 21).
    ``acts``, when given, is filled with the intermediate activations
    (F_v, s, s_hat, w, F_fused, H, G, Z) as arrays with a leading batch axis.
    """
    vmask = np.asarray(vmask, dtype=bool)
    if not vmask[:, 0].all():
        raise ValueError("the egocentric view must be present in every sample")
    B, T = tokens.shape[:2]
    F = encode_views(params, np.ascontiguousarray(np.transpose(tokens, (0, 1, 3, 2, 4))))
    if acts is not None:
        acts["F_v"] = np.transpose(F.data, (0, 1, 3, 2, 4))
    Ff = cross_view_fuse(params, F, vmask, cfg, acts)
    H = temporal(params, Ff, cfg)
    G = pose_encode(params, joints, cfg)
    Z = pose_vision_attend(params, G, H, cfg)
    if acts is not None:
        acts["H"] = H.data
        acts["G"] = G.data.reshape(B, T, cfg.joints, cfg.D)
        acts["Z"] = Z.data.reshape(B, T, cfg.joints, cfg.D)
    return decode(params, Z, B, T, cfg)


def clip_tokens(featurizer: Featurizer, clip: Clip, views: Iterable[ViewId]) -> tuple[np.ndarray, np.ndarray]:
    """(T, 3, N, D) tokens for the requested views only; other slots stay zero."""
    cfg = featurizer.cfg
    vs = make_viewset(views)
    out = np.zeros((clip.T, 3, cfg.N, cfg.D))
    for v in sorted(vs):
        imgs = []
        for fr in clip.frames:
            im = fr.images.get(v)
            if im is None:
                raise ValueError(f"frame {fr.frame_index} has no image for view {v.short}")
            imgs.append(im)
        out[:, int(v)] = featurizer(np.stack(imgs))
    return out, view_mask(vs)


def forward(params, clip: Clip, views: Iterable[ViewId], cfg: ModelConfig,
            featurizer: Featurizer | None = None, acts: dict | None = None) -> np.ndarray:
    """Predict (T, 2, 21, 21) pressure for one clip from the given view subset."""
    featurizer = featurizer or Featurizer(cfg)
    tok, vm = clip_tokens(featurizer, clip, views)
    joints = clip.episode.joint_stack(clip.indices)
    out = forward_tokens(params, tok[None], vm[None], joints[None], cfg, acts)
    return out.data[0]


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path: str | Path, params: Mapping[str, Tensor], cfg: ModelConfig,
                    extra: Mapping | None = None, arrays: Mapping[str, np.ndarray] | None = None) -> Path:
    """Parameters (and optional extra arrays, e.g. optimizer moments) in a .tbc container."""
    with ContainerWriter(path, level=None) as w:
        w.set_attrs({
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "model_config": cfg.to_dict(),
            "extra": dict(extra or {}),
        })
        w.create_group("params", {"names": list(params)})
        for name, t in params.items():
            w.write(f"params/{name}", t.data, chunk_rows=None)
        if arrays:
            w.create_group("state", {"names": list(arrays)})
            for name, a in arrays.items():
                w.write(f"state/{name}", np.asarray(a), chunk_rows=None)
    return Path(path)


def load_checkpoint(path: str | Path):
    """-> (params, ModelConfig, extra attrs, state arrays)."""
    with ContainerReader(path) as r:
        if r.attrs.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: not a checkpoint")
        cfg = ModelConfig.from_dict(r.attrs["model_config"])
        params = {n: tn.parameter(r.read(f"params/{n}").copy()) for n in r.group_attrs("params")["names"]}
        state = {}
        if r.has_group("state"):
            state = {n: r.read(f"state/{n}").copy() for n in r.group_attrs("state")["names"]}
        return params, cfg, dict(r.attrs.get("extra", {})), state


# ----------------------------------------------------------------------------
# featurized episodes


@dataclass
class EpisodeFeatures:
    """Per-episode cache of featurized views, joints and targets.

    ``tokens`` is (n, 3, N, D); slots of views the episode lacks are zero and
    ``available`` is False for them. ``target`` has invalid cells zeroed.
    """

    episode: Episode
    tokens: np.ndarray
    available: np.ndarray
    joints: np.ndarray
    target: np.ndarray
    valid: np.ndarray

    @property
    def episode_id(self) -> str:
        return self.episode.meta.episode_id

    @property
    def scenario(self) -> str:
        return self.episode.meta.scenario

    @property
    def task(self) -> str:
        return self.episode.meta.task

    def __len__(self) -> int:
        return self.tokens.shape[0]


def prepare_episode(ep: Episode, featurizer: Featurizer, dtype=np.float64) -> EpisodeFeatures:
    if ep.pressure is None:
        raise ValueError(f"{ep.meta.episode_id}: episode has no preprocessed pressure")
    cfg = featurizer.cfg
    n = len(ep.frames)
    tokens = np.zeros((n, 3, cfg.N, cfg.D), dtype=dtype)
    available = np.zeros(3, dtype=bool)
    for v in ALL_VIEWS:
        if all(fr.images.get(v) is not None for fr in ep.frames):
            tokens[:, int(v)] = featurizer(ep.image_stack(v))
            available[int(v)] = True
    if not available[0]:
        raise ValueError(f"{ep.meta.episode_id}: egocentric stream incomplete")
    valid = np.asarray(ep.pressure_valid, dtype=bool)
    target = np.where(valid, np.nan_to_num(ep.pressure, nan=0.0), 0.0)
    return EpisodeFeatures(ep, tokens, available, ep.joint_stack().astype(dtype), target.astype(dtype), valid)


def prepare_episodes(episodes: Sequence[Episode], cfg: ModelConfig, dtype=np.float64) -> list[EpisodeFeatures]:
    feat = Featurizer(cfg)
    return [prepare_episode(ep, feat, dtype) for ep in episodes]


def gather(feats: Sequence[EpisodeFeatures], picks: Sequence[tuple[int, Sequence[int], frozenset]]):
    """Stack clips ``(episode index, frame indices, views)`` into model inputs.

    Returns tokens (B, T, 3, N, D), view mask (B, 3), joints, targets
    (B, T, 2, 21, 21) and validity (B, 2, 21, 21).
    """
    toks, masks, joints, targets, valid = [], [], [], [], []
    for e, idx, views in picks:
        f = feats[e]
        idx = np.asarray(idx)
        m = view_mask(views)
        if np.any(m & ~f.available):
            raise ValueError(f"{f.episode_id}: requested views not recorded")
        t = f.tokens[idx].copy()
        t[:, ~m] = 0.0
        toks.append(t)
        masks.append(m)
        joints.append(f.joints[idx])
        targets.append(f.target[idx])
        valid.append(f.valid)
    return np.stack(toks), np.stack(masks), np.stack(joints), np.stack(targets), np.stack(valid)
