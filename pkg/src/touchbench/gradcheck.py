"""Finite-difference checks for every tensor primitive and the full model.

Each case builds its inputs from a seed and is scalarised as
``sum(op(x) * R)`` with a fixed random ``R`` so every output coordinate
contributes to the checked gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as tn
from .tensor import Tensor

# max relative error allowed, by check kind
TOLERANCE = {
    "elementwise64": 1e-4,
    "jvp64": 1e-7,
    "jvp32": 1e-4,
    "model64": 1e-4,
}


@dataclass(frozen=True)
class Case:
    make: Callable[[np.random.Generator], list[np.ndarray]]
    op: Callable[..., Tensor]


def _n(*shape):
    return lambda rng: [rng.standard_normal(shape)]


def _away_from_zero(rng, shape):
    x = rng.standard_normal(shape)
    return x + np.sign(x) * 0.1


def _mask_one_hidden(rng):
    q, k, v = (rng.standard_normal((2, 3, 4)) for _ in range(3))
    return [q, k, v]


_ATTN_MASK = np.array([0.0, tn.NEG_INF, 0.0])
_IDS = np.array([2, 0, 2, 4, 1])

CASES: dict[str, Case] = {
    "add": Case(lambda r: [r.standard_normal((3, 4)), r.standard_normal(4)], tn.add),
    "sub": Case(lambda r: [r.standard_normal((3, 4)), r.standard_normal((3, 4))], tn.sub),
    "mul": Case(lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((3, 4))], tn.mul),
    "abs": Case(lambda r: [_away_from_zero(r, (3, 4))], tn.abs_),
    "matmul": Case(lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((4, 5))], tn.matmul),
    "matmul_batched": Case(lambda r: [r.standard_normal((2, 3, 4)), r.standard_normal((2, 4, 2))], tn.matmul),
    "transpose": Case(_n(2, 3, 4), lambda x: tn.transpose(x, (2, 0, 1))),
    "reshape": Case(_n(2, 3, 4), lambda x: tn.reshape(x, (4, 6))),
    "concat": Case(lambda r: [r.standard_normal((2, 3)), r.standard_normal((2, 2))], lambda a, b: tn.concat([a, b], axis=1)),
    "slice": Case(_n(4, 5), lambda x: tn.slice_(x, (slice(1, 3), slice(None, None, 2)))),
    "sum": Case(_n(3, 4), lambda x: tn.sum_(x, axis=1)),
    "mean": Case(_n(3, 4), lambda x: tn.mean(x, axis=0)),
    "softmax": Case(_n(3, 5), lambda x: tn.softmax(x, axis=-1)),
    "layernorm": Case(lambda r: [r.standard_normal((3, 6)), 1 + 0.1 * r.standard_normal(6), r.standard_normal(6)],
                      lambda x, w, b: tn.layernorm(x, w, b)),
    "gelu": Case(_n(3, 4), tn.gelu),
    "sigmoid": Case(_n(3, 4), tn.sigmoid),
    "embedding_lookup": Case(_n(5, 3), lambda t: tn.embedding_lookup(t, _IDS)),
    "attention": Case(lambda r: [r.standard_normal((2, 3, 4)) for _ in range(3)],
                      lambda q, k, v: tn.scaled_dot_product_attention(q, k, v)),
    "attention_masked": Case(_mask_one_hidden, lambda q, k, v: tn.scaled_dot_product_attention(q, k, v, _ATTN_MASK)),
}


def _scalarised(case: Case, rng: np.random.Generator):
    inputs = case.make(rng)
    with tn.precision(np.float64):
        probe = case.op(*[Tensor(a) for a in inputs])
    weights = rng.standard_normal(probe.shape)

    def fn(*xs):
        return tn.sum_(tn.mul(case.op(*xs), weights))

    return fn, inputs


def elementwise_error(name: str, seed: int) -> float:
    fn, inputs = _scalarised(CASES[name], np.random.default_rng([seed, 11]))
    return tn.grad_check(fn, inputs, seed=seed)


def jvp_error(name: str, seed: int, dtype=np.float64, h: float = 1e-5) -> float:
    """Relative error of the directional derivative along a random direction.

    The analytic side runs at ``dtype``; the difference quotient always runs
    in 64-bit, so a 32-bit run measures the accuracy of the 32-bit backward.
    """
    rng = np.random.default_rng([seed, 12])
    fn, inputs = _scalarised(CASES[name], rng)
    # random magnitudes, signs taken from the 64-bit gradient so the
    # directional derivative cannot cancel to ~0
    with tn.precision(np.float64):
        ref = [tn.parameter(a) for a in inputs]
        tn.backward(fn(*ref))
    dirs = [np.abs(rng.standard_normal(a.shape)) * np.sign(r.grad if r.grad is not None else 1.0)
            for a, r in zip(inputs, ref)]
    with tn.precision(dtype):
        leaves = [tn.parameter(a) for a in inputs]
        tn.backward(fn(*leaves))
        analytic = sum(float(np.sum(l.grad.astype(np.float64) * d)) for l, d in zip(leaves, dirs) if l.grad is not None)
    with tn.precision(np.float64):
        def at(s):
            return float(fn(*[Tensor(a + s * d) for a, d in zip(inputs, dirs)]).data)
        numeric = (8 * (at(h) - at(-h)) - (at(2 * h) - at(-2 * h))) / (12 * h)
    return float(tn.relative_error(np.float64(analytic), np.float64(numeric)))


def model_error(seed: int = 0, max_elements: int = 4, with_loss: bool = False,
                h: float = 1e-5, order: int = 2, fd_dtype=np.longdouble) -> float:
    """Full model at micro config, sampled coordinates of every parameter.

    The output is scalarised with fixed random weights. ``with_loss`` checks
    the training loss instead. Its L1 term has a kink wherever prediction
    equals target, so targets sit at least 0.05 away from the initial
    prediction to keep the difference quotient on one side of every kink.
    """
    from . import model as mdl
    from . import train as tr

    cfg = mdl.ModelConfig.micro()
    rng = np.random.default_rng([seed, 13])
    B = 2
    tok = rng.standard_normal((B, cfg.T, 3, cfg.N, cfg.D))
    vm = np.array([[True, True, False], [True, True, True]])
    tok[0, :, 2] = 0.0
    joints = 0.05 * rng.standard_normal((B, cfg.T, 42, 3))
    target = rng.uniform(size=(B, cfg.T, 2, 21, 21))
    valid = rng.uniform(size=(B, 2, 21, 21)) > 0.2
    with tn.precision(np.float64):
        params = mdl.init_params(cfg, seed)
    names = list(params)

    weights = rng.standard_normal((B, cfg.T, 2, 21, 21))
    if with_loss:
        with tn.precision(np.float64):
            pred0 = mdl.forward_tokens(params, tok, vm, joints, cfg).data
        offset = rng.uniform(0.05, 0.3, size=pred0.shape) * rng.choice([-1.0, 1.0], size=pred0.shape)
        target = np.clip(pred0 + offset, 0.0, 1.0)
        target = np.where(np.abs(target - pred0) < 0.05, pred0 - offset, target)

    def fn(*xs):
        out = mdl.forward_tokens(dict(zip(names, xs)), tok, vm, joints, cfg)
        if with_loss:
            return tr.loss(out, target, valid)[0]
        return tn.sum_(tn.mul(out, weights))

    return tn.grad_check(fn, [params[k].data for k in names], seed=seed, h=h,
                         max_elements=max_elements, order=order, fd_dtype=fd_dtype)


def run_suite(seeds: int = 100, model_seeds: int = 1) -> dict[str, dict[str, float]]:
    """Max error per primitive (and the model) for each check kind."""
    out: dict[str, dict[str, float]] = {}
    for name in CASES:
        out[name] = {
            "elementwise64": max(elementwise_error(name, s) for s in range(seeds)),
            "jvp64": max(jvp_error(name, s) for s in range(seeds)),
            "jvp32": max(jvp_error(name, s, np.float32) for s in range(seeds)),
        }
    out["model"] = {"model64": max(model_error(s) for s in range(model_seeds))}
    return out


def passed(results: dict[str, dict[str, float]]) -> bool:
    return all(err < TOLERANCE[kind] for r in results.values() for kind, err in r.items())
