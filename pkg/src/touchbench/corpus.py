"""In-memory synthetic corpora: script -> simulated capture -> preprocessing."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from . import capture, synthgen, tactile
from .core import Episode, SplitSpec, make_splits

DEFAULT_HOLDOUT = frozenset({"trowel"})


def attach_pressure(ep: Episode, archive: tactile.PressureArchive) -> Episode:
    ep.pressure = archive.pressure
    ep.pressure_valid = archive.valid
    return ep


def synthetic_episode(seed: int, gen_cfg: synthgen.GenConfig | None = None,
                      mappings: tactile.HandMappings | None = None,
                      rig: Sequence[capture.SensorSpec] | None = None,
                      pre_cfg: tactile.PreprocessConfig | None = None) -> Episode:
    """One preprocessed episode; the ideal rig (no latency, no dropout) by default."""
    gen_cfg = gen_cfg or synthgen.GenConfig()
    mappings = mappings or tactile.default_mappings()
    script = synthgen.generate_script(seed, gen_cfg)
    ep = capture.capture_episode(script, mappings, rig if rig is not None else capture.ideal_rig(), seed, gen_cfg)
    return attach_pressure(ep, tactile.preprocess_episode(ep, mappings, pre_cfg))


def episode_seed(corpus_seed: int, i: int) -> int:
    return corpus_seed * 1_000_003 + i


def synthetic_corpus(n: int, seed: int = 0, gen_cfg: synthgen.GenConfig | None = None,
                     rig: Sequence[capture.SensorSpec] | None = None) -> list[Episode]:
    mappings = tactile.default_mappings()
    return [synthetic_episode(episode_seed(seed, i), gen_cfg, mappings, rig) for i in range(n)]


def split_corpus(episodes: Sequence[Episode], seed: int = 0,
                 holdout: frozenset[str] = DEFAULT_HOLDOUT) -> tuple[SplitSpec, dict[str, list[Episode]]]:
    spec = make_splits([e.meta for e in episodes], holdout_objects=holdout, seed=seed)
    parts = {name: [e for e in episodes if e.meta.episode_id in spec.get(name)]
             for name in ("train", "val", "test_seen", "test_unseen")}
    return spec, parts


def subset(episodes: Sequence[Episode], fraction: float, seed: int = 0) -> list[Episode]:
    """Seeded fraction of ``episodes`` in original order; smaller fractions nest in larger ones."""
    if not 0 < fraction <= 1:
        raise ValueError(f"fraction must be in (0, 1], got {fraction}")
    if fraction == 1.0:
        return list(episodes)
    n = max(1, int(round(len(episodes) * fraction)))
    order = np.random.default_rng([seed, 77]).permutation(len(episodes))
    return [episodes[i] for i in sorted(order[:n])]
