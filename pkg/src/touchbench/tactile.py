"""Raw glove vectors to canonical 21x21 hand grids, plus cleanup.

Stage order is fixed: remap, baseline subtraction, broken-column repair,
per-class normalisation.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import GRID, RAW_CHANNELS, HandSide

EPS = 1e-6
_KEY = re.compile(r"^\((\d+),(\d+)\)$")


class MappingError(ValueError):
    pass


class RepairError(ValueError):
    pass


@dataclass(frozen=True)
class GridMapping:
    """Cell -> raw channel map for one glove, in that glove's own layout.

    Raw indices listed in ``bending`` are bending sensors; every other index
    is a tactile sensor. Bending cells are kept out of the canonical mask.
    """

    cells: Mapping[tuple[int, int], int]
    bending: frozenset[int] = frozenset()

    def __post_init__(self):
        seen: dict[int, tuple[int, int]] = {}
        for (r, c), idx in self.cells.items():
            if not (0 <= r < GRID and 0 <= c < GRID):
                raise MappingError(f"cell ({r},{c}) outside the {GRID}x{GRID} grid")
            if not 0 <= idx < RAW_CHANNELS:
                raise MappingError(f"raw index {idx} for cell ({r},{c}) outside [0,{RAW_CHANNELS})")
            if idx in seen:
                raise MappingError(f"raw index {idx} mapped twice: {seen[idx]} and ({r},{c})")
            seen[idx] = (r, c)
        bad = [i for i in self.bending if not 0 <= i < RAW_CHANNELS]
        if bad:
            raise MappingError(f"bending indices out of range: {bad}")

    def sensor_class(self, idx: int) -> str:
        return "Bending" if idx in self.bending else "Tactile"

    def arrays(self, side: HandSide = HandSide.LEFT):
        """Cell rows, cols, raw indices and bending flags after optional mirroring."""
        items = sorted(self.cells.items())
        rows = np.array([rc[0] for rc, _ in items], dtype=np.int64)
        cols = np.array([rc[1] for rc, _ in items], dtype=np.int64)
        if side is HandSide.RIGHT:
            cols = GRID - 1 - cols
        idx = np.array([i for _, i in items], dtype=np.int64)
        bend = np.array([i in self.bending for i in idx], dtype=bool)
        return rows, cols, idx, bend

    def masks(self, side: HandSide = HandSide.LEFT) -> tuple[np.ndarray, np.ndarray]:
        """(tactile_mask, bending_mask) in the canonical frame."""
        rows, cols, _, bend = self.arrays(side)
        tac = np.zeros((GRID, GRID), dtype=bool)
        bnd = np.zeros((GRID, GRID), dtype=bool)
        tac[rows[~bend], cols[~bend]] = True
        bnd[rows[bend], cols[bend]] = True
        return tac, bnd

    def to_json(self) -> dict:
        return {f"({r},{c})": int(i) for (r, c), i in sorted(self.cells.items())}


@dataclass(frozen=True)
class HandMappings:
    left: GridMapping
    right: GridMapping

    def for_side(self, side: HandSide) -> GridMapping:
        return self.left if side is HandSide.LEFT else self.right


def _class_path(path: Path) -> Path:
    return path.with_name(path.stem + ".classes.json")


def load_mapping(path: str | Path) -> GridMapping:
    """Read a ``{"(r,c)": raw_index}`` file and its optional ``.classes.json`` sibling."""
    path = Path(path)
    with open(path) as f:
        raw = json.load(f)
    cells = {}
    for key, idx in raw.items():
        m = _KEY.match(key.replace(" ", ""))
        if not m:
            raise MappingError(f"{path}: bad cell key {key!r}, expected \"(r,c)\"")
        cells[(int(m.group(1)), int(m.group(2)))] = int(idx)
    bending: frozenset[int] = frozenset()
    cpath = _class_path(path)
    if cpath.exists():
        with open(cpath) as f:
            bending = frozenset(int(i) for i in json.load(f).get("bending", []))
    return GridMapping(cells, bending)


def save_mapping(mapping: GridMapping, path: str | Path) -> None:
    path = Path(path)
    path.write_text(json.dumps(mapping.to_json(), indent=1))
    _class_path(path).write_text(json.dumps({"bending": sorted(mapping.bending)}))


# ----------------------------------------------------------------------------
# default hand-shaped layout

# (col_lo, col_hi, row_lo, row_hi) inclusive, left-hand canonical frame; row 0 at the fingertips
_FINGERS = {
    "thumb": (16, 17, 8, 15),
    "index": (13, 14, 2, 10),
    "middle": (10, 11, 0, 10),
    "ring": (7, 8, 1, 10),
    "little": (4, 5, 4, 10),
}
_PALM = (4, 15, 11, 19)
# one knuckle row per finger carries bending sensors instead of pressure taxels
_KNUCKLE_ROW = {"thumb": 12, "index": 7, "middle": 6, "ring": 6, "little": 8}


def hand_shape() -> tuple[np.ndarray, np.ndarray]:
    """(tactile, bending) cell masks of the default glove, left-hand frame."""
    tac = np.zeros((GRID, GRID), dtype=bool)
    bnd = np.zeros((GRID, GRID), dtype=bool)
    c0, c1, r0, r1 = _PALM
    tac[r0 : r1 + 1, c0 : c1 + 1] = True
    for name, (c0, c1, r0, r1) in _FINGERS.items():
        tac[r0 : r1 + 1, c0 : c1 + 1] = True
        k = _KNUCKLE_ROW[name]
        tac[k, c0 : c1 + 1] = False
        bnd[k, c0 : c1 + 1] = True
    return tac, bnd


def default_mapping(side: HandSide, seed: int = 7) -> GridMapping:
    """Synthetic glove layout: a seeded channel permutation over the hand shape.

    The right glove is wired as the physical mirror of the left one, so its
    cells mirror back onto the same canonical mask.
    """
    tac, bnd = hand_shape()
    rng = np.random.default_rng([seed, 0 if side is HandSide.LEFT else 1])
    perm = [int(i) for i in rng.permutation(RAW_CHANNELS)]
    cells_t = list(zip(*np.nonzero(tac)))
    cells_b = list(zip(*np.nonzero(bnd)))
    n_t, n_b = len(cells_t), len(cells_b)
    cells: dict[tuple[int, int], int] = {}
    for (r, c), idx in zip(cells_t + cells_b, perm):
        col = int(c) if side is HandSide.LEFT else GRID - 1 - int(c)
        cells[(int(r), col)] = idx
    # mapped bending channels plus every unmapped channel carry bending readings
    bending = frozenset(perm[n_t : n_t + n_b] + perm[n_t + n_b :])
    return GridMapping(cells, bending)


def default_mappings(seed: int = 7) -> HandMappings:
    return HandMappings(default_mapping(HandSide.LEFT, seed), default_mapping(HandSide.RIGHT, seed))


# ----------------------------------------------------------------------------
# pipeline stages


def mirror(grid: np.ndarray) -> np.ndarray:
    """Horizontal reflection (r, c) -> (r, 20 - c) on the last axis."""
    return grid[..., ::-1].copy()


def remap(raw: Sequence[int] | np.ndarray, mapping: GridMapping, side: HandSide) -> tuple[np.ndarray, np.ndarray]:
    """Scatter one raw vector into a 21x21 grid; unmapped cells are NaN and False."""
    raw = np.asarray(raw)
    if raw.shape[-1] != RAW_CHANNELS:
        raise MappingError(f"raw vector has {raw.shape[-1]} channels, expected {RAW_CHANNELS}")
    rows, cols, idx, _ = mapping.arrays(HandSide.LEFT)
    grid = np.full(raw.shape[:-1] + (GRID, GRID), np.nan)
    mask = np.zeros((GRID, GRID), dtype=bool)
    grid[..., rows, cols] = raw[..., idx]
    mask[rows, cols] = True
    if side is HandSide.RIGHT:
        grid, mask = mirror(grid), mirror(mask)
    return grid, mask


@dataclass
class PreprocessConfig:
    baseline_threshold: float = 10.0
    broken_columns: dict[str, list[int]] = field(default_factory=lambda: {"left": [], "right": []})
    eps: float = EPS
    # None: fall back to the threshold; True/False: annotated first-frame contact state
    contact_free_first_frame: bool | None = None

    def __post_init__(self):
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        for side, cols in self.broken_columns.items():
            if any(not 0 <= c < GRID for c in cols):
                raise ValueError(f"broken column for {side} outside [0,{GRID})")


def subtract_baseline(seq: np.ndarray, tactile_mask: np.ndarray, cfg: PreprocessConfig) -> tuple[np.ndarray, bool]:
    """Remove the first frame from every frame when it looks contact-free."""
    if len(seq) == 0:
        raise ValueError("empty sequence")
    first = seq[0]
    tac_vals = first[tactile_mask]
    below = tac_vals.size == 0 or float(np.nanmax(tac_vals)) < cfg.baseline_threshold
    if cfg.contact_free_first_frame is True or (cfg.contact_free_first_frame is None and below):
        return np.maximum(seq - first, 0.0), True
    return seq, False


def repair_columns(seq: np.ndarray, broken: Sequence[int], valid: np.ndarray) -> np.ndarray:
    """Overwrite broken columns by row-wise linear interpolation.

    Each broken valid cell takes the line through the nearest valid,
    non-broken cells to its left and right in the same row; with only one
    such neighbour its value is copied.
    """
    if not len(broken):
        return seq
    out = seq.copy()
    broken = set(int(c) for c in broken)
    for r in range(GRID):
        good = [c for c in range(GRID) if valid[r, c] and c not in broken]
        for c in sorted(broken):
            if not valid[r, c]:
                continue
            if not good:
                raise RepairError(f"row {r} has no valid non-broken cell to repair column {c}")
            left = [g for g in good if g < c]
            right = [g for g in good if g > c]
            if left and right:
                a, b = left[-1], right[0]
                t = (c - a) / (b - a)
                out[..., r, c] = (1 - t) * seq[..., r, a] + t * seq[..., r, b]
            else:
                out[..., r, c] = seq[..., r, (left[-1] if left else right[0])]
    return out


def normalize(seq: np.ndarray, tactile_mask: np.ndarray, bending_mask: np.ndarray, eps: float = EPS):
    """Scale tactile and bending cells by their own episode maxima.

    Returns the scaled sequence and ``{"tactile_max", "bending_max"}``; the
    divisor actually used is ``max(eps, class max)``.
    """
    out = seq.copy()
    meta = {}
    for name, mask in (("tactile", tactile_mask), ("bending", bending_mask)):
        vals = seq[:, mask]
        m = float(vals.max()) if vals.size else 0.0
        meta[f"{name}_max"] = m
        out[:, mask] = vals / max(eps, m)
    return out, meta


def denormalize(seq: np.ndarray, tactile_mask: np.ndarray, bending_mask: np.ndarray,
                meta: Mapping[str, float], eps: float = EPS) -> np.ndarray:
    out = seq.copy()
    out[:, tactile_mask] = seq[:, tactile_mask] * max(eps, meta["tactile_max"])
    out[:, bending_mask] = seq[:, bending_mask] * max(eps, meta["bending_max"])
    return out


@dataclass
class PressureArchive:
    """Per-episode processed pressure for both hands (canonical frame).

    ``pressure`` is (n, 2, 21, 21) with NaN off the tactile masks; bending
    readings live in ``bending`` with the same layout.
    """

    pressure: np.ndarray
    valid: np.ndarray  # (2, 21, 21)
    bending: np.ndarray
    bending_valid: np.ndarray
    baseline_applied: np.ndarray  # (2,) bool
    norm_meta: list[dict]
    grid_size: int = GRID

    def __len__(self) -> int:
        return len(self.pressure)

    def save(self, path: str | Path) -> None:
        with open(path, "wb") as f:
            np.savez(
                f,
                left=self.pressure[:, 0], right=self.pressure[:, 1],
                valid_left=self.valid[0], valid_right=self.valid[1],
                bending_left=self.bending[:, 0], bending_right=self.bending[:, 1],
                bending_valid_left=self.bending_valid[0], bending_valid_right=self.bending_valid[1],
                baseline_applied=self.baseline_applied,
                grid_size=np.array(self.grid_size),
                norm_meta=np.array(json.dumps(self.norm_meta)),
            )

    @classmethod
    def load(cls, path: str | Path) -> "PressureArchive":
        with np.load(path) as z:
            return cls(
                pressure=np.stack([z["left"], z["right"]], axis=1),
                valid=np.stack([z["valid_left"], z["valid_right"]]),
                bending=np.stack([z["bending_left"], z["bending_right"]], axis=1),
                bending_valid=np.stack([z["bending_valid_left"], z["bending_valid_right"]]),
                baseline_applied=z["baseline_applied"],
                grid_size=int(z["grid_size"]),
                norm_meta=json.loads(str(z["norm_meta"])),
            )


def preprocess_hand(raw_seq: np.ndarray, mapping: GridMapping, side: HandSide, cfg: PreprocessConfig):
    grids, _ = remap(raw_seq.astype(np.float64), mapping, side)
    tac, bnd = mapping.masks(side)
    grids, applied = subtract_baseline(grids, tac, cfg)
    grids = repair_columns(grids, cfg.broken_columns.get(side.value, []), tac)
    grids, meta = normalize(grids, tac, bnd, cfg.eps)
    pressure = np.where(tac, grids, np.nan)
    bending = np.where(bnd, grids, np.nan)
    return pressure, tac, bending, bnd, applied, meta


def preprocess_raw(raw_left: np.ndarray, raw_right: np.ndarray, mappings: HandMappings,
                   cfg: PreprocessConfig | None = None) -> PressureArchive:
    """Run the full chain on (n, 256) raw sequences for both hands."""
    cfg = cfg or PreprocessConfig()
    if len(raw_left) == 0:
        raise ValueError("no frames to preprocess")
    parts = [
        preprocess_hand(np.asarray(raw), mappings.for_side(side), side, cfg)
        for raw, side in ((raw_left, HandSide.LEFT), (raw_right, HandSide.RIGHT))
    ]
    return PressureArchive(
        pressure=np.stack([p[0] for p in parts], axis=1),
        valid=np.stack([p[1] for p in parts]),
        bending=np.stack([p[2] for p in parts], axis=1),
        bending_valid=np.stack([p[3] for p in parts]),
        baseline_applied=np.array([p[4] for p in parts]),
        norm_meta=[p[5] for p in parts],
    )


def preprocess_episode(ep, mappings: HandMappings, cfg: PreprocessConfig | None = None) -> PressureArchive:
    """Preprocess an :class:`~touchbench.core.Episode`'s glove stream.

    Frames recorded before the glove delivered anything carry zero vectors.
    """
    n = len(ep.frames)
    left = np.zeros((n, RAW_CHANNELS))
    right = np.zeros((n, RAW_CHANNELS))
    for i, fr in enumerate(ep.frames):
        if fr.raw_tactile is not None:
            left[i] = fr.raw_tactile.sensor_left
            right[i] = fr.raw_tactile.sensor_right
    return preprocess_raw(left, right, mappings, cfg)
