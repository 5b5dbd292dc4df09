"""Lightweight RandAugment-style pipeline for square intensity grids.

Each sample is augmented by ``n_ops`` ops drawn without replacement from the
policy's pool, all sharing one magnitude knob in [0, 1]. Augmentation is a
pure function of (policy, input, step_seed): the per-sample RNG is keyed by
(policy.seed, step_seed, sample_index), never by any shared stream, so the
same triple always replays the same draws.

Keyed draw order per sample (the replay contract tests rely on):
  1. op selection: ``rng.permutation(len(pool))[:n_ops]``
  2. each selected op, in selection order, consumes its own draws as
     documented in its function.

Every op clamps its output to [-3, 3], and every op degenerates to the
identity at magnitude 0.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ConfigError, ShapeError

OPS = (
    "gaussian_noise",
    "rotate",
    "translate",
    "cutout",
    "intensity_scale",
    "contrast",
    "horizontal_flip",
)

FEATURE_MIN = -3.0
FEATURE_MAX = 3.0

# magnitude-to-parameter maps, all linear in m
NOISE_SIGMA_PER_M = 0.5
ROTATE_DEG_PER_M = 45.0
TRANSLATE_PX_PER_M = 2.0
CUTOUT_SIDE_PER_M = 4.0
SCALE_HALF_RANGE_PER_M = 0.5


@dataclass(frozen=True)
class AugmentPolicy:
    """Which ops may fire, how many per sample, and how hard they hit."""

    n_ops: int = 2
    magnitude: float = 0.5
    ops: tuple = OPS
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.magnitude <= 1.0:
            raise ConfigError(f"magnitude must lie in [0, 1], got {self.magnitude}")
        if self.n_ops < 1 or self.n_ops > len(self.ops):
            raise ConfigError(
                f"n_ops must lie in [1, {len(self.ops)}], got {self.n_ops}")
        unknown = [op for op in self.ops if op not in OPS]
        if unknown:
            raise ConfigError(f"unknown augment ops: {unknown}")


def _grid_side(dim: int) -> int:
    side = math.isqrt(dim)
    if side * side != dim:
        raise ShapeError(f"feature dim {dim} is not a square grid")
    return side


def rotate_grid(grid: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate a square grid about its center, bilinear, zero-padded.

    0 degrees is an exact identity (sample points land on the lattice).
    """
    grid = np.asarray(grid, dtype=np.float64)
    if grid.ndim != 2 or grid.shape[0] != grid.shape[1]:
        raise ShapeError(f"rotate_grid needs a square 2-d grid, got {grid.shape}")
    side = grid.shape[0]
    theta = math.radians(degrees)
    cos_t, sin_t = math.cos(theta), math.sin(theta)
    center = (side - 1) / 2.0
    rows, cols = np.meshgrid(np.arange(side), np.arange(side), indexing="ij")
    dr = rows - center
    dc = cols - center
    # inverse map: rotate output coordinates by -theta
    src_r = center + cos_t * dr + sin_t * dc
    src_c = center - sin_t * dr + cos_t * dc
    r0 = np.floor(src_r).astype(np.int64)
    c0 = np.floor(src_c).astype(np.int64)
    fr = src_r - r0
    fc = src_c - c0

    def sample(r, c):
        inside = (r >= 0) & (r < side) & (c >= 0) & (c < side)
        vals = grid[np.clip(r, 0, side - 1), np.clip(c, 0, side - 1)]
        return np.where(inside, vals, 0.0)

    out = ((1 - fr) * (1 - fc) * sample(r0, c0)
           + (1 - fr) * fc * sample(r0, c0 + 1)
           + fr * (1 - fc) * sample(r0 + 1, c0)
           + fr * fc * sample(r0 + 1, c0 + 1))
    return out


def _shift_grid(grid: np.ndarray, dr: int, dc: int) -> np.ndarray:
    """Translate with zero fill (no wraparound)."""
    side = grid.shape[0]
    out = np.zeros_like(grid)
    src_r = slice(max(0, -dr), min(side, side - dr))
    dst_r = slice(max(0, dr), min(side, side + dr))
    src_c = slice(max(0, -dc), min(side, side - dc))
    dst_c = slice(max(0, dc), min(side, side + dc))
    out[dst_r, dst_c] = grid[src_r, src_c]
    return out


def _clamp(grid: np.ndarray) -> np.ndarray:
    return np.clip(grid, FEATURE_MIN, FEATURE_MAX)


def _apply_op(op: str, grid: np.ndarray, m: float,
              rng: np.random.Generator) -> np.ndarray:
    side = grid.shape[0]
    if op == "gaussian_noise":
        # draws: standard_normal(side*side)
        noise = rng.standard_normal(grid.shape)
        grid = grid + (NOISE_SIGMA_PER_M * m) * noise
    elif op == "rotate":
        # draws: one integer in {0,1} picking the sign
        sign = 1.0 if rng.integers(0, 2) == 1 else -1.0
        grid = rotate_grid(grid, sign * ROTATE_DEG_PER_M * m)
    elif op == "translate":
        # draws: two integers in [-t, t]
        t = int(round(TRANSLATE_PX_PER_M * m))
        dr = int(rng.integers(-t, t + 1))
        dc = int(rng.integers(-t, t + 1))
        grid = _shift_grid(grid, dr, dc)
    elif op == "cutout":
        # draws: two integers for the box corner (even when the side is 0)
        s = int(CUTOUT_SIDE_PER_M * m)
        r0 = int(rng.integers(0, side - s + 1))
        c0 = int(rng.integers(0, side - s + 1))
        if s > 0:
            grid = grid.copy()
            grid[r0:r0 + s, c0:c0 + s] = 0.0
    elif op == "intensity_scale":
        # draws: one uniform in [-0.5, 0.5)
        factor = 1.0 + m * (SCALE_HALF_RANGE_PER_M * 2.0) * (rng.uniform() - 0.5)
        grid = grid * factor
    elif op == "contrast":
        # draws: one uniform in [-0.5, 0.5)
        gamma = 1.0 + m * (SCALE_HALF_RANGE_PER_M * 2.0) * (rng.uniform() - 0.5)
        mean = grid.mean()
        grid = mean + gamma * (grid - mean)
    elif op == "horizontal_flip":
        # draws: one uniform; flip fires with probability m
        if rng.uniform() < m:
            grid = grid[:, ::-1]
    else:  # pragma: no cover - policy validation rejects unknown ops
        raise ConfigError(f"unknown augment op {op!r}")
    return _clamp(grid)


def apply_policy(policy: AugmentPolicy, x: np.ndarray, step_seed: int) -> np.ndarray:
    """Augment a batch [batch, dim]; pure in (policy, x, step_seed)."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError(f"apply_policy expects [batch, dim], got shape {x.shape}")
    side = _grid_side(x.shape[1])
    out = np.empty_like(x)
    for i in range(x.shape[0]):
        rng = np.random.default_rng([policy.seed, step_seed, i])
        order = rng.permutation(len(policy.ops))[: policy.n_ops]
        grid = x[i].reshape(side, side)
        for op_idx in order:
            grid = _apply_op(policy.ops[op_idx], grid, policy.magnitude, rng)
        out[i] = grid.ravel()
    return out
