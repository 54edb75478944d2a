"""Deterministic patch tiling with interior margins.

A grid plans patch origins with stride = patch - 2*margin per axis; the last
patch per axis shifts inward to end at the volume edge.  Each patch
contributes only an interior crop window at merge time (margins discarded,
except where a patch touches the volume boundary), and the contribution
windows partition the volume exactly, so merge(extract(v)) == v.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import product
from typing import Sequence

import numpy as np

DEFAULT_MARGIN = 3


class GridError(ValueError):
    """Invalid tiling request."""


def _axis_plan(size: int, patch: int, margin: int) -> tuple[list[int], list[tuple[int, int]]]:
    """Origins and contribution windows [start, stop) along one axis."""
    stride = patch - 2 * margin
    origins = list(range(0, size - patch + 1, stride))
    if origins[-1] + patch < size:
        origins.append(size - patch)
    windows = []
    prev_end = 0
    for i, origin in enumerate(origins):
        end = size if i == len(origins) - 1 else origin + patch - margin
        windows.append((prev_end, end))
        prev_end = end
    return origins, windows


@dataclass
class PatchGrid:
    volume_shape: tuple[int, int, int]
    patch_shape: tuple[int, int, int]
    margin: int
    origins: list[tuple[int, int, int]]
    windows: list[tuple[tuple[int, int], tuple[int, int], tuple[int, int]]]

    def __len__(self):
        return len(self.origins)

    def to_dict(self) -> dict:
        return {
            "volume_shape": list(self.volume_shape),
            "patch_shape": list(self.patch_shape),
            "margin": self.margin,
            "origins": [list(o) for o in self.origins],
            "windows": [[list(w) for w in win] for win in self.windows],
        }


def plan_grid(volume_shape, patch_shape, margin: int = DEFAULT_MARGIN) -> PatchGrid:
    volume_shape = tuple(int(s) for s in volume_shape)
    patch_shape = tuple(int(s) for s in patch_shape)
    if len(volume_shape) != 3 or len(patch_shape) != 3:
        raise GridError("volume and patch shapes must be 3D")
    if margin < 0:
        raise GridError(f"margin must be non-negative, got {margin}")
    for axis, (size, patch) in enumerate(zip(volume_shape, patch_shape)):
        if patch > size:
            raise GridError(f"patch {patch} exceeds volume extent {size} on axis {axis}")
        if 2 * margin >= patch:
            raise GridError(f"margin {margin} too large for patch extent {patch} "
                            f"(need 2*margin < patch)")
    per_axis = [_axis_plan(s, p, margin) for s, p in zip(volume_shape, patch_shape)]
    origins = []
    windows = []
    for idx in product(*(range(len(a[0])) for a in per_axis)):
        origins.append(tuple(per_axis[ax][0][i] for ax, i in enumerate(idx)))
        windows.append(tuple(per_axis[ax][1][i] for ax, i in enumerate(idx)))
    return PatchGrid(volume_shape, patch_shape, margin, origins, windows)


def extract(values: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Copy out every patch; result shape (n_patches, *patch_shape)."""
    values = np.asarray(values)
    if values.shape != grid.volume_shape:
        raise GridError(f"volume shape {values.shape} does not match grid "
                        f"{grid.volume_shape}")
    pd, ph, pw = grid.patch_shape
    out = np.empty((len(grid.origins), pd, ph, pw), dtype=values.dtype)
    for i, (od, oh, ow) in enumerate(grid.origins):
        out[i] = values[od:od + pd, oh:oh + ph, ow:ow + pw]
    return out


def merge(patches: Sequence[np.ndarray], grid: PatchGrid) -> np.ndarray:
    """Reassemble the volume from patch contribution windows (no blending)."""
    if len(patches) != len(grid.origins):
        raise GridError(f"got {len(patches)} patches for a grid of {len(grid.origins)}")
    first = np.asarray(patches[0])
    out = np.empty(grid.volume_shape, dtype=first.dtype)
    for patch, origin, window in zip(patches, grid.origins, grid.windows):
        patch = np.asarray(patch)
        if patch.shape != grid.patch_shape:
            raise GridError(f"patch shape {patch.shape} does not match grid "
                            f"{grid.patch_shape}")
        src = tuple(slice(w0 - o, w1 - o) for (w0, w1), o in zip(window, origin))
        dst = tuple(slice(w0, w1) for (w0, w1) in window)
        out[dst] = patch[src]
    return out


def augment(patch: np.ndarray, seed: int,
            enabled_ops: Sequence[str] = ("flip_axis_d", "flip_axis_h", "flip_axis_w")
            ) -> np.ndarray:
    """Seeded random composition of axis flips; a pure function of its inputs."""
    axis_for = {"flip_axis_d": 0, "flip_axis_h": 1, "flip_axis_w": 2}
    for op in enabled_ops:
        if op not in axis_for:
            raise GridError(f"unknown augmentation op {op!r}")
    rng = np.random.default_rng(seed)
    out = np.asarray(patch)
    for op in ("flip_axis_d", "flip_axis_h", "flip_axis_w"):
        if op in enabled_ops and rng.random() < 0.5:
            out = np.flip(out, axis=axis_for[op])
    return np.ascontiguousarray(out)
