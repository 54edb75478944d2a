"""Image quality metrics with subject-wise aggregation.

SSIM follows the standard windowed formulation (Gaussian window size 11,
sigma 1.5, k1=0.01, k2=0.03) computed over valid window positions only.
``slicewise_2d`` evaluates each 2D slice spanned by the two degraded axes
and averages across slices; ``full_3d`` uses a volumetric window.  PSNR is
10*log10(range^2 / MSE) with an infinite marker for identical inputs, and
NRMSE divides RMSE by the reference intensity range (or mean).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .volumes import Volume, VolumeError


def _values(v) -> np.ndarray:
    return np.asarray(v.values if isinstance(v, Volume) else v, dtype=np.float64)


def _check_pair(ref: np.ndarray, test: np.ndarray):
    if ref.shape != test.shape:
        raise VolumeError(f"volume shapes differ: {ref.shape} vs {test.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    offsets = np.arange(size) - (size - 1) / 2.0
    w = np.exp(-(offsets ** 2) / (2.0 * sigma * sigma))
    return w / w.sum()


def _filter_valid(a: np.ndarray, kernel: np.ndarray, axes: Sequence[int]) -> np.ndarray:
    """Separable valid-mode correlation with a 1D kernel along each axis.

    sliding_window_view keeps the windowed axis in place (shortened) and
    appends the window taps last, so contracting the taps with the kernel
    leaves every axis where it was.
    """
    out = a
    for axis in sorted(axes):
        if out.shape[axis] < kernel.size:
            raise VolumeError(
                f"extent {out.shape[axis]} on axis {axis} smaller than the "
                f"{kernel.size}-tap window")
        win = np.lib.stride_tricks.sliding_window_view(out, kernel.size, axis=axis)
        out = win @ kernel
    return out


def psnr(ref, test, data_range: Optional[float] = None) -> float:
    """Peak signal-to-noise ratio in dB; math.inf when the volumes coincide."""
    ref, test = _values(ref), _values(test)
    _check_pair(ref, test)
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if data_range <= 0:
        raise VolumeError(f"data_range must be positive, got {data_range}")
    mse = float(np.mean((ref - test) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range * data_range / mse)


def _ssim_plane(ref: np.ndarray, test: np.ndarray, kernel: np.ndarray,
                axes: Sequence[int], c1: float, c2: float) -> float:
    mu_x = _filter_valid(ref, kernel, axes)
    mu_y = _filter_valid(test, kernel, axes)
    xx = _filter_valid(ref * ref, kernel, axes) - mu_x * mu_x
    yy = _filter_valid(test * test, kernel, axes) - mu_y * mu_y
    xy = _filter_valid(ref * test, kernel, axes) - mu_x * mu_y
    ssim_map = ((2 * mu_x * mu_y + c1) * (2 * xy + c2) /
                ((mu_x * mu_x + mu_y * mu_y + c1) * (xx + yy + c2)))
    return float(ssim_map.mean())


def ssim(ref, test, mode: str = "slicewise_2d", window: int = 11,
         sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03,
         data_range: Optional[float] = None, slice_axes: tuple[int, int] = (1, 2)
         ) -> float:
    """Structural similarity index.

    ``slicewise_2d`` windows over the two (degraded) ``slice_axes`` and
    averages the per-slice scores; ``full_3d`` windows over all three axes.
    """
    ref, test = _values(ref), _values(test)
    _check_pair(ref, test)
    if data_range is None:
        data_range = float(ref.max() - ref.min())
    if data_range <= 0:
        raise VolumeError("SSIM needs a positive data_range (constant reference?)")
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    kernel = gaussian_window(window, sigma)
    if mode == "full_3d":
        return _ssim_plane(ref, test, kernel, (0, 1, 2), c1, c2)
    if mode != "slicewise_2d":
        raise VolumeError(f"unknown SSIM mode {mode!r}")
    axes = tuple(sorted(a % 3 for a in slice_axes))
    if len(set(axes)) != 2:
        raise VolumeError(f"slice_axes must name two distinct axes, got {slice_axes}")
    stack_axis = ({0, 1, 2} - set(axes)).pop()
    ref_s = np.moveaxis(ref, stack_axis, 0)
    test_s = np.moveaxis(test, stack_axis, 0)
    scores = [_ssim_plane(r, t, kernel, (0, 1), c1, c2)
              for r, t in zip(ref_s, test_s)]
    return float(np.mean(scores))


def nrmse(ref, test, normalizer: str = "range") -> float:
    """RMSE divided by the reference range (default) or reference mean."""
    ref, test = _values(ref), _values(test)
    _check_pair(ref, test)
    if normalizer == "range":
        denom = float(ref.max() - ref.min())
    elif normalizer == "mean":
        denom = float(ref.mean())
    else:
        raise VolumeError(f"unknown normalizer {normalizer!r}")
    if denom == 0:
        raise VolumeError(f"nrmse normalizer {normalizer!r} is zero for this reference")
    return float(np.sqrt(np.mean((ref - test) ** 2))) / denom


@dataclass
class MetricsRow:
    subject_id: str
    ssim: float
    psnr: float
    nrmse: float
    region: str

    def psnr_text(self) -> str:
        return "inf" if math.isinf(self.psnr) else f"{self.psnr:.4f}"


def evaluate_subject(ref: Volume, sr: Volume, crop_margin: int = 3,
                     ssim_mode: str = "slicewise_2d",
                     data_range: Optional[float] = None) -> MetricsRow:
    """All three metrics on the margin-cropped interiors of a subject pair.

    The default 3-voxel crop mirrors the patch-merge margin so scores
    reflect the model rather than edge handling.
    """
    rv, sv = _values(ref), _values(sr)
    _check_pair(rv, sv)
    if crop_margin < 0:
        raise VolumeError("crop_margin must be non-negative")
    if crop_margin > 0:
        if any(s <= 2 * crop_margin for s in rv.shape):
            raise VolumeError(
                f"crop margin {crop_margin} exceeds volume shape {rv.shape}")
        sl = tuple(slice(crop_margin, s - crop_margin) for s in rv.shape)
        rv, sv = rv[sl], sv[sl]
    subject = ref.subject_id or "unknown"
    region = f"crop{crop_margin}" if crop_margin else "full"
    return MetricsRow(
        subject_id=subject,
        ssim=ssim(rv, sv, mode=ssim_mode, data_range=data_range),
        psnr=psnr(rv, sv, data_range=data_range),
        nrmse=nrmse(rv, sv),
        region=region,
    )


def aggregate(rows: Sequence[MetricsRow]) -> dict[str, float]:
    """Mean and population standard deviation per metric across subjects."""
    if not rows:
        raise VolumeError("cannot aggregate zero metric rows")
    out = {}
    for name in ("ssim", "psnr", "nrmse"):
        vals = np.array([getattr(r, name) for r in rows], dtype=np.float64)
        out[f"{name}_mean"] = float(vals.mean())
        out[f"{name}_std"] = float(vals.std()) if np.all(np.isfinite(vals)) else math.nan
    out["subjects"] = len(rows)
    return out
