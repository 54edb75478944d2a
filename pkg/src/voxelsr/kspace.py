"""Resolution degradation in the spatial-frequency domain.

Low-resolution volumes are produced by transforming to k-space, truncating
the periphery symmetrically around DC, inverse-transforming the smaller
spectrum, and interpolating back to the original grid.  Transforms use the
unnormalized-forward / 1/n-inverse convention, so a constant volume maps to
a single DC bin of value c*n.

``numpy.fft`` supplies the fast transform; :func:`direct_dft3` is the O(n^2)
per-axis direct evaluation kept as an independent correctness oracle.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .volumes import Volume, VolumeError

RESAMPLE_KINDS = ("nearest", "linear", "cubic")


@dataclass
class Spectrum:
    """Complex 3D spectrum; ``centered`` means DC sits at floor(dim/2)."""

    values: np.ndarray
    centered: bool = True

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise VolumeError(f"spectrum must be 3D, got shape {self.values.shape}")
        if not np.iscomplexobj(self.values):
            self.values = self.values.astype(np.complex128)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def energy(self) -> float:
        return float(np.sum(np.abs(self.values) ** 2))


def dft3(v: Volume, centered: bool = True) -> Spectrum:
    """Unnormalized forward 3D DFT of a volume."""
    spec = np.fft.fftn(np.asarray(v.values, dtype=np.float64))
    if centered:
        spec = np.fft.fftshift(spec)
    return Spectrum(spec, centered=centered)


def idft3(s: Spectrum) -> tuple[Volume, float]:
    """Normalized inverse transform; returns the real part and the largest
    imaginary magnitude left over (a symmetry-violation indicator)."""
    values = s.values
    if s.centered:
        values = np.fft.ifftshift(values)
    out = np.fft.ifftn(values)
    residue = float(np.max(np.abs(out.imag))) if out.size else 0.0
    return Volume(np.ascontiguousarray(out.real)), residue


def direct_dft3(v: Volume, centered: bool = True, inverse: bool = False) -> Spectrum:
    """Direct separable DFT via per-axis transform matrices: the slow oracle.

    O(n^2) work per axis; use only on small volumes.
    """
    values = np.asarray(v.values, dtype=np.complex128)
    sign = 2j if inverse else -2j
    for axis, n in enumerate(values.shape):
        j = np.arange(n)
        mat = np.exp(sign * np.pi * np.outer(j, j) / n)
        values = np.moveaxis(np.tensordot(mat, np.moveaxis(values, axis, 0), axes=1), 0, axis)
    if inverse:
        values = values / values.size
    if centered:
        values = np.fft.fftshift(values)
    return Spectrum(values, centered=centered)


def truncate_kspace(s: Spectrum, factors: tuple[int, int, int]) -> Spectrum:
    """Keep the central ceil(dim/factor) bins per axis of a centered spectrum.

    The window is symmetric about the DC bin.  When the kept extent is even
    (and strictly smaller than the axis), the lowest kept bin is a negative
    Nyquist frequency whose conjugate partner falls outside the window; that
    bin is zeroed so real inputs stay real after the inverse transform.
    """
    if not s.centered:
        raise VolumeError("truncate_kspace requires a centered spectrum")
    if len(factors) != 3 or any(int(f) < 1 for f in factors):
        raise VolumeError(f"factors must be three positive ints, got {factors}")
    values = s.values
    out = values
    for axis, factor in enumerate(int(f) for f in factors):
        n = values.shape[axis]
        if factor > n:
            raise VolumeError(f"factor {factor} exceeds axis {axis} size {n}")
        keep = -(-n // factor)  # ceil
        center = n // 2
        if keep % 2 == 0:
            start = center - keep // 2
        else:
            start = center - (keep - 1) // 2
        index = [slice(None)] * 3
        index[axis] = slice(start, start + keep)
        out = out[tuple(index)]
        if keep % 2 == 0 and keep < n:
            zero = [slice(None)] * 3
            zero[axis] = 0
            out = out.copy()
            out[tuple(zero)] = 0
    return Spectrum(out.copy(), centered=True)


def lr_simulate(v: Volume, factors: tuple[int, int, int],
                interp: str = "linear") -> Volume:
    """Full degradation pipeline: FFT, central truncation, inverse FFT, and
    interpolation back to the source grid.

    Output intensity is rescaled by kept/total bin count so constant volumes
    are fixed points.  Default degrades with the given per-axis factors; the
    conventional setting halves the two trailing axes, factors=(1, 2, 2).
    """
    spec = dft3(v, centered=True)
    small_spec = truncate_kspace(spec, factors)
    small, residue = idft3(small_spec)
    scale = small.values.size / v.values.size
    small = Volume(small.values * scale)
    peak = float(np.max(np.abs(small.values)))
    if peak > 0 and residue * scale > 1e-6 * peak:
        warnings.warn(f"k-space truncation left imaginary residue {residue * scale:.3e}")
    # grid alignment: small-volume sample j sits at original coordinate
    # j * factor, so no half-voxel recentring on the way back up
    out = resample(small, v.shape, kind=interp, align="grid")
    return Volume(out.values, v.voxel_size, v.subject_id)


# ---------------------------------------------------------------------------
# separable resampling
#
# Coordinate conventions (fixed for reproducibility):
#   * "centers" (the public default): source coordinate of output sample i is
#     (i + 0.5) * (n_src / n_dst) - 0.5, clamped -- pixel-center alignment.
#   * "grid": source coordinate is i * (n_src / n_dst).  k-space truncation
#     evaluates the band-limited volume exactly at source positions
#     j * factor, so the upsample inside lr_simulate uses this alignment;
#     the centers convention would translate everything by half a voxel.


def _axis_weights(n_src: int, n_dst: int, kind: str, align: str = "centers"
                  ) -> np.ndarray:
    """Dense (n_dst, n_src) interpolation matrix for one axis."""
    w = np.zeros((n_dst, n_src), dtype=np.float64)
    scale = n_src / n_dst
    if align == "centers":
        coords = (np.arange(n_dst) + 0.5) * scale - 0.5
    elif align == "grid":
        coords = np.arange(n_dst) * scale
    else:
        raise VolumeError(f"unknown alignment {align!r}")
    coords = np.clip(coords, 0.0, n_src - 1.0)
    if kind == "nearest":
        idx = np.clip(np.floor(coords + 0.5).astype(int), 0, n_src - 1)
        w[np.arange(n_dst), idx] = 1.0
    elif kind == "linear":
        i0 = np.clip(np.floor(coords).astype(int), 0, n_src - 1)
        i1 = np.minimum(i0 + 1, n_src - 1)
        t = coords - i0
        w[np.arange(n_dst), i0] += 1.0 - t
        w[np.arange(n_dst), i1] += t
    elif kind == "cubic":
        # Catmull-Rom kernel (a = -0.5), taps clamped to the grid edge
        a = -0.5
        i1 = np.floor(coords).astype(int)
        t = coords - i1
        for tap, offset in enumerate((-1, 0, 1, 2)):
            x = np.abs(t - offset)
            k = np.where(
                x <= 1,
                (a + 2) * x ** 3 - (a + 3) * x ** 2 + 1,
                np.where(x < 2, a * x ** 3 - 5 * a * x ** 2 + 8 * a * x - 4 * a, 0.0))
            idx = np.clip(i1 + offset, 0, n_src - 1)
            np.add.at(w, (np.arange(n_dst), idx), k)
    else:
        raise VolumeError(f"unknown interpolation kind {kind!r}")
    return w


def resample(v: Volume, target_shape, kind: str = "linear",
             align: str = "centers") -> Volume:
    """Separable nearest/linear/cubic resampling to an arbitrary 3D shape."""
    target_shape = tuple(int(s) for s in target_shape)
    if len(target_shape) != 3 or any(s < 1 for s in target_shape):
        raise VolumeError(f"target shape must be three positive ints, got {target_shape}")
    if kind not in RESAMPLE_KINDS:
        raise VolumeError(f"unknown interpolation kind {kind!r}")
    values = np.asarray(v.values, dtype=np.float64)
    if values.shape == target_shape:
        return Volume(values.copy(), v.voxel_size, v.subject_id)
    for axis in range(3):
        if values.shape[axis] == target_shape[axis]:
            continue
        w = _axis_weights(values.shape[axis], target_shape[axis], kind, align)
        values = np.moveaxis(np.tensordot(w, np.moveaxis(values, axis, 0), axes=1), 0, axis)
    return Volume(values, v.voxel_size, v.subject_id)


def band_energy_above_cutoff(v: Volume, factors: tuple[int, int, int]) -> float:
    """Spectral energy in the bins a truncation with ``factors`` would drop."""
    spec = dft3(v, centered=True)
    total = spec.energy()
    kept = truncate_kspace(spec, factors).energy()
    return total - kept
