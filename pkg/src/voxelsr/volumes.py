"""Volume ingestion and emission: minimal NIfTI-1, a raw dump format,
subject-level dataset splits, and synthetic desk-scale phantom volumes."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class VolumeError(ValueError):
    """Malformed volume data or metadata."""


class NiftiError(VolumeError):
    """File is not a readable NIfTI-1 volume."""


@dataclass
class Volume:
    """A 3D scalar field with optional voxel-size metadata (mm per axis)."""

    values: np.ndarray
    voxel_size: Optional[tuple[float, float, float]] = None
    subject_id: Optional[str] = None

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.ndim != 3:
            raise VolumeError(f"volume must be 3D, got shape {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise VolumeError("volume contains non-finite values")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def astype(self, dtype) -> "Volume":
        return Volume(self.values.astype(dtype), self.voxel_size, self.subject_id)

    def min_max_normalized(self) -> "Volume":
        lo, hi = float(self.values.min()), float(self.values.max())
        if hi == lo:
            return Volume(np.zeros_like(self.values), self.voxel_size, self.subject_id)
        return Volume((self.values - lo) / (hi - lo), self.voxel_size, self.subject_id)


# ---------------------------------------------------------------------------
# NIfTI-1
#
# Header layout per the published standard: 348 bytes, endianness detected
# from the sizeof_hdr field.  Read support covers the scalar datatypes below;
# orientation (qform/sform) is ignored and axes are taken as stored.

_HEADER_SIZE = 348

# (name, struct code, byte offset) for the fields this reader needs
_FIELD_OFFSETS = {
    "sizeof_hdr": ("i", 0),
    "dim": ("8h", 40),
    "datatype": ("h", 70),
    "bitpix": ("h", 72),
    "pixdim": ("8f", 76),
    "vox_offset": ("f", 108),
    "scl_slope": ("f", 112),
    "scl_inter": ("f", 116),
    "magic": ("4s", 344),
}

_DTYPE_CODES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
}


@dataclass
class NiftiHeader:
    dim: tuple[int, ...]
    datatype: int
    bitpix: int
    pixdim: tuple[float, ...]
    vox_offset: int
    scl_slope: float
    scl_inter: float
    magic: bytes
    byteswapped: bool = False

    @property
    def voxel_size(self) -> tuple[float, float, float]:
        return tuple(float(p) for p in self.pixdim[1:4])


def _parse_header(raw: bytes) -> NiftiHeader:
    if len(raw) < _HEADER_SIZE:
        raise NiftiError(f"header truncated at {len(raw)} bytes (need {_HEADER_SIZE})")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr == _HEADER_SIZE:
        order = "<"
        swapped = False
    elif struct.unpack_from(">i", raw, 0)[0] == _HEADER_SIZE:
        order = ">"
        swapped = True
    else:
        raise NiftiError(
            f"sizeof_hdr is {sizeof_hdr} in either byte order; expected {_HEADER_SIZE}")

    def read(name):
        code, offset = _FIELD_OFFSETS[name]
        vals = struct.unpack_from(order + code, raw, offset)
        return vals if len(vals) > 1 else vals[0]

    magic = read("magic")
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"bad magic {magic!r}; expected 'n+1' or 'ni1'")
    return NiftiHeader(tuple(int(d) for d in read("dim")), int(read("datatype")),
                       int(read("bitpix")),
                       tuple(float(p) for p in read("pixdim")),
                       int(read("vox_offset")), float(read("scl_slope")),
                       float(read("scl_inter")), magic, swapped)


def read_nifti(path) -> tuple[Volume, NiftiHeader]:
    """Read a .nii file; values are scaled by scl_slope/scl_inter when set."""
    path = Path(path)
    raw = path.read_bytes()
    header = _parse_header(raw)
    if header.magic != b"n+1\x00":
        raise NiftiError(f"{path}: detached-data files ('ni1') are not supported")
    rank = header.dim[0]
    if rank not in (3, 4):
        raise NiftiError(f"{path}: dim[0] must be 3 or 4, got {rank}")
    extents = [d for d in header.dim[1:1 + rank]]
    while len(extents) > 3 and extents[-1] == 1:
        extents.pop()
    if len(extents) != 3:
        raise NiftiError(f"{path}: not a single 3D volume (dims {extents})")
    if any(e < 1 for e in extents):
        raise NiftiError(f"{path}: non-positive dimension in {extents}")
    if header.datatype not in _DTYPE_CODES:
        raise NiftiError(f"{path}: unsupported datatype code {header.datatype}")
    dtype = np.dtype(_DTYPE_CODES[header.datatype])
    if header.byteswapped:
        dtype = dtype.newbyteorder()
    count = int(np.prod(extents))
    start = header.vox_offset
    if start < _HEADER_SIZE:
        raise NiftiError(f"{path}: vox_offset {start} overlaps the header")
    need = start + count * dtype.itemsize
    if len(raw) < need:
        raise NiftiError(f"{path}: data truncated ({len(raw)} bytes, need {need})")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    # NIfTI data is Fortran-ordered on disk (first axis fastest)
    values = flat.reshape(extents, order="F").astype(np.float64)
    if header.scl_slope != 0.0:
        values = values * header.scl_slope + header.scl_inter
    return Volume(values, header.voxel_size, subject_id=path.stem), header


def write_nifti(volume: Volume, path, header_template: Optional[NiftiHeader] = None):
    """Write a float32 single-file .nii (magic n+1, vox_offset 352, little-endian)."""
    values = np.asarray(volume.values)
    if values.ndim != 3:
        raise VolumeError(f"write_nifti needs a 3D volume, got shape {values.shape}")
    pixdim = [1.0] * 8
    if volume.voxel_size is not None:
        pixdim[1:4] = [float(v) for v in volume.voxel_size]
    elif header_template is not None:
        pixdim = list(header_template.pixdim)

    header = bytearray(_HEADER_SIZE)
    struct.pack_into("<i", header, 0, _HEADER_SIZE)
    struct.pack_into("<8h", header, 40, 3, *values.shape, 1, 1, 1, 1)
    struct.pack_into("<h", header, 70, 16)   # float32
    struct.pack_into("<h", header, 72, 32)   # bitpix
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, 352.0)
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    struct.pack_into("<f", header, 116, 0.0)  # scl_inter
    struct.pack_into("<4s", header, 344, b"n+1\x00")

    payload = values.astype("<f4").tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00" * 4)  # extension flag, data starts at 352
        fh.write(payload)


# ---------------------------------------------------------------------------
# raw format: {name}.vol payload + {name}.vol.json sidecar


def write_raw(volume: Volume, path):
    path = Path(path)
    values = np.asarray(volume.values)
    dtype = values.dtype
    if dtype not in (np.float32, np.float64):
        values = values.astype(np.float64)
        dtype = values.dtype
    sidecar = {
        "shape": list(values.shape),
        "dtype": str(np.dtype(dtype)),
        "endianness": "little",
        "voxel_size": list(volume.voxel_size) if volume.voxel_size else None,
    }
    path.write_bytes(values.astype(np.dtype(dtype).newbyteorder("<")).tobytes())
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2))


def read_raw(path) -> Volume:
    path = Path(path)
    sidecar_path = Path(str(path) + ".json")
    if not sidecar_path.exists():
        raise VolumeError(f"{path}: missing sidecar header {sidecar_path.name}")
    sidecar = json.loads(sidecar_path.read_text())
    shape = tuple(sidecar["shape"])
    dtype = np.dtype(sidecar["dtype"])
    if sidecar.get("endianness", "little") == "little":
        dtype = dtype.newbyteorder("<")
    else:
        dtype = dtype.newbyteorder(">")
    raw = path.read_bytes()
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) != expected:
        raise VolumeError(f"{path}: payload is {len(raw)} bytes, header says {expected}")
    values = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    vs = sidecar.get("voxel_size")
    return Volume(values, tuple(vs) if vs else None, subject_id=path.stem)


# ---------------------------------------------------------------------------
# subject splits

PAPER_SPLIT_RATIOS = (780, 111, 111, 111)
_SPLIT_NAMES = ("train", "validation", "evaluation", "test")


@dataclass
class SplitManifest:
    train: list[str]
    validation: list[str]
    evaluation: list[str]
    test: list[str]
    seed: int
    ratios: tuple[int, int, int, int]

    def to_dict(self) -> dict:
        return {"train": self.train, "validation": self.validation,
                "evaluation": self.evaluation, "test": self.test,
                "seed": self.seed, "ratios": list(self.ratios)}

    @classmethod
    def from_dict(cls, d: dict) -> "SplitManifest":
        return cls(list(d["train"]), list(d["validation"]), list(d["evaluation"]),
                   list(d["test"]), int(d["seed"]), tuple(d["ratios"]))


def _largest_remainder(total: int, ratios: Sequence[int]) -> list[int]:
    weights = np.asarray(ratios, dtype=np.float64)
    quotas = total * weights / weights.sum()
    counts = np.floor(quotas).astype(int)
    remainder = total - counts.sum()
    for idx in np.argsort(-(quotas - counts), kind="stable")[:remainder]:
        counts[idx] += 1
    # keep every split non-empty when the pool allows it
    while total >= len(ratios) and (counts == 0).any():
        counts[int(np.argmax(counts))] -= 1
        counts[int(np.argmin(counts))] += 1
    return counts.tolist()


def make_split(subject_ids: Sequence[str], ratios=PAPER_SPLIT_RATIOS,
               seed: int = 0) -> SplitManifest:
    """Seeded shuffle then contiguous partition; subjects never repeat."""
    ids = [str(s) for s in subject_ids]
    if len(ids) != len(set(ids)):
        raise VolumeError("subject ids must be unique")
    if len(ids) < 4:
        raise VolumeError(f"need at least 4 subjects to split, got {len(ids)}")
    rng = np.random.default_rng(seed)
    order = [ids[i] for i in rng.permutation(len(ids))]
    counts = _largest_remainder(len(ids), ratios)
    parts = []
    start = 0
    for c in counts:
        parts.append(order[start:start + c])
        start += c
    return SplitManifest(*parts, seed=seed, ratios=tuple(ratios))


# ---------------------------------------------------------------------------
# phantoms
#
# Deterministic stand-ins for anatomical volumes: smooth Gaussian blobs give
# the low-frequency bulk, thin bright tubes (1-2 voxels wide) supply the
# high-frequency detail a resolution-recovery model must restore.


def synth_phantom(shape, seed: int, recipe: str = "blobs_plus_tubes") -> Volume:
    if any(s < 16 for s in shape):
        raise VolumeError(f"phantom shape must be >= 16 per axis, got {shape}")
    if recipe not in ("smooth_blobs", "blobs_plus_tubes"):
        raise VolumeError(f"unknown phantom recipe {recipe!r}")
    rng = np.random.default_rng(seed)
    d, h, w = shape
    zz, yy, xx = np.meshgrid(np.arange(d), np.arange(h), np.arange(w),
                             indexing="ij")
    coords = np.stack([zz, yy, xx]).astype(np.float64)
    out = np.zeros(shape, dtype=np.float64)

    n_blobs = int(rng.integers(8, 17))
    for _ in range(n_blobs):
        center = rng.uniform([0, 0, 0], [d, h, w])
        sigma = rng.uniform(0.05, 0.14) * min(shape)
        amp = rng.uniform(0.3, 1.0)
        r2 = sum((coords[i] - center[i]) ** 2 for i in range(3))
        out += amp * np.exp(-r2 / (2.0 * sigma * sigma))

    if recipe == "blobs_plus_tubes":
        n_tubes = int(rng.integers(3, 7))
        for _ in range(n_tubes):
            axis = int(rng.integers(0, 3))
            center = rng.uniform([0, 0, 0], [d, h, w])
            radius = rng.uniform(0.5, 1.0)
            amp = rng.uniform(0.8, 1.4)
            planes = [i for i in range(3) if i != axis]
            r2 = sum((coords[i] - center[i]) ** 2 for i in planes)
            out += amp * np.exp(-r2 / (2.0 * radius * radius))

    lo, hi = out.min(), out.max()
    if hi > lo:
        out = (out - lo) / (hi - lo)
    return Volume(out, voxel_size=(1.0, 1.0, 1.0), subject_id=f"phantom{seed:04d}")
