"""Densely connected 3D super-resolution generator and Wasserstein critic.

The generator is a multi-level dense network: an initial 3x3x3 convolution to
2k feature maps, dense blocks whose units each append k channels, 1x1x1
compressor convolutions squeezing the accumulated block outputs back to 2k
between blocks, and a final 1x1x1 reconstruction convolution.  The critic is
an SRGAN-style stack of strided 3x3x3 convolutions with layer normalization
(no batch norm) and an unbounded scalar output per batch item.

Architectures are annotated ``bXuY`` (X blocks of Y dense units each);
``parse_arch``/``render_arch`` round-trip that annotation.
"""

from __future__ import annotations

import json
import re
import zlib
from dataclasses import dataclass, field, asdict
from typing import Iterator, Optional, Union

import numpy as np

from .autodiff import (
    NormState, ShapeError, Tensor, activation, add, concat_channels, conv3d,
    leaky_relu, linear, normalize, reshape,
)

CHECKPOINT_MAGIC = b"VSRMODEL"
CHECKPOINT_VERSION = 1

_ARCH_RE = re.compile(r"^b(\d+)u(\d+)(?::k(\d+))?$")


def parse_arch(text: str) -> tuple[int, int, Optional[int]]:
    """Parse a ``bXuY`` or ``bXuY:kZ`` annotation into (blocks, units, growth)."""
    m = _ARCH_RE.match(text.strip())
    if not m:
        raise ValueError(f"architecture annotation {text!r} does not match bXuY[:kZ]")
    b, u, k = int(m.group(1)), int(m.group(2)), m.group(3)
    return b, u, (int(k) if k is not None else None)


@dataclass(frozen=True)
class GeneratorConfig:
    """Shape of the generator: blocks, units per block, growth channels.

    ``global_residual`` adds the input back onto the reconstruction output
    (zero extra parameters), so the network learns a correction instead of
    re-deriving the whole image; desk-scale budgets need it to surpass
    interpolation baselines within a small step count.
    """

    blocks: int
    units_per_block: int
    growth: int = 16
    input_channels: int = 1
    activation: str = "elu"
    unit_norm: str = "batch_norm"  # or "none"
    global_residual: bool = False

    def __post_init__(self):
        if self.blocks < 1 or self.units_per_block < 1 or self.growth < 1:
            raise ValueError(
                f"generator config requires blocks, units and growth >= 1, got "
                f"b={self.blocks} u={self.units_per_block} k={self.growth}")
        if self.input_channels < 1:
            raise ValueError("input_channels must be >= 1")
        if self.activation not in ("elu", "relu", "leaky_relu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.unit_norm not in ("batch_norm", "none"):
            raise ValueError(f"unit_norm must be 'batch_norm' or 'none', got {self.unit_norm!r}")

    @property
    def annotation(self) -> str:
        return f"b{self.blocks}u{self.units_per_block}"

    def render(self) -> str:
        return f"{self.annotation}:k{self.growth}"

    @classmethod
    def from_annotation(cls, text: str, **overrides) -> "GeneratorConfig":
        b, u, k = parse_arch(text)
        if k is not None:
            overrides.setdefault("growth", k)
        return cls(blocks=b, units_per_block=u, **overrides)

    @property
    def block_width(self) -> int:
        """Channels entering each block (and produced by compressors): 2k."""
        return 2 * self.growth

    @property
    def block_out_channels(self) -> int:
        return self.block_width + self.units_per_block * self.growth


@dataclass(frozen=True)
class DiscriminatorConfig:
    """SRGAN-shaped critic with layer norm; widths double every stage."""

    base_width: int = 64
    stages: int = 4
    leaky_slope: float = 0.2
    head_width: int = 1024
    input_channels: int = 1
    input_size: int = 32  # cube side the dense head is built for

    def __post_init__(self):
        if self.base_width < 1 or self.stages < 1 or self.head_width < 1:
            raise ValueError("base_width, stages and head_width must be >= 1")
        if self.input_size < 2 ** self.stages:
            raise ValueError(
                f"input_size {self.input_size} too small for {self.stages} "
                f"stride-2 stages (needs >= {2 ** self.stages})")

    @property
    def final_spatial(self) -> int:
        n = self.input_size
        for _ in range(self.stages):
            n = -(-n // 2)
        return n

    @property
    def final_width(self) -> int:
        return self.base_width * 2 ** (self.stages - 1)

    @property
    def flat_features(self) -> int:
        return self.final_width * self.final_spatial ** 3


AnyConfig = Union[GeneratorConfig, DiscriminatorConfig]


@dataclass(frozen=True)
class _Layer:
    name: str
    kind: str        # conv3 | conv1 | norm | dense
    cin: int
    cout: int
    ksize: int = 0
    stride: int = 1


def _generator_layers(cfg: GeneratorConfig) -> Iterator[_Layer]:
    width = cfg.block_width
    yield _Layer("initial", "conv3", cfg.input_channels, width, 3)
    for i in range(1, cfg.blocks + 1):
        if i > 1:
            yield _Layer(f"compressor{i}", "conv1",
                         (i - 1) * cfg.block_out_channels, width, 1)
        for j in range(1, cfg.units_per_block + 1):
            cin = width + (j - 1) * cfg.growth
            if cfg.unit_norm == "batch_norm":
                yield _Layer(f"block{i}.unit{j}.norm", "norm", cin, cin)
            yield _Layer(f"block{i}.unit{j}.conv", "conv3", cin, cfg.growth, 3)
    yield _Layer("recon", "conv1", cfg.blocks * cfg.block_out_channels,
                 cfg.input_channels, 1)


def _discriminator_layers(cfg: DiscriminatorConfig) -> Iterator[_Layer]:
    prev = cfg.input_channels
    for i in range(1, cfg.stages + 1):
        width = cfg.base_width * 2 ** (i - 1)
        yield _Layer(f"stage{i}.conv_a", "conv3", prev, width, 3, stride=1)
        if i > 1:  # the very first convolution carries no normalization
            yield _Layer(f"stage{i}.conv_a.norm", "norm", width, width)
        yield _Layer(f"stage{i}.conv_b", "conv3", width, width, 3, stride=2)
        yield _Layer(f"stage{i}.conv_b.norm", "norm", width, width)
        prev = width
    yield _Layer("head.fc1", "dense", cfg.flat_features, cfg.head_width)
    yield _Layer("head.fc2", "dense", cfg.head_width, 1)


def _layers(cfg: AnyConfig) -> Iterator[_Layer]:
    if isinstance(cfg, GeneratorConfig):
        return _generator_layers(cfg)
    if isinstance(cfg, DiscriminatorConfig):
        return _discriminator_layers(cfg)
    raise TypeError(f"unsupported config type {type(cfg).__name__}")


def _layer_param_count(layer: _Layer) -> int:
    if layer.kind in ("conv3", "conv1"):
        return layer.cout * layer.cin * layer.ksize ** 3 + layer.cout
    if layer.kind == "norm":
        return 2 * layer.cin
    if layer.kind == "dense":
        return layer.cout * layer.cin + layer.cout
    raise ValueError(layer.kind)


def count_parameters(cfg: AnyConfig) -> int:
    """Exact trainable-parameter count derived from the wiring alone."""
    return sum(_layer_param_count(layer) for layer in _layers(cfg))


def count_macs(cfg: GeneratorConfig, reference_voxels: int = 1) -> int:
    """Convolution multiply-accumulates per output voxel, times reference_voxels.

    Counts conv work only (Cin*Cout*k^3 per voxel under same padding, stride
    1); normalization and activations are excluded.  This is the tool's own
    definition and is not calibrated to any published ops column.
    """
    if not isinstance(cfg, GeneratorConfig):
        raise TypeError("count_macs is defined for generator configs")
    per_voxel = sum(layer.cin * layer.cout * layer.ksize ** 3
                    for layer in _generator_layers(cfg)
                    if layer.kind in ("conv3", "conv1"))
    return per_voxel * reference_voxels


def generator_receptive_radius(cfg: GeneratorConfig) -> int:
    """Half-width of the output receptive field: one voxel per 3x3x3 conv
    on the deepest path (initial conv plus every unit of every block)."""
    return 1 + cfg.blocks * cfg.units_per_block


@dataclass
class ModelParams:
    """Named parameter tensors plus the config that shaped them.

    ``states`` holds batch-norm running statistics (generator only); they are
    buffers, not parameters, and are excluded from counts.
    """

    config: AnyConfig
    params: dict[str, Tensor]
    states: dict[str, NormState] = field(default_factory=dict)

    @property
    def kind(self) -> str:
        return "generator" if isinstance(self.config, GeneratorConfig) else "critic"

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def parameter_count(self) -> int:
        return sum(t.size for t in self.params.values())

    def set_requires_grad(self, flag: bool):
        for t in self.params.values():
            t.requires_grad = flag

    def cast(self, dtype) -> "ModelParams":
        new = {name: Tensor(t.data.astype(dtype), requires_grad=t.requires_grad)
               for name, t in self.params.items()}
        states = {name: NormState(s.mean.copy(), s.var.copy(), s.momentum, s.initialized)
                  for name, s in self.states.items()}
        return ModelParams(self.config, new, states)

    def clone(self) -> "ModelParams":
        return self.cast(self.dtype)


def _he_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _build(cfg: AnyConfig, seed: int, dtype) -> ModelParams:
    rng = np.random.default_rng(seed)
    params: dict[str, Tensor] = {}
    states: dict[str, NormState] = {}
    leaky = isinstance(cfg, DiscriminatorConfig)
    for layer in _layers(cfg):
        if layer.kind in ("conv3", "conv1"):
            k = layer.ksize
            fan_in = layer.cin * k ** 3
            params[f"{layer.name}.weight"] = Tensor(
                _he_normal(rng, (layer.cout, layer.cin, k, k, k), fan_in).astype(dtype),
                requires_grad=True)
            params[f"{layer.name}.bias"] = Tensor(
                np.zeros(layer.cout, dtype=dtype), requires_grad=True)
        elif layer.kind == "norm":
            params[f"{layer.name}.gain"] = Tensor(
                np.ones(layer.cin, dtype=dtype), requires_grad=True)
            params[f"{layer.name}.bias"] = Tensor(
                np.zeros(layer.cin, dtype=dtype), requires_grad=True)
            if not leaky:  # generator batch norm carries running statistics
                states[layer.name] = NormState.for_channels(layer.cin)
        elif layer.kind == "dense":
            params[f"{layer.name}.weight"] = Tensor(
                _he_normal(rng, (layer.cout, layer.cin), layer.cin).astype(dtype),
                requires_grad=True)
            params[f"{layer.name}.bias"] = Tensor(
                np.zeros(layer.cout, dtype=dtype), requires_grad=True)
    return ModelParams(cfg, params, states)


def build_generator(cfg: GeneratorConfig, seed: int, dtype=np.float64) -> ModelParams:
    """Materialize generator parameters with seeded He-normal initialization."""
    return _build(cfg, seed, dtype)


def build_discriminator(cfg: DiscriminatorConfig, seed: int, dtype=np.float64) -> ModelParams:
    return _build(cfg, seed, dtype)


def generator_forward(model: ModelParams, x: Tensor, mode: str = "train") -> Tensor:
    """Run the generator; output spatial grid equals the input grid.

    Train mode uses batch statistics (updating the running estimates); eval
    mode uses the stored running statistics and never mutates state.
    """
    cfg = model.config
    if not isinstance(cfg, GeneratorConfig):
        raise TypeError("generator_forward needs generator params")
    if x.ndim != 5 or x.shape[1] != cfg.input_channels:
        raise ShapeError(
            f"generator expects (N,{cfg.input_channels},D,H,W) input, got {x.shape}")
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    p = model.params

    feats = conv3d(x, p["initial.weight"], p["initial.bias"], padding="same")
    block_outputs = []
    block_in = feats
    for i in range(1, cfg.blocks + 1):
        if i > 1:
            pool = concat_channels(block_outputs)
            block_in = conv3d(pool, p[f"compressor{i}.weight"],
                              p[f"compressor{i}.bias"], padding="same")
        unit_feats = [block_in]
        for j in range(1, cfg.units_per_block + 1):
            h = concat_channels(unit_feats) if j > 1 else unit_feats[0]
            key = f"block{i}.unit{j}"
            if cfg.unit_norm == "batch_norm":
                h = normalize(h, "batch_norm", p[f"{key}.norm.gain"],
                              p[f"{key}.norm.bias"], mode=mode,
                              state=model.states.get(f"{key}.norm"))
            h = activation(h, cfg.activation)
            unit_feats.append(conv3d(h, p[f"{key}.conv.weight"],
                                     p[f"{key}.conv.bias"], padding="same"))
        block_outputs.append(concat_channels(unit_feats))
    out = conv3d(concat_channels(block_outputs), p["recon.weight"],
                 p["recon.bias"], padding="same")
    if cfg.global_residual:
        out = add(out, x)
    return out


def discriminator_forward(model: ModelParams, x: Tensor) -> Tensor:
    """Critic score per batch item, unbounded real (no squashing)."""
    cfg = model.config
    if not isinstance(cfg, DiscriminatorConfig):
        raise TypeError("discriminator_forward needs critic params")
    expected = (cfg.input_channels,) + (cfg.input_size,) * 3
    if x.ndim != 5 or x.shape[1:] != expected:
        raise ShapeError(
            f"critic was built for input (N,{cfg.input_channels},"
            f"{cfg.input_size},{cfg.input_size},{cfg.input_size}), got {x.shape}")
    p = model.params
    alpha = cfg.leaky_slope

    h = x
    for i in range(1, cfg.stages + 1):
        h = conv3d(h, p[f"stage{i}.conv_a.weight"], p[f"stage{i}.conv_a.bias"],
                   stride=1, padding="same")
        if i > 1:
            h = normalize(h, "layer_norm", p[f"stage{i}.conv_a.norm.gain"],
                          p[f"stage{i}.conv_a.norm.bias"])
        h = leaky_relu(h, alpha)
        h = conv3d(h, p[f"stage{i}.conv_b.weight"], p[f"stage{i}.conv_b.bias"],
                   stride=2, padding="same")
        h = normalize(h, "layer_norm", p[f"stage{i}.conv_b.norm.gain"],
                      p[f"stage{i}.conv_b.norm.bias"])
        h = leaky_relu(h, alpha)
    n = h.shape[0]
    flat = reshape(h, (n, cfg.flat_features))
    hid = leaky_relu(linear(flat, p["head.fc1.weight"], p["head.fc1.bias"]), alpha)
    return reshape(linear(hid, p["head.fc2.weight"], p["head.fc2.bias"]), (n,))


# ---------------------------------------------------------------------------
# summaries


@dataclass
class LayerRow:
    layer: str
    name: str
    out_channels: int
    params: int
    macs: int


@dataclass
class ModelSummary:
    title: str
    parameter_count: int
    macs_per_output_voxel: int
    rows: list[LayerRow]


def summarize(cfg: AnyConfig) -> ModelSummary:
    rows = []
    kind_label = {"conv3": "conv3x3x3", "conv1": "conv1x1x1",
                  "norm": "norm", "dense": "dense"}
    for layer in _layers(cfg):
        macs = (layer.cin * layer.cout * layer.ksize ** 3
                if layer.kind in ("conv3", "conv1") else 0)
        rows.append(LayerRow(kind_label[layer.kind], layer.name, layer.cout,
                             _layer_param_count(layer), macs))
    if isinstance(cfg, GeneratorConfig):
        title = f"mDCSRN {cfg.annotation}"
        macs_total = count_macs(cfg)
    else:
        title = f"critic w{cfg.base_width}s{cfg.stages}"
        macs_total = 0
    return ModelSummary(title, sum(r.params for r in rows), macs_total, rows)


def render_summary(summary: ModelSummary) -> str:
    lines = [summary.title]
    header = f"{'layer':<12} {'name':<24} {'out_ch':>7} {'params':>10} {'macs/voxel':>11}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in summary.rows:
        lines.append(f"{r.layer:<12} {r.name:<24} {r.out_channels:>7} "
                     f"{r.params:>10,} {r.macs:>11,}")
    lines.append("-" * len(header))
    lines.append(f"{'total':<37} {'':>7} {summary.parameter_count:>10,} "
                 f"{summary.macs_per_output_voxel:>11,}")
    return "\n".join(lines)


def summary_csv(summary: ModelSummary) -> str:
    lines = ["layer,name,out_channels,params,macs"]
    for r in summary.rows:
        lines.append(f"{r.layer},{r.name},{r.out_channels},{r.params},{r.macs}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoints


def _config_to_dict(cfg: AnyConfig) -> dict:
    d = asdict(cfg)
    d["__kind__"] = "generator" if isinstance(cfg, GeneratorConfig) else "critic"
    return d


def _config_from_dict(d: dict) -> AnyConfig:
    d = dict(d)
    kind = d.pop("__kind__")
    if kind == "generator":
        return GeneratorConfig(**d)
    if kind == "critic":
        return DiscriminatorConfig(**d)
    raise ValueError(f"unknown checkpoint kind {kind!r}")


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path, model: ModelParams):
    """Write params (and norm running stats) to a single binary container.

    Layout: magic, little-endian uint64 header length, JSON header, raw
    little-endian tensor payload in header order, each with a crc32.
    """
    dtype = model.dtype
    dtype_tag = "float32" if dtype == np.float32 else "float64"
    wire = "<f4" if dtype == np.float32 else "<f8"
    tensors = []
    payload = bytearray()
    for name, t in model.params.items():
        raw = np.ascontiguousarray(t.data).astype(wire).tobytes()
        tensors.append({"name": name, "shape": list(t.shape),
                        "offset": len(payload), "nbytes": len(raw),
                        "crc32": zlib.crc32(raw)})
        payload.extend(raw)
    buffers = []
    for name, s in model.states.items():
        for part, arr in (("mean", s.mean), ("var", s.var)):
            raw = np.ascontiguousarray(arr).astype("<f8").tobytes()
            buffers.append({"name": name, "part": part, "shape": list(arr.shape),
                            "offset": len(payload), "nbytes": len(raw),
                            "crc32": zlib.crc32(raw), "momentum": s.momentum,
                            "initialized": s.initialized})
            payload.extend(raw)
    header = {
        "version": CHECKPOINT_VERSION,
        "kind": model.kind,
        "config": _config_to_dict(model.config),
        "arch": model.config.render() if isinstance(model.config, GeneratorConfig) else None,
        "dtype": dtype_tag,
        "tensors": tensors,
        "buffers": buffers,
    }
    blob = json.dumps(header).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(np.uint64(len(blob)).astype("<u8").tobytes())
        fh.write(blob)
        fh.write(bytes(payload))


def load_checkpoint(path) -> ModelParams:
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(f"{path}: not a model checkpoint (bad magic)")
        (hlen,) = np.frombuffer(fh.read(8), dtype="<u8")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        if header["version"] != CHECKPOINT_VERSION:
            raise CheckpointError(f"{path}: unsupported version {header['version']}")
        payload = fh.read()
    cfg = _config_from_dict(header["config"])
    wire = "<f4" if header["dtype"] == "float32" else "<f8"
    dtype = np.float32 if header["dtype"] == "float32" else np.float64
    params: dict[str, Tensor] = {}
    for rec in header["tensors"]:
        raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        if zlib.crc32(raw) != rec["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch for tensor {rec['name']}")
        arr = np.frombuffer(raw, dtype=wire).astype(dtype).reshape(rec["shape"])
        params[rec["name"]] = Tensor(arr, requires_grad=True)
    states: dict[str, NormState] = {}
    for rec in header["buffers"]:
        raw = payload[rec["offset"]:rec["offset"] + rec["nbytes"]]
        if zlib.crc32(raw) != rec["crc32"]:
            raise CheckpointError(f"{path}: checksum mismatch for buffer {rec['name']}")
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rec["shape"])
        state = states.setdefault(
            rec["name"], NormState(np.zeros(1), np.ones(1), rec["momentum"],
                                   rec["initialized"]))
        if rec["part"] == "mean":
            state.mean = arr
        else:
            state.var = arr
    return ModelParams(cfg, params, states)
