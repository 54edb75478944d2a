"""Operator-facing command surface.

Verbs: degrade, train, infer, evaluate, summarize, gradcheck, split, slices.
Every command records a manifest (full config, seed, input hashes, artifact
paths) under its output directory so runs are reproducible.  Exit codes:
0 success, 2 usage/input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .autodiff import Tensor, no_grad
from .gradcheck import render_results, run_gradcheck
from .kspace import RESAMPLE_KINDS, lr_simulate
from .metrics import MetricsRow, aggregate, evaluate_subject
from .models import (
    DiscriminatorConfig, GeneratorConfig, build_discriminator, build_generator,
    count_macs, count_parameters, generator_forward, load_checkpoint,
    parse_arch, render_summary, summarize, summary_csv,
)
from .patches import extract, merge, plan_grid
from .training import PatchDataset, TrainConfig, TrainSink, TrainingDiverged, train
from .volumes import (
    PAPER_SPLIT_RATIOS, Volume, make_split, read_nifti, read_raw,
    synth_phantom, write_nifti, write_raw,
)

# published generator sizes the summarize command reports deviation against
PUBLISHED_PARAM_TARGETS = {
    ("b1u8", 16): 307_000,
    ("b2u4", 16): 200_000,
    ("b3u4", 16): 304_000,
    ("b4u4", 16): 412_000,
}


class UsageError(ValueError):
    pass


class NumericalError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# manifest and volume helpers


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    argv: list[str]
    config: dict
    seed: int | None
    input_hashes: dict[str, str]
    artifacts: list[str]
    version: str = __version__
    extra: dict = field(default_factory=dict)

    def write(self, out_dir: Path):
        out_dir.mkdir(parents=True, exist_ok=True)
        payload = asdict(self)
        (out_dir / "manifest.json").write_text(json.dumps(payload, indent=2) + "\n")


def _hash_inputs(paths) -> dict[str, str]:
    return {str(p): _sha256(Path(p)) for p in paths}


def load_volume(path) -> Volume:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"input volume not found: {path}")
    if path.suffix == ".nii":
        vol, _ = read_nifti(path)
        return vol
    if path.suffix == ".vol":
        return read_raw(path)
    raise UsageError(f"unknown volume format {path.suffix!r} (expect .nii or .vol)")


def save_volume(volume: Volume, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if path.suffix == ".nii":
        write_nifti(volume, path)
    elif path.suffix == ".vol":
        write_raw(volume, path)
    else:
        raise UsageError(f"unknown volume format {path.suffix!r} (expect .nii or .vol)")


def _volume_files(directory: Path) -> dict[str, Path]:
    files = {}
    for p in sorted(directory.iterdir()):
        if p.suffix in (".nii", ".vol"):
            files[p.stem] = p
    return files


def _parse_factors(text: str) -> tuple[int, int, int]:
    try:
        parts = tuple(int(p) for p in text.split(","))
    except ValueError:
        raise UsageError(f"--factors must be three comma-separated ints, got {text!r}")
    if len(parts) != 3 or any(p < 1 for p in parts):
        raise UsageError(f"--factors must be three positive ints, got {text!r}")
    return parts


# ---------------------------------------------------------------------------
# commands


def cmd_degrade(args) -> int:
    factors = _parse_factors(args.factors)
    out_dir = Path(args.out)
    vol_dir = out_dir / "volumes"
    artifacts = []
    for src in args.inputs:
        vol = load_volume(src)
        lr = lr_simulate(vol, factors, interp=args.interp)
        dst = vol_dir / Path(src).name
        save_volume(lr, dst)
        artifacts.append(str(dst))
    RunManifest(
        command="degrade", argv=sys.argv[1:],
        config={"factors": list(factors), "interp": args.interp},
        seed=None, input_hashes=_hash_inputs(args.inputs), artifacts=artifacts,
    ).write(out_dir)
    print(f"degraded {len(artifacts)} volume(s) -> {vol_dir}")
    return 0


def _load_train_config(args) -> dict:
    merged: dict = {}
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        merged = yaml.safe_load(path.read_text()) or {}
    # flag overrides, recorded in the manifest as part of the merged config
    if args.steps is not None:
        merged.setdefault("train", {})["steps"] = args.steps
    if args.seed is not None:
        merged.setdefault("train", {})["seed"] = args.seed
    if args.arch:
        merged["arch"] = args.arch
    if args.growth is not None:
        merged["growth"] = args.growth
    return merged


def _dataset_from_dir(path: Path, patch_size: int, margin: int,
                      dtype, augment_flips: bool = False) -> PatchDataset:
    hr_dir, lr_dir = path / "hr", path / "lr"
    if not hr_dir.is_dir() or not lr_dir.is_dir():
        raise UsageError(f"dataset dir {path} needs hr/ and lr/ subdirectories")
    hr_files = _volume_files(hr_dir)
    lr_files = _volume_files(lr_dir)
    if set(hr_files) != set(lr_files):
        missing = set(hr_files) ^ set(lr_files)
        raise UsageError(f"dataset dir {path}: unmatched subjects {sorted(missing)}")
    subjects = sorted(hr_files)
    return PatchDataset([load_volume(lr_files[s]) for s in subjects],
                        [load_volume(hr_files[s]) for s in subjects],
                        patch_size=patch_size, margin=margin, dtype=dtype,
                        augment_flips=augment_flips)


def cmd_train(args) -> int:
    merged = _load_train_config(args)
    arch = merged.get("arch", "b2u4")
    growth = merged.get("growth")
    gen_cfg = GeneratorConfig.from_annotation(
        arch, **({"growth": growth} if growth else {}),
        activation=merged.get("activation", "elu"),
        unit_norm=merged.get("unit_norm", "batch_norm"))
    train_kwargs = dict(merged.get("train", {}))
    steps = train_kwargs.pop("steps", None)
    if args.phase == "pretrain":
        if steps is not None:
            train_kwargs["pretrain_steps"] = steps
        train_kwargs["gan_steps"] = 0
    else:
        if args.init is None:
            raise UsageError("GAN phase requires --init with a pretrain checkpoint")
        if steps is not None:
            train_kwargs["gan_steps"] = steps
        train_kwargs["pretrain_steps"] = 0
    cfg = TrainConfig(**train_kwargs)

    out_dir = Path(args.out)
    data = _dataset_from_dir(Path(args.data), cfg.patch_size, 3, cfg.dtype,
                             augment_flips=bool(merged.get("augment_flips", False)))
    val = (_dataset_from_dir(Path(args.val), cfg.patch_size, 3, cfg.dtype)
           if args.val else None)

    if args.init:
        generator = load_checkpoint(args.init)
        if generator.kind != "generator":
            raise UsageError(f"--init {args.init} is not a generator checkpoint")
    else:
        generator = build_generator(gen_cfg, seed=cfg.seed, dtype=cfg.dtype)

    critic = None
    if args.phase == "gan":
        critic_kwargs = dict(merged.get("critic", {}))
        critic_kwargs.setdefault("input_size", cfg.patch_size)
        critic = build_discriminator(DiscriminatorConfig(**critic_kwargs),
                                     seed=cfg.seed + 1, dtype=cfg.dtype)

    sink = TrainSink(out_dir)
    try:
        train(cfg, generator, data, critic=critic, val_data=val, sink=sink)
    finally:
        sink.close()
    RunManifest(
        command="train", argv=sys.argv[1:],
        config={"generator": asdict(gen_cfg), "train": asdict(cfg),
                "critic": asdict(critic.config) if critic else None,
                "phase": args.phase},
        seed=cfg.seed,
        input_hashes=_hash_inputs([args.init] if args.init else []),
        artifacts=[str(out_dir / "metrics.csv"),
                   str(out_dir / "checkpoints")],
    ).write(out_dir)
    print(f"training complete; metrics at {out_dir / 'metrics.csv'}")
    return 0


def cmd_infer(args) -> int:
    model = load_checkpoint(args.model)
    if model.kind != "generator":
        raise UsageError(f"{args.model} is not a generator checkpoint")
    vol = load_volume(args.input)
    patch = int(args.patch)
    margin = int(args.margin)
    if any(patch > s for s in vol.shape):
        raise UsageError(f"patch {patch} exceeds volume shape {vol.shape}")
    grid = plan_grid(vol.shape, (patch,) * 3, margin)
    dtype = model.dtype
    tiles = extract(np.asarray(vol.values, dtype=dtype), grid)

    t0 = time.perf_counter()
    outputs = []
    group = max(1, int(args.batch))
    with no_grad():
        for start in range(0, len(tiles), group):
            chunk = tiles[start:start + group][:, None]
            sr = generator_forward(model, Tensor(chunk), mode="eval").data
            outputs.extend(sr[:, 0])
    wall = time.perf_counter() - t0
    merged_values = merge(outputs, grid)
    out_dir = Path(args.out)
    dst = out_dir / "volumes" / Path(args.output).name
    save_volume(Volume(merged_values.astype(np.float64), vol.voxel_size,
                       vol.subject_id), dst)
    voxels = int(np.prod(vol.shape))
    RunManifest(
        command="infer", argv=sys.argv[1:],
        config={"patch": patch, "margin": margin, "batch": group,
                "arch": model.config.render(), "grid": grid.to_dict()},
        seed=None, input_hashes=_hash_inputs([args.model, args.input]),
        artifacts=[str(dst)],
        extra={"wall_s": round(wall, 3),
               "voxels_per_s": round(voxels / wall, 1) if wall > 0 else None},
    ).write(out_dir)
    print(f"inferred {voxels} voxels in {wall:.2f}s -> {dst}")
    return 0


def cmd_evaluate(args) -> int:
    ref_files = _volume_files(Path(args.ref))
    test_files = _volume_files(Path(args.test))
    if set(ref_files) != set(test_files):
        only_ref = sorted(set(ref_files) - set(test_files))
        only_test = sorted(set(test_files) - set(ref_files))
        raise UsageError(f"subject sets differ; only in --ref: {only_ref}, "
                         f"only in --test: {only_test}")
    if not ref_files:
        raise UsageError("no volumes found to evaluate")
    rows: list[MetricsRow] = []
    for subject in sorted(ref_files):
        ref = load_volume(ref_files[subject])
        test = load_volume(test_files[subject])
        row = evaluate_subject(ref, test, crop_margin=args.crop_margin,
                               ssim_mode=args.mode)
        row.subject_id = subject
        rows.append(row)
    summary = aggregate(rows)

    out_csv = Path(args.out)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    lines = ["subject,ssim,psnr,nrmse,region"]
    for r in rows:
        lines.append(f"{r.subject_id},{r.ssim:.6f},{r.psnr_text()},{r.nrmse:.6f},{r.region}")
    lines.append(f"mean,{summary['ssim_mean']:.6f},{summary['psnr_mean']:.6f},"
                 f"{summary['nrmse_mean']:.6f},")
    lines.append(f"std,{summary['ssim_std']:.6f},{summary['psnr_std']:.6f},"
                 f"{summary['nrmse_std']:.6f},")
    out_csv.write_text("\n".join(lines) + "\n")

    # companion table in the published column structure
    params = macs = ""
    label = args.label or "voxelsr"
    if args.arch:
        b, u, k = parse_arch(args.arch)
        gcfg = GeneratorConfig(b, u, k or 16)
        params = str(count_parameters(gcfg))
        macs = str(count_macs(gcfg))
        label = args.label or f"mDCSRN {gcfg.annotation}"
    table = Path(str(out_csv.with_suffix("")) + "_table.csv")
    table.write_text(
        "config,ssim_mean,ssim_std,psnr_mean,psnr_std,nrmse_mean,nrmse_std,"
        "params,macs,time_s\n"
        f"{label},{summary['ssim_mean']:.4f},{summary['ssim_std']:.4f},"
        f"{summary['psnr_mean']:.4f},{summary['psnr_std']:.4f},"
        f"{summary['nrmse_mean']:.4f},{summary['nrmse_std']:.4f},"
        f"{params},{macs},\n")
    print(f"evaluated {len(rows)} subject(s) -> {out_csv}")
    return 0


def cmd_summarize(args) -> int:
    b, u, k = parse_arch(args.arch)
    cfg = GeneratorConfig(b, u, k or args.growth)
    summary = summarize(cfg)
    print(render_summary(summary))
    target = PUBLISHED_PARAM_TARGETS.get((cfg.annotation, cfg.growth))
    if target:
        deviation = abs(summary.parameter_count - target) / target * 100.0
        print(f"published size {target:,}; deviation {deviation:.2f}%")
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(summary_csv(summary))
        print(f"layer table -> {args.csv}")
    return 0


def cmd_gradcheck(args) -> int:
    results = run_gradcheck(args.size)
    print(render_results(results))
    if not all(r.ok for r in results):
        raise NumericalError("gradient check failed")
    return 0


def cmd_split(args) -> int:
    ids_path = Path(args.ids)
    if not ids_path.exists():
        raise UsageError(f"ids file not found: {ids_path}")
    ids = [line.strip() for line in ids_path.read_text().splitlines() if line.strip()]
    ratios = PAPER_SPLIT_RATIOS
    if args.ratios:
        parts = tuple(int(p) for p in args.ratios.split(","))
        if len(parts) != 4:
            raise UsageError("--ratios must be four comma-separated ints")
        ratios = parts
    manifest = make_split(ids, ratios=ratios, seed=args.seed)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps(manifest.to_dict(), indent=2) + "\n")
    sizes = [len(manifest.train), len(manifest.validation),
             len(manifest.evaluation), len(manifest.test)]
    print(f"split {len(ids)} subjects into {sizes} -> {out}")
    return 0


def cmd_phantom(args) -> int:
    out_dir = Path(args.out)
    shape = tuple(int(s) for s in args.shape.split(","))
    if len(shape) != 3:
        raise UsageError("--shape must be three comma-separated ints")
    artifacts = []
    for i in range(args.count):
        vol = synth_phantom(shape, seed=args.seed + i, recipe=args.recipe)
        dst = out_dir / "volumes" / f"{vol.subject_id}.nii"
        save_volume(vol, dst)
        artifacts.append(str(dst))
    RunManifest(
        command="phantom", argv=sys.argv[1:],
        config={"shape": list(shape), "count": args.count, "recipe": args.recipe},
        seed=args.seed, input_hashes={}, artifacts=artifacts,
    ).write(out_dir)
    print(f"wrote {len(artifacts)} phantom(s) -> {out_dir / 'volumes'}")
    return 0


def cmd_slices(args) -> int:
    from PIL import Image

    panels = []
    for src in args.inputs:
        vol = load_volume(src)
        axis = args.axis % 3
        index = args.index if args.index is not None else vol.shape[axis] // 2
        if not 0 <= index < vol.shape[axis]:
            raise UsageError(f"slice index {index} outside axis extent {vol.shape[axis]}")
        plane = np.take(vol.values, index, axis=axis).astype(np.float64)
        lo, hi = plane.min(), plane.max()
        scale = (plane - lo) / (hi - lo) if hi > lo else np.zeros_like(plane)
        panels.append((scale * 255).astype(np.uint8))
    heights = {p.shape[0] for p in panels}
    if len(heights) != 1:
        raise UsageError("all volumes must share slice height for side-by-side export")
    gap = np.full((panels[0].shape[0], 4), 255, dtype=np.uint8)
    strip = panels[0]
    for p in panels[1:]:
        strip = np.concatenate([strip, gap, p], axis=1)
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(strip, mode="L").save(out)
    print(f"slice panel ({len(panels)} volume(s)) -> {out}")
    return 0


# ---------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="voxelsr",
        description="3D MRI super-resolution: degrade, train, infer, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("degrade", help="simulate LR volumes by k-space truncation")
    p.add_argument("inputs", nargs="+", help="input volumes (.nii or .vol)")
    p.add_argument("--factors", default="1,2,2",
                   help="per-axis truncation factors, e.g. 1,2,2")
    p.add_argument("--interp", default="linear", choices=RESAMPLE_KINDS)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_degrade)

    p = sub.add_parser("train", help="pretrain or GAN-train the generator")
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--phase", choices=("pretrain", "gan"), default="pretrain")
    p.add_argument("--data", required=True, help="dataset dir with hr/ and lr/")
    p.add_argument("--val", help="validation dataset dir with hr/ and lr/")
    p.add_argument("--init", help="checkpoint to start from (required for gan)")
    p.add_argument("--arch", help="generator annotation, e.g. b2u4")
    p.add_argument("--growth", type=int, help="growth channels per unit")
    p.add_argument("--steps", type=int, help="override step budget for this phase")
    p.add_argument("--seed", type=int, help="override seed")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="super-resolve a volume with a checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--patch", type=int, default=32)
    p.add_argument("--margin", type=int, default=3)
    p.add_argument("--batch", type=int, default=4, help="patches per forward pass")
    p.add_argument("--output", required=True, help="output volume filename")
    p.add_argument("--out", required=True, help="run directory for manifest")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="quality metrics between volume dirs")
    p.add_argument("--ref", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--out", required=True, help="per-subject CSV path")
    p.add_argument("--mode", default="slicewise_2d",
                   choices=("slicewise_2d", "full_3d"))
    p.add_argument("--crop-margin", type=int, default=3)
    p.add_argument("--arch", help="annotate the summary table with this config")
    p.add_argument("--label", help="config label for the summary table")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("summarize", help="layer table and parameter counts")
    p.add_argument("--arch", required=True, help="bXuY or bXuY:kZ")
    p.add_argument("--growth", type=int, default=16)
    p.add_argument("--csv", help="also write the table as CSV")
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suites")
    p.add_argument("--size", choices=("small", "full"), default="small")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("split", help="subject-level dataset split")
    p.add_argument("--ids", required=True, help="text file, one subject id per line")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratios", help="four comma-separated weights (default 780,111,111,111)")
    p.add_argument("--out", required=True, help="split manifest JSON path")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("phantom", help="synthesize desk-scale phantom volumes")
    p.add_argument("--shape", default="64,64,64")
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--recipe", default="blobs_plus_tubes",
                   choices=("smooth_blobs", "blobs_plus_tubes"))
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("slices", help="export a side-by-side slice PNG")
    p.add_argument("inputs", nargs="+")
    p.add_argument("--axis", type=int, default=0)
    p.add_argument("--index", type=int)
    p.add_argument("--output", required=True)
    p.set_defaults(func=cmd_slices)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, FileNotFoundError) as exc:
        # UsageError, VolumeError, ShapeError and GridError all derive from
        # ValueError: bad input or bad arguments, not a numerical failure
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (NumericalError, TrainingDiverged) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
