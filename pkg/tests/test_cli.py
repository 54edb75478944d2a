"""Command surface: exit codes, manifests, end-to-end verbs on tiny data."""

import json

import numpy as np
import pytest

from voxelsr.autodiff import Tensor, no_grad
from voxelsr.cli import main
from voxelsr.kspace import lr_simulate
from voxelsr.models import (
    GeneratorConfig, build_generator, generator_forward, load_checkpoint,
    save_checkpoint,
)
from voxelsr.volumes import read_nifti, synth_phantom, write_nifti


@pytest.fixture
def phantom_file(tmp_path):
    v = synth_phantom((20, 20, 20), seed=3)
    path = tmp_path / "subj.nii"
    write_nifti(v, path)
    return path


class TestDegrade:
    def test_identity_factors(self, tmp_path, phantom_file):
        out = tmp_path / "run"
        code = main(["degrade", str(phantom_file), "--factors", "1,1,1",
                     "--out", str(out)])
        assert code == 0
        src, _ = read_nifti(phantom_file)
        dst, _ = read_nifti(out / "volumes" / "subj.nii")
        assert np.max(np.abs(src.values - dst.values)) < 1e-6
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["command"] == "degrade"
        assert manifest["config"]["factors"] == [1, 1, 1]
        assert manifest["input_hashes"]

    def test_output_shape_preserved(self, tmp_path, phantom_file):
        out = tmp_path / "run"
        assert main(["degrade", str(phantom_file), "--factors", "1,2,2",
                     "--out", str(out)]) == 0
        dst, _ = read_nifti(out / "volumes" / "subj.nii")
        assert dst.shape == (20, 20, 20)

    def test_missing_input_exits_2(self, tmp_path, capsys):
        code = main(["degrade", str(tmp_path / "nope.nii"), "--out",
                     str(tmp_path / "o")])
        assert code == 2
        assert "nope.nii" in capsys.readouterr().err

    def test_deterministic(self, tmp_path, phantom_file):
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["degrade", str(phantom_file), "--out", str(out1)])
        main(["degrade", str(phantom_file), "--out", str(out2)])
        a = (out1 / "volumes" / "subj.nii").read_bytes()
        b = (out2 / "volumes" / "subj.nii").read_bytes()
        assert a == b


class TestSummarize:
    def test_b4u4_totals(self, capsys):
        assert main(["summarize", "--arch", "b4u4", "--growth", "16"]) == 0
        text = capsys.readouterr().out
        assert "mDCSRN b4u4" in text
        assert "408,929" in text
        assert "412,000" in text
        assert "0.75%" in text

    def test_csv_export(self, tmp_path):
        csv_path = tmp_path / "layers.csv"
        assert main(["summarize", "--arch", "b1u8", "--csv", str(csv_path)]) == 0
        lines = csv_path.read_text().splitlines()
        assert lines[0] == "layer,name,out_channels,params,macs"

    def test_bad_arch_exits_2(self, capsys):
        assert main(["summarize", "--arch", "u4b4"]) == 2
        assert "bXuY" in capsys.readouterr().err


class TestSplit:
    def test_paper_ratio(self, tmp_path):
        ids = tmp_path / "ids.txt"
        ids.write_text("\n".join(f"s{i:04d}" for i in range(1113)))
        out = tmp_path / "split.json"
        assert main(["split", "--ids", str(ids), "--seed", "3",
                     "--out", str(out)]) == 0
        manifest = json.loads(out.read_text())
        assert [len(manifest[k]) for k in
                ("train", "validation", "evaluation", "test")] == [780, 111, 111, 111]

    def test_missing_ids_file(self, tmp_path):
        assert main(["split", "--ids", str(tmp_path / "none.txt"),
                     "--out", str(tmp_path / "s.json")]) == 2


class TestGradcheck:
    def test_small_passes(self, capsys):
        assert main(["gradcheck", "--size", "small"]) == 0
        out = capsys.readouterr().out
        assert "checks passed" in out
        assert "FAIL" not in out


class TestEvaluate:
    def test_identical_dirs(self, tmp_path, capsys):
        ref = tmp_path / "ref"
        ref.mkdir()
        for i in range(2):
            write_nifti(synth_phantom((20, 20, 20), seed=i), ref / f"s{i}.nii")
        out = tmp_path / "metrics.csv"
        assert main(["evaluate", "--ref", str(ref), "--test", str(ref),
                     "--out", str(out), "--crop-margin", "3"]) == 0
        lines = out.read_text().splitlines()
        assert lines[0] == "subject,ssim,psnr,nrmse,region"
        for line in lines[1:3]:
            fields = line.split(",")
            assert float(fields[1]) == pytest.approx(1.0, abs=1e-9)
            assert fields[2] == "inf"
            assert float(fields[3]) == 0.0
        table = (tmp_path / "metrics_table.csv").read_text().splitlines()
        assert table[0].startswith("config,ssim_mean,ssim_std,psnr_mean")

    def test_subject_mismatch_lists_difference(self, tmp_path, capsys):
        ref, test = tmp_path / "ref", tmp_path / "test"
        ref.mkdir()
        test.mkdir()
        write_nifti(synth_phantom((20, 20, 20), seed=0), ref / "a.nii")
        write_nifti(synth_phantom((20, 20, 20), seed=0), test / "b.nii")
        assert main(["evaluate", "--ref", str(ref), "--test", str(test),
                     "--out", str(tmp_path / "m.csv")]) == 2
        err = capsys.readouterr().err
        assert "a" in err and "b" in err


def make_checkpoint(tmp_path, unit_norm="batch_norm"):
    cfg = GeneratorConfig(1, 2, growth=4, unit_norm=unit_norm)
    model = build_generator(cfg, seed=7)
    if unit_norm == "batch_norm":
        # populate running statistics so eval-mode inference is defined
        warm = synth_phantom((20, 20, 20), seed=5).values[None, None].astype(np.float64)
        with no_grad():
            generator_forward(model, Tensor(warm[:, :, :16, :16, :16]), "train")
    path = tmp_path / "model.ckpt"
    save_checkpoint(path, model)
    return path


class TestInfer:
    def test_output_shape_and_manifest(self, tmp_path, phantom_file):
        ckpt = make_checkpoint(tmp_path)
        out = tmp_path / "run"
        assert main(["infer", "--model", str(ckpt), "--input", str(phantom_file),
                     "--patch", "16", "--margin", "3",
                     "--output", "sr.nii", "--out", str(out)]) == 0
        sr, _ = read_nifti(out / "volumes" / "sr.nii")
        assert sr.shape == (20, 20, 20)
        manifest = json.loads((out / "manifest.json").read_text())
        assert manifest["extra"]["voxels_per_s"] > 0
        assert manifest["config"]["grid"]["margin"] == 3

    def test_patch_size_invariance_inside_margin(self, tmp_path):
        # receptive-field radius of b1u2 is 3 <= margin 3, and eval-mode
        # statistics are frozen, so tiling must not affect the output
        vol = synth_phantom((26, 26, 26), seed=9)
        vol_path = tmp_path / "v.nii"
        write_nifti(vol, vol_path)
        ckpt = make_checkpoint(tmp_path)
        outs = []
        for patch in (16, 20):
            out = tmp_path / f"run{patch}"
            assert main(["infer", "--model", str(ckpt), "--input", str(vol_path),
                         "--patch", str(patch), "--margin", "3",
                         "--output", "sr.nii", "--out", str(out)]) == 0
            outs.append(read_nifti(out / "volumes" / "sr.nii")[0].values)
        assert np.mean(np.abs(outs[0] - outs[1])) < 1e-5

    def test_patch_larger_than_volume(self, tmp_path, phantom_file):
        ckpt = make_checkpoint(tmp_path)
        assert main(["infer", "--model", str(ckpt), "--input", str(phantom_file),
                     "--patch", "64", "--output", "sr.nii",
                     "--out", str(tmp_path / "r")]) == 2


class TestTrainCommand:
    def test_pretrain_and_gan_phases(self, tmp_path):
        data_dir = tmp_path / "train"
        (data_dir / "hr").mkdir(parents=True)
        (data_dir / "lr").mkdir()
        for i in range(2):
            hr = synth_phantom((20, 20, 20), seed=20 + i)
            write_nifti(hr, data_dir / "hr" / f"s{i}.nii")
            write_nifti(lr_simulate(hr, (1, 2, 2)), data_dir / "lr" / f"s{i}.nii")
        cfg = tmp_path / "cfg.yaml"
        cfg.write_text(
            "arch: b1u1\n"
            "growth: 2\n"
            "train:\n"
            "  batch_size: 2\n"
            "  patch_size: 16\n"
            "  critic_warmup_steps: 2\n"
            "  critic_per_gen: 2\n"
            "  extra_critic_every: 0\n"
            "  extra_critic_steps: 0\n"
            "  lr_gan: 1.0e-5\n"
            "  checkpoint_every: 1000000\n"
            "  validate_every: 1000000\n"
            "critic:\n"
            "  base_width: 2\n"
            "  stages: 2\n"
            "  head_width: 4\n")
        out1 = tmp_path / "pre"
        assert main(["train", "--config", str(cfg), "--phase", "pretrain",
                     "--data", str(data_dir), "--steps", "3",
                     "--out", str(out1)]) == 0
        ckpt = out1 / "checkpoints" / "final.generator.ckpt"
        assert ckpt.exists()
        assert load_checkpoint(ckpt).kind == "generator"
        rows = (out1 / "metrics.csv").read_text().splitlines()
        assert len(rows) == 1 + 3

        out2 = tmp_path / "gan"
        assert main(["train", "--config", str(cfg), "--phase", "gan",
                     "--data", str(data_dir), "--steps", "5",
                     "--init", str(ckpt), "--out", str(out2)]) == 0
        rows = (out2 / "metrics.csv").read_text().splitlines()
        assert len(rows) == 1 + 5
        assert (out2 / "checkpoints" / "final.critic.ckpt").exists()

    def test_gan_without_init_refused(self, tmp_path, capsys):
        data_dir = tmp_path / "train"
        (data_dir / "hr").mkdir(parents=True)
        (data_dir / "lr").mkdir()
        assert main(["train", "--phase", "gan", "--data", str(data_dir),
                     "--out", str(tmp_path / "o")]) == 2
        assert "--init" in capsys.readouterr().err


class TestSlices:
    def test_side_by_side_png(self, tmp_path, phantom_file):
        out = tmp_path / "panel.png"
        assert main(["slices", str(phantom_file), str(phantom_file),
                     "--axis", "0", "--output", str(out)]) == 0
        from PIL import Image

        img = Image.open(out)
        assert img.size == (20 * 2 + 4, 20)
