"""Generator/critic construction, counts, summaries and checkpoints."""

import numpy as np
import pytest

from oracles import naive_conv3d
from voxelsr.autodiff import ShapeError, Tensor, backward
from voxelsr.models import (
    CheckpointError, DiscriminatorConfig, GeneratorConfig, build_discriminator,
    build_generator, count_macs, count_parameters, discriminator_forward,
    generator_forward, generator_receptive_radius, load_checkpoint, parse_arch,
    render_summary, save_checkpoint, summarize, summary_csv,
)
from voxelsr.training import l1_loss

# closed-form expectations for the published k=16 configurations
EXPECTED_COUNTS = {
    "b1u8": 306_721,
    "b2u4": 198_753,
    "b3u4": 302_305,
    "b4u4": 408_929,
}
PUBLISHED_COUNTS = {
    "b1u8": 307_000,
    "b2u4": 200_000,
    "b3u4": 304_000,
    "b4u4": 412_000,
}


class TestArchAnnotation:
    def test_round_trip(self):
        cfg = GeneratorConfig.from_annotation("b4u4", growth=16)
        assert cfg.annotation == "b4u4"
        assert cfg.render() == "b4u4:k16"
        b, u, k = parse_arch(cfg.render())
        assert (b, u, k) == (4, 4, 16)

    def test_bad_annotation(self):
        with pytest.raises(ValueError, match="bXuY"):
            parse_arch("4b4u")

    def test_invalid_config_values(self):
        with pytest.raises(ValueError):
            GeneratorConfig(blocks=1, units_per_block=0)
        with pytest.raises(ValueError):
            GeneratorConfig(blocks=1, units_per_block=1, growth=0)


class TestParameterCounts:
    @pytest.mark.parametrize("arch,expected", sorted(EXPECTED_COUNTS.items()))
    def test_closed_form_values(self, arch, expected):
        cfg = GeneratorConfig.from_annotation(arch, growth=16)
        assert count_parameters(cfg) == expected

    @pytest.mark.parametrize("arch", sorted(EXPECTED_COUNTS))
    def test_within_one_percent_of_published(self, arch):
        cfg = GeneratorConfig.from_annotation(arch, growth=16)
        target = PUBLISHED_COUNTS[arch]
        assert abs(count_parameters(cfg) - target) / target < 0.01

    @pytest.mark.parametrize("arch", sorted(EXPECTED_COUNTS))
    @pytest.mark.parametrize("growth", [4, 16])
    def test_count_equals_materialized_elements(self, arch, growth):
        cfg = GeneratorConfig.from_annotation(arch, growth=growth)
        model = build_generator(cfg, seed=0)
        assert model.parameter_count() == count_parameters(cfg)

    def test_critic_count_equals_materialized(self):
        cfg = DiscriminatorConfig(base_width=4, stages=2, head_width=16, input_size=16)
        model = build_discriminator(cfg, seed=0)
        assert model.parameter_count() == count_parameters(cfg)

    def test_b1u8_has_36_named_tensors(self):
        model = build_generator(GeneratorConfig.from_annotation("b1u8", growth=16), 0)
        assert len(model.params) == 36

    def test_b2u4_has_exactly_one_compressor(self):
        model = build_generator(GeneratorConfig.from_annotation("b2u4", growth=16), 0)
        compressors = {n.split(".")[0] for n in model.params if n.startswith("compressor")}
        assert compressors == {"compressor2"}

    def test_monotone_in_blocks_units_growth(self):
        base = count_parameters(GeneratorConfig(2, 2, growth=8))
        assert count_parameters(GeneratorConfig(3, 2, growth=8)) > base
        assert count_parameters(GeneratorConfig(2, 3, growth=8)) > base
        assert count_parameters(GeneratorConfig(2, 2, growth=9)) > base


class TestMacs:
    def test_b1u8_per_voxel(self):
        cfg = GeneratorConfig.from_annotation("b1u8", growth=16)
        assert count_macs(cfg) == 305_152

    def test_compressor_contribution(self):
        # b2u4 k16: initial + two blocks of dense units + one 96->32
        # compressor (3072 MACs/voxel) + the 192->1 reconstruction
        c24 = count_macs(GeneratorConfig.from_annotation("b2u4", growth=16))
        assert c24 == 864 + 2 * (224 * 432) + 96 * 32 + 192

    def test_doubling_units_increases_macs(self):
        assert (count_macs(GeneratorConfig(1, 8, growth=8))
                > count_macs(GeneratorConfig(1, 4, growth=8)))

    def test_reference_voxels_multiplier(self):
        cfg = GeneratorConfig(1, 2, growth=4)
        assert count_macs(cfg, 1000) == 1000 * count_macs(cfg)


class TestGeneratorForward:
    def test_shape_preserved(self):
        for shape in [(2, 1, 16, 16, 16), (1, 1, 8, 9, 10)]:
            cfg = GeneratorConfig(2, 2, growth=4)
            model = build_generator(cfg, seed=1)
            out = generator_forward(model, Tensor(np.random.default_rng(0)
                                                  .standard_normal(shape)), "train")
            assert out.shape == shape

    def test_zero_params_output_is_recon_bias(self):
        cfg = GeneratorConfig(1, 2, growth=4)
        model = build_generator(cfg, seed=0)
        for name, t in model.params.items():
            t.data = np.zeros_like(t.data)
        model.params["recon.bias"].data = np.array([0.75])
        out = generator_forward(model, Tensor(np.random.default_rng(1)
                                              .standard_normal((1, 1, 6, 6, 6))), "train")
        np.testing.assert_allclose(out.data, 0.75, atol=1e-12)

    def test_same_seed_bit_identical(self):
        cfg = GeneratorConfig(2, 2, growth=4)
        a = build_generator(cfg, seed=42)
        b = build_generator(cfg, seed=42)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_channel_mismatch(self):
        model = build_generator(GeneratorConfig(1, 1, growth=2), seed=0)
        with pytest.raises(ShapeError):
            generator_forward(model, Tensor(np.zeros((1, 2, 8, 8, 8))), "train")

    def test_micro_case_matches_hand_composition(self):
        """b1u1 k1 with hand-set weights against a manual numpy composition."""
        cfg = GeneratorConfig(1, 1, growth=1, unit_norm="batch_norm",
                              activation="elu")
        model = build_generator(cfg, seed=0)
        rng = np.random.default_rng(99)
        for name, t in model.params.items():
            t.data = rng.standard_normal(t.shape) * 0.5
        x = rng.standard_normal((1, 1, 3, 3, 3))
        got = generator_forward(model, Tensor(x), "train").data

        p = {k: v.data for k, v in model.params.items()}
        feats = naive_conv3d(x, p["initial.weight"], p["initial.bias"])  # 1 -> 2
        mu = feats.mean(axis=(0, 2, 3, 4), keepdims=True)
        var = feats.var(axis=(0, 2, 3, 4), keepdims=True)
        norm = (feats - mu) / np.sqrt(var + 1e-5)
        norm = (norm * p["block1.unit1.norm.gain"].reshape(1, 2, 1, 1, 1)
                + p["block1.unit1.norm.bias"].reshape(1, 2, 1, 1, 1))
        act = np.where(norm > 0, norm, np.expm1(norm))
        g1 = naive_conv3d(act, p["block1.unit1.conv.weight"],
                          p["block1.unit1.conv.bias"])  # 2 -> 1
        block = np.concatenate([feats, g1], axis=1)  # 3 channels
        want = naive_conv3d(block, p["recon.weight"], p["recon.bias"])
        np.testing.assert_allclose(got, want, atol=1e-12)

    def test_gradients_flow_to_every_parameter(self):
        cfg = GeneratorConfig(2, 2, growth=4)
        model = build_generator(cfg, seed=3)
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 1, 8, 8, 8)))
        hr = Tensor(rng.standard_normal((2, 1, 8, 8, 8)))
        grads = backward(l1_loss(generator_forward(model, x, "train"), hr))
        for name, p in model.params.items():
            g = grads[p].data
            assert np.all(np.isfinite(g)), name
        assert np.linalg.norm(grads[model.params["initial.weight"]].data) > 0

    def test_receptive_radius(self):
        assert generator_receptive_radius(GeneratorConfig(1, 2, growth=4)) == 3
        assert generator_receptive_radius(GeneratorConfig(4, 4, growth=16)) == 17

    def test_global_residual_adds_input_and_no_parameters(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal((1, 1, 8, 8, 8))
        plain_cfg = GeneratorConfig(1, 2, growth=4, global_residual=False)
        res_cfg = GeneratorConfig(1, 2, growth=4, global_residual=True)
        assert count_parameters(plain_cfg) == count_parameters(res_cfg)
        plain = build_generator(plain_cfg, seed=4)
        res = build_generator(res_cfg, seed=4)
        out_plain = generator_forward(plain, Tensor(x), "train").data
        out_res = generator_forward(res, Tensor(x), "train").data
        np.testing.assert_allclose(out_res, out_plain + x, atol=1e-12)


class TestDiscriminator:
    def _tiny(self):
        return DiscriminatorConfig(base_width=4, stages=2, head_width=8,
                                   input_size=16)

    def test_scalar_per_item(self):
        model = build_discriminator(self._tiny(), seed=0)
        out = discriminator_forward(
            model, Tensor(np.random.default_rng(0).standard_normal((3, 1, 16, 16, 16))))
        assert out.shape == (3,)

    def test_zero_params_zero_scores(self):
        model = build_discriminator(self._tiny(), seed=0)
        for t in model.params.values():
            t.data = np.zeros_like(t.data)
        out = discriminator_forward(model, Tensor(np.ones((2, 1, 16, 16, 16))))
        np.testing.assert_array_equal(out.data, [0.0, 0.0])

    def test_first_conv_has_no_norm(self):
        model = build_discriminator(self._tiny(), seed=0)
        assert "stage1.conv_a.norm.gain" not in model.params
        assert "stage2.conv_a.norm.gain" in model.params
        assert "stage1.conv_b.norm.gain" in model.params

    def test_deterministic(self):
        a = build_discriminator(self._tiny(), seed=9)
        b = build_discriminator(self._tiny(), seed=9)
        for name in a.params:
            np.testing.assert_array_equal(a.params[name].data, b.params[name].data)

    def test_wrong_spatial_raises(self):
        model = build_discriminator(self._tiny(), seed=0)
        with pytest.raises(ShapeError, match="built for"):
            discriminator_forward(model, Tensor(np.zeros((1, 1, 8, 8, 8))))

    def test_input_too_small_for_stride_stack(self):
        with pytest.raises(ValueError, match="too small"):
            DiscriminatorConfig(base_width=4, stages=4, input_size=8)


class TestSummary:
    def test_totals_consistent(self):
        cfg = GeneratorConfig.from_annotation("b4u4", growth=16)
        s = summarize(cfg)
        assert s.parameter_count == 408_929
        assert sum(r.params for r in s.rows) == s.parameter_count
        assert sum(r.macs for r in s.rows) == s.macs_per_output_voxel

    def test_render_header(self):
        cfg = GeneratorConfig.from_annotation("b2u4", growth=16)
        text = render_summary(summarize(cfg))
        assert text.splitlines()[0] == "mDCSRN b2u4"

    def test_csv_columns(self):
        cfg = GeneratorConfig(1, 1, growth=2)
        lines = summary_csv(summarize(cfg)).splitlines()
        assert lines[0] == "layer,name,out_channels,params,macs"
        assert len(lines) == 1 + len(summarize(cfg).rows)


class TestCheckpoints:
    def test_round_trip_float64(self, tmp_path):
        cfg = GeneratorConfig(2, 2, growth=4)
        model = build_generator(cfg, seed=5)
        # populate running stats so buffers are exercised
        generator_forward(model, Tensor(np.random.default_rng(0)
                                        .standard_normal((2, 1, 8, 8, 8))), "train")
        path = tmp_path / "gen.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.config == cfg
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name].data,
                                          model.params[name].data)
        for name, state in model.states.items():
            assert loaded.states[name].initialized == state.initialized
            np.testing.assert_array_equal(loaded.states[name].mean, state.mean)
            np.testing.assert_array_equal(loaded.states[name].var, state.var)

    def test_round_trip_float32(self, tmp_path):
        cfg = DiscriminatorConfig(base_width=2, stages=1, head_width=4, input_size=4)
        model = build_discriminator(cfg, seed=1, dtype=np.float32)
        path = tmp_path / "critic.ckpt"
        save_checkpoint(path, model)
        loaded = load_checkpoint(path)
        assert loaded.dtype == np.float32
        for name in model.params:
            np.testing.assert_array_equal(loaded.params[name].data,
                                          model.params[name].data)

    def test_checksum_detects_corruption(self, tmp_path):
        model = build_generator(GeneratorConfig(1, 1, growth=2), seed=0)
        path = tmp_path / "gen.ckpt"
        save_checkpoint(path, model)
        blob = bytearray(path.read_bytes())
        blob[-3] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(CheckpointError, match="checksum"):
            load_checkpoint(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "not.ckpt"
        path.write_bytes(b"garbage")
        with pytest.raises(CheckpointError, match="magic"):
            load_checkpoint(path)
