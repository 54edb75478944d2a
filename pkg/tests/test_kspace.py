"""Fourier transforms, k-space truncation, LR simulation, resampling."""

import numpy as np
import pytest

from voxelsr.kspace import (
    Spectrum, band_energy_above_cutoff, dft3, direct_dft3, idft3, lr_simulate,
    resample, truncate_kspace,
)
from voxelsr.volumes import Volume, VolumeError, synth_phantom


def rand_volume(shape, seed=0):
    return Volume(np.random.default_rng(seed).standard_normal(shape))


class TestTransforms:
    def test_constant_volume_is_single_dc_bin(self):
        v = Volume(np.full((8, 8, 8), 2.5))
        spec = dft3(v, centered=True)
        dc = spec.values[4, 4, 4]
        assert abs(dc - 2.5 * 512) < 1e-9
        rest = spec.values.copy()
        rest[4, 4, 4] = 0
        assert np.max(np.abs(rest)) < 1e-9

    def test_round_trip(self):
        v = rand_volume((16, 16, 16), 1)
        out, residue = idft3(dft3(v))
        assert np.max(np.abs(out.values - v.values)) < 1e-10
        assert residue < 1e-10

    def test_parseval(self):
        v = rand_volume((16, 16, 16), 2)
        spec = dft3(v)
        space = float(np.sum(v.values ** 2))
        freq = spec.energy() / v.values.size
        assert abs(space - freq) / space < 1e-8

    def test_matches_direct_dft_oracle(self):
        for shape in [(8, 8, 8), (5, 6, 7)]:
            v = rand_volume(shape, 3)
            fast = dft3(v).values
            slow = direct_dft3(v).values
            assert np.max(np.abs(fast - slow)) < 1e-9

    def test_dc_bin_inverse(self):
        spec = np.zeros((8, 8, 8), dtype=np.complex128)
        spec[4, 4, 4] = 512.0
        out, residue = idft3(Spectrum(spec, centered=True))
        np.testing.assert_allclose(out.values, 1.0, atol=1e-12)
        assert residue < 1e-12

    def test_hermitian_spectrum_small_residue(self):
        v = rand_volume((12, 12, 12), 4)
        _, residue = idft3(dft3(v))
        assert residue < 1e-10


class TestTruncate:
    def test_identity_factors(self):
        v = rand_volume((16, 16, 16), 5)
        spec = dft3(v)
        out = truncate_kspace(spec, (1, 1, 1))
        np.testing.assert_array_equal(out.values, spec.values)

    def test_shape_arithmetic(self):
        spec = dft3(rand_volume((16, 16, 16), 6))
        assert truncate_kspace(spec, (1, 2, 2)).shape == (16, 8, 8)
        assert truncate_kspace(spec, (2, 2, 2)).shape == (8, 8, 8)

    def test_odd_dims_ceil(self):
        spec = dft3(rand_volume((9, 9, 9), 6))
        assert truncate_kspace(spec, (2, 3, 9)).shape == (5, 3, 1)

    def test_constant_volume_roundtrip_with_normalization(self):
        v = Volume(np.full((16, 16, 16), 1.25))
        small_spec = truncate_kspace(dft3(v), (2, 2, 2))
        small, _ = idft3(small_spec)
        scale = small.values.size / v.values.size
        np.testing.assert_allclose(small.values * scale, 1.25, atol=1e-10)

    def test_factor_exceeding_dim_raises(self):
        with pytest.raises(VolumeError):
            truncate_kspace(dft3(rand_volume((8, 8, 8))), (9, 1, 1))

    def test_energy_non_increasing(self):
        spec = dft3(rand_volume((16, 16, 16), 7))
        for factors in [(1, 2, 2), (2, 2, 2), (1, 1, 4)]:
            assert truncate_kspace(spec, factors).energy() <= spec.energy() + 1e-9

    def test_real_output_after_truncation(self):
        v = rand_volume((16, 16, 16), 8)
        _, residue = idft3(truncate_kspace(dft3(v), (1, 2, 2)))
        assert residue < 1e-10 * float(np.abs(v.values).max())


class TestLrSimulate:
    def test_constant_fixed_point(self):
        v = Volume(np.full((16, 16, 16), 0.6))
        out = lr_simulate(v, (1, 2, 2))
        np.testing.assert_allclose(out.values, 0.6, atol=1e-6)

    def test_below_cutoff_cosine_survives(self):
        y = np.arange(64)
        v = Volume(np.broadcast_to(np.cos(2 * np.pi * 3 * y / 64)[None, :, None],
                                   (64, 64, 64)).copy())
        out = lr_simulate(v, (1, 2, 2), interp="linear")
        corr = np.corrcoef(v.values.ravel(), out.values.ravel())[0, 1]
        assert corr > 0.99

    def test_above_cutoff_cosine_removed(self):
        y = np.arange(64)
        v = Volume(np.broadcast_to(np.cos(2 * np.pi * 24 * y / 64)[None, :, None],
                                   (64, 64, 64)).copy())
        out = lr_simulate(v, (1, 2, 2), interp="linear")
        assert np.max(np.abs(out.values)) < 0.05 * np.max(np.abs(v.values))

    def test_shape_preserved(self):
        v = rand_volume((12, 16, 20), 9)
        assert lr_simulate(v, (1, 2, 2)).shape == (12, 16, 20)

    def test_projection_up_to_interpolation(self):
        v = Volume(synth_phantom((32, 32, 32), seed=3).values)
        once = lr_simulate(v, (1, 2, 2))
        twice = lr_simulate(once, (1, 2, 2))
        num = float(np.sum((twice.values - once.values) ** 2))
        den = float(np.sum(once.values ** 2))
        assert num / den < 0.01

    def test_real_in_real_out(self):
        v = rand_volume((16, 16, 16), 10)
        out = lr_simulate(v, (2, 2, 2))
        assert np.isrealobj(out.values)


class TestResample:
    def test_identity_for_all_kinds(self):
        v = rand_volume((6, 7, 8), 11)
        for kind in ("nearest", "linear", "cubic"):
            np.testing.assert_array_equal(resample(v, v.shape, kind).values,
                                          v.values)

    def test_nearest_upscale_pattern(self):
        v = Volume(np.broadcast_to(np.array([1.0, 2.0])[None, None, :],
                                   (1, 1, 2)).copy())
        out = resample(v, (1, 1, 4), kind="nearest")
        np.testing.assert_array_equal(out.values[0, 0], [1.0, 1.0, 2.0, 2.0])

    def test_linear_ramp_round_trip(self):
        ramp = np.broadcast_to(np.linspace(0, 1, 32)[:, None, None],
                               (32, 8, 8)).copy()
        v = Volume(ramp)
        down = resample(v, (16, 8, 8), kind="linear")
        up = resample(down, (32, 8, 8), kind="linear")
        interior = up.values[4:-4]
        np.testing.assert_allclose(interior, ramp[4:-4], atol=1e-6)

    def test_unknown_kind(self):
        with pytest.raises(VolumeError):
            resample(rand_volume((4, 4, 4)), (8, 8, 8), kind="sinc")

    def test_cubic_weights_sum_to_one(self):
        # partition of unity => constant volumes are preserved exactly
        v = Volume(np.full((8, 8, 8), 3.0))
        out = resample(v, (13, 17, 5), kind="cubic")
        np.testing.assert_allclose(out.values, 3.0, atol=1e-12)


class TestBaselines:
    def test_cubic_beats_linear_on_phantom(self):
        hr = synth_phantom((48, 48, 48), seed=12, recipe="blobs_plus_tubes")
        lin = lr_simulate(hr, (1, 2, 2), interp="linear")
        cub = lr_simulate(hr, (1, 2, 2), interp="cubic")

        def nrmse_of(test):
            err = np.sqrt(np.mean((hr.values - test.values) ** 2))
            return err / (hr.values.max() - hr.values.min())

        assert nrmse_of(lin) >= nrmse_of(cub)

    def test_tube_phantom_has_more_high_band_energy(self):
        # compared as a fraction of total spectral energy: the min-max
        # normalization rescales absolute energies between recipes
        smooth = synth_phantom((32, 32, 32), seed=5, recipe="smooth_blobs")
        tubes = synth_phantom((32, 32, 32), seed=5, recipe="blobs_plus_tubes")
        frac_smooth = band_energy_above_cutoff(smooth, (1, 2, 2)) / dft3(smooth).energy()
        frac_tubes = band_energy_above_cutoff(tubes, (1, 2, 2)) / dft3(tubes).energy()
        assert frac_tubes > frac_smooth
