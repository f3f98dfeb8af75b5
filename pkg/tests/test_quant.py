import numpy as np
import pytest

from quantcomp.quant import (
    DEGENERATE_SCALE,
    Log2Params,
    QuantError,
    QuantParams,
    RangeEstimator,
    code_dtype,
    compute_affine_params,
    dequantize,
    dequantize_log2,
    params_from_manifest,
    params_to_manifest,
    quantize_log2,
    quantize_uniform,
    quantize_weights_per_channel,
    tensor_params,
)


class TestAffineParams:
    def test_full_byte_range(self):
        x = np.array([0.0, 255.0])
        s, z = compute_affine_params(x, 8)
        assert s == 1.0 and z == 0

    def test_two_bit_symmetric_range(self):
        # range [-1, 1], b=2: s = 2/3, z = round(1.5) = 2 under half-to-even
        s, z = compute_affine_params(np.array([-1.0, 1.0]), 2)
        assert np.isclose(s, 2.0 / 3.0)
        assert z == 2

    def test_constant_tensor_degenerate_floor(self):
        s, z = compute_affine_params(np.full(10, 3.25), 8)
        assert s == DEGENERATE_SCALE
        assert z == 0  # -3.25 / tiny clips at the bottom

    def test_constant_negative(self):
        s, z = compute_affine_params(np.full(10, -3.25), 4)
        assert s == DEGENERATE_SCALE and z == 15

    def test_empty_and_narrow_errors(self):
        with pytest.raises(QuantError):
            compute_affine_params(np.array([]), 8)
        with pytest.raises(QuantError):
            compute_affine_params(np.array([1.0]), 1)

    def test_percentile_equals_minmax_at_one(self):
        x = np.random.default_rng(0).standard_normal(500)
        assert compute_affine_params(x, 8, RangeEstimator("percentile", 1.0)) == compute_affine_params(x, 8)

    def test_percentile_clips_outliers(self):
        x = np.concatenate([np.random.default_rng(1).uniform(-1, 1, 1000), [50.0]])
        s_p, _ = compute_affine_params(x, 8, RangeEstimator("percentile", 0.99))
        s_m, _ = compute_affine_params(x, 8)
        assert s_p < s_m / 10

    def test_percentile_validation(self):
        with pytest.raises(QuantError):
            RangeEstimator("percentile", 0.4)
        with pytest.raises(QuantError):
            RangeEstimator("median")


class TestQuantizeDequantize:
    def test_half_point_rounds_even(self):
        p = QuantParams(8, "per_tensor", [1.0 / 255.0], [0])
        assert quantize_uniform(np.array([0.5]), p)[0] == 128

    def test_min_maps_to_zero_any_bits(self):
        rng = np.random.default_rng(2)
        for b in (2, 4, 8):
            x = rng.uniform(-3, 5, 100)
            p = tensor_params(x, b)
            assert quantize_uniform(np.array([x.min()]), p)[0] == 0

    def test_clip_saturates(self):
        p = tensor_params(np.array([0.0, 1.0]), 4)
        assert quantize_uniform(np.array([99.0]), p)[0] == 15
        assert quantize_uniform(np.array([-99.0]), p)[0] == 0

    def test_zero_point_dequantizes_to_zero(self):
        p = tensor_params(np.array([-2.0, 2.0]), 8)
        _, z = p.scalar()
        assert dequantize(np.array([z]), p)[0] == 0.0

    def test_named_dequant_value(self):
        p = QuantParams(8, "per_tensor", [1.0 / 255.0], [0])
        assert np.isclose(dequantize(np.array([128]), p)[0], 128.0 / 255.0)

    def test_roundtrip_error_bound(self):
        rng = np.random.default_rng(3)
        for b in (2, 4, 8):
            x = rng.uniform(-1.5, 2.5, 1000)
            p = tensor_params(x, b)
            s, _ = p.scalar()
            err = np.abs(x - dequantize(quantize_uniform(x, p), p))
            assert err.max() <= s / 2 + 1e-6

    def test_monotonicity(self):
        rng = np.random.default_rng(4)
        x = np.sort(rng.uniform(-4, 4, 400))
        p = tensor_params(x, 4)
        q = quantize_uniform(x, p).astype(np.int64)
        assert np.all(np.diff(q) >= 0)

    def test_grid_exactness(self):
        p = tensor_params(np.array([-1.0, 1.0]), 6)
        s, z = p.scalar()
        codes = np.arange(1, 2**6 - 1)
        x = (codes - z) * np.float32(s)
        assert np.array_equal(quantize_uniform(x, p).astype(np.int64), codes)

    def test_output_dtype_narrowest(self):
        assert code_dtype(8) == np.dtype("u1")
        assert code_dtype(4) == np.dtype("u1")
        assert code_dtype(12) == np.dtype("<u2")
        p = tensor_params(np.array([0.0, 1.0]), 12)
        assert quantize_uniform(np.array([0.5]), p).dtype == np.dtype("<u2")

    def test_scheme_shape_mismatch(self):
        p = QuantParams(8, "per_channel", [1.0, 1.0], [0, 0])
        with pytest.raises(QuantError):
            quantize_uniform(np.zeros((3, 4)), p)


class TestPerChannelWeights:
    def test_distinct_ranges_get_distinct_scales(self):
        w = np.stack([np.linspace(-0.5, 0.5, 8), np.linspace(-10, 30, 8)])
        codes, p = quantize_weights_per_channel(w, 8)
        assert p.scales[0] != p.scales[1]
        assert codes[0, 0] == 0 and codes[1, 0] == 0  # each channel min -> 0

    def test_identical_channels_identical_params(self):
        row = np.linspace(-2, 3, 10)
        codes, p = quantize_weights_per_channel(np.stack([row, row]), 4)
        assert p.scales[0] == p.scales[1] and p.zero_points[0] == p.zero_points[1]
        assert np.array_equal(codes[0], codes[1])

    def test_per_channel_beats_per_tensor_mse(self):
        # brute-force oracle: reconstruct under both schemes and compare MSE
        rng = np.random.default_rng(5)
        w = rng.standard_normal((4, 8)) * np.array([[0.1], [1.0], [5.0], [0.5]])
        codes_c, pc = quantize_weights_per_channel(w, 4)
        recon_c = dequantize(codes_c, pc)
        pt = tensor_params(w, 4)
        recon_t = dequantize(quantize_uniform(w, pt), pt)
        assert np.mean((w - recon_c) ** 2) <= np.mean((w - recon_t) ** 2)

    def test_conv_weights_channel_axis(self):
        rng = np.random.default_rng(6)
        w = rng.standard_normal((3, 2, 3, 3))
        codes, p = quantize_weights_per_channel(w, 8)
        assert codes.shape == w.shape and len(p.scales) == 3

    def test_needs_leading_channel_dim(self):
        with pytest.raises(QuantError):
            quantize_weights_per_channel(np.zeros(4), 8)


class TestLog2:
    def test_max_is_code_zero_exact(self):
        x = np.array([4.0, 2.0, 1.0])
        codes, p = quantize_log2(x, 4)
        assert codes[0] == 0
        assert dequantize_log2(codes, p)[0] == 4.0

    def test_half_max_is_code_one_exact(self):
        x = np.array([4.0, 2.0])
        codes, p = quantize_log2(x, 4)
        assert codes[1] == 1
        assert dequantize_log2(codes, p)[1] == 2.0

    def test_signs_and_zeros(self):
        x = np.array([-4.0, 0.0, 4.0])
        codes, p = quantize_log2(x, 3)
        recon = dequantize_log2(codes, p)
        assert recon[0] == -4.0 and recon[1] == 0.0 and recon[2] == 4.0

    def test_within_one_octave(self):
        rng = np.random.default_rng(7)
        x = rng.uniform(0.01, 1.0, 300)
        codes, p = quantize_log2(x, 8)
        recon = dequantize_log2(codes, p)
        ratio = recon / x
        assert np.all(ratio <= np.sqrt(2) + 1e-9) and np.all(ratio >= 1 / np.sqrt(2) - 1e-9)

    def test_all_zero_rejected(self):
        with pytest.raises(QuantError):
            quantize_log2(np.zeros(5), 4)


class TestManifestRoundTrip:
    def test_params_roundtrip(self):
        p = QuantParams(4, "per_channel", np.array([0.1, 0.3], dtype=np.float32), np.array([1, 7]))
        q = params_from_manifest(params_to_manifest(p))
        assert np.array_equal(p.scales, q.scales) and np.array_equal(p.zero_points, q.zero_points)
        assert p.bitwidth == q.bitwidth and p.scheme == q.scheme
