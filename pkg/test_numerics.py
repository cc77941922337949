import gc

import numpy as np
import pytest
from pydantic import ValidationError

from errors import NumericsError
from numerics import (
    METER,
    MemoryMeter,
    NumericFormat,
    PrecisionPolicy,
    diag_product_specnorm,
    max_finite,
    max_relative_deviation,
    memory_meter,
    on_grid,
    quantize,
    quantize_array,
    sigmoid,
    silu,
    softplus,
    tensor,
)

FP16, BF16, FP32, FP64 = NumericFormat.FP16, NumericFormat.BF16, NumericFormat.FP32, NumericFormat.FP64


# -----------------------
# quantize
# -----------------------
def test_bf16_ties_round_to_even():
    assert quantize(1.0 + 2.0 ** -8, BF16) == 1.0
    assert quantize(1.0 + 3 * 2.0 ** -8, BF16) == 1.0 + 2.0 ** -6


def test_fp32_matches_native_float32(rng):
    x = rng.standard_normal(10_000) * 10.0 ** rng.integers(-20, 20, size=10_000)
    expected = x.astype(np.float32).astype(np.float64)
    np.testing.assert_array_equal(quantize_array(x, FP32), expected)


def test_fp16_matches_native_float16(rng):
    x = rng.standard_normal(10_000) * 100.0
    expected = x.astype(np.float16).astype(np.float64)
    np.testing.assert_array_equal(quantize_array(x, FP16), expected)


def test_fp16_overflow_saturates_to_inf():
    assert max_finite(FP16) == 65504.0
    assert quantize(65519.0, FP16) == 65504.0
    assert quantize(65520.0, FP16) == np.inf
    assert quantize(-1e6, FP16) == -np.inf


def test_fp16_subnormals():
    assert quantize(2.0 ** -25, FP16) == 0.0
    assert quantize(3 * 2.0 ** -25, FP16) == 2.0 ** -23
    assert quantize(2.0 ** -24, FP16) == 2.0 ** -24


def test_fp64_is_identity(rng):
    x = rng.standard_normal(100)
    np.testing.assert_array_equal(quantize_array(x, FP64), x)


@pytest.mark.parametrize("fmt", [FP16, BF16, FP32])
def test_quantize_idempotent_and_monotone(fmt, rng):
    x = np.sort(rng.standard_normal(5_000) * 50.0)
    q = quantize_array(x, fmt)
    np.testing.assert_array_equal(quantize_array(q, fmt), q)
    assert np.all(np.diff(q) >= 0)
    assert on_grid(q, fmt)


@pytest.mark.parametrize("fmt,bound", [(BF16, 2.0 ** -8), (FP16, 2.0 ** -11)])
def test_relative_error_bound(fmt, bound, rng):
    x = rng.uniform(1e-3, 1e3, size=5_000) * rng.choice([-1.0, 1.0], size=5_000)
    q = quantize_array(x, fmt)
    assert np.all(np.abs(q - x) <= bound * np.abs(x))


def test_nan_propagates():
    assert np.isnan(quantize(float("nan"), BF16))


# -----------------------
# activations
# -----------------------
def test_softplus_values():
    assert softplus(0.0) == pytest.approx(np.log(2.0))
    assert softplus(1000.0) == 1000.0
    assert softplus(-40.0) > 0.0
    xs = np.linspace(-50, 50, 1001)
    ys = softplus(xs)
    assert np.all(ys > 0)
    assert np.all(np.diff(ys) > 0)


def test_softplus_continuous_at_threshold():
    assert softplus(30.0 - 1e-9) == pytest.approx(softplus(30.0 + 1e-9), rel=1e-12)


def test_sigmoid_and_silu():
    assert sigmoid(0.0) == 0.5
    assert np.all(np.isfinite(sigmoid(np.array([-1000.0, 1000.0]))))
    assert silu(0.0) == 0.0
    assert silu(10.0) == pytest.approx(10.0 * sigmoid(10.0))


# -----------------------
# diag_product_specnorm / deviation
# -----------------------
def test_diag_product_specnorm_example():
    assert diag_product_specnorm([(0.5, 2.0), (0.5, 0.1)]) == pytest.approx(0.25)


def test_diag_product_specnorm_matches_dense(rng):
    diags = rng.standard_normal((4, 3))
    dense = np.eye(3)
    for v in diags:
        dense = dense @ np.diag(v)
    assert diag_product_specnorm(diags) == pytest.approx(np.linalg.norm(dense, 2))


def test_diag_product_specnorm_zero_and_empty():
    assert diag_product_specnorm([(1.0, 2.0), (0.0, 0.0)]) == 0.0
    with pytest.raises(NumericsError, match="empty product"):
        diag_product_specnorm([])


def test_max_relative_deviation():
    assert max_relative_deviation([1.0, 2.0], [1.0, 2.0]) == 0.0
    assert max_relative_deviation([1.0, 2.2], [1.0, 2.0]) == pytest.approx(0.1)


# -----------------------
# policy
# -----------------------
def test_policy_presets():
    bf16 = PrecisionPolicy.named("bf16")
    assert bf16.activation_format is BF16
    assert bf16.gradient_format is BF16
    assert bf16.master_format is FP32
    assert PrecisionPolicy.named("fp64") == PrecisionPolicy()
    with pytest.raises(NumericsError):
        PrecisionPolicy.named("int8")


def test_policy_master_must_be_wide():
    with pytest.raises(ValidationError):
        PrecisionPolicy(master_format=FP16)


# -----------------------
# memory accounting
# -----------------------
def test_meter_peak_after_tensor():
    METER.reset()
    t = tensor(np.zeros((100, 10)), FP64)
    assert memory_meter() >= 8000
    assert t.nbytes == 8000
    assert not t.data.flags.writeable


def test_meter_counts_format_width_and_releases():
    meter = MemoryMeter()
    arr = meter.track(np.zeros(100), FP16)
    assert meter.live_bytes == 200
    assert meter.peak_bytes == 200
    del arr
    gc.collect()
    assert meter.live_bytes == 0
    assert meter.peak_bytes == 200
    meter.reset()
    assert meter.peak_bytes == 0


def test_tensor_cast_lands_on_grid(rng):
    t = tensor(rng.standard_normal(50), FP32).cast(BF16)
    assert t.fmt is BF16
    assert t.on_grid()
    assert t.shape == (50,)
