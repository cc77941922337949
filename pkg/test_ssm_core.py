import numpy as np
import pytest

from errors import ScanError, ShapeError
from numerics import NumericFormat, PrecisionPolicy, max_relative_deviation, on_grid
from ssm_core import (
    BufferMode,
    FusedBuffer,
    MambaParams,
    ScanElement,
    ScanElements,
    compose,
    discretize,
    mamba_backward,
    mamba_forward,
    random_params,
    scan_parallel,
    scan_sequential,
)


def _elements(rng, T, d, low=0.0, high=1.0):
    return ScanElements(rng.uniform(low, high, size=(T, d)), rng.standard_normal((T, d)))


def _unit_params(d=1):
    return MambaParams(
        A_log=np.zeros(d),
        fused=FusedBuffer(BufferMode.INPUT_PROJECTED, np.zeros((d, 3 * d))),
        delta_bias=np.zeros(d),
        T_max=8,
    )


# -----------------------
# discretize
# -----------------------
def test_discretize_hand_example():
    a, bcoef = discretize(_unit_params(), np.zeros(1), np.ones(1))
    assert a[0] == pytest.approx(0.5)
    assert bcoef[0] == pytest.approx(0.5)


def test_discretize_zero_step_limit():
    a, bcoef = discretize(_unit_params(), np.array([-40.0]), np.array([3.0]))
    assert abs(a[0] - 1.0) < 1e-15
    assert abs(bcoef[0]) < 1e-15 * 3.0


def test_discretize_large_step_limit():
    params = MambaParams(
        A_log=np.array([0.7, -0.3]),
        fused=FusedBuffer(BufferMode.INPUT_PROJECTED, np.zeros((2, 6))),
        delta_bias=np.zeros(2),
        T_max=4,
    )
    B = np.array([2.0, -1.0])
    a, bcoef = discretize(params, np.array([1000.0, 1000.0]), B)
    np.testing.assert_allclose(a, 0.0, atol=1e-300)
    np.testing.assert_allclose(bcoef, B * np.exp(-params.A_log), rtol=1e-12)


# -----------------------
# scans
# -----------------------
def test_scan_memoryless_and_counter():
    b = np.arange(12, dtype=float).reshape(6, 2)
    np.testing.assert_array_equal(scan_sequential(ScanElements(np.zeros((6, 2)), b), np.ones(2)), b)

    counter = scan_sequential(ScanElements(np.ones((5, 1)), np.ones((5, 1))), np.zeros(1))
    np.testing.assert_array_equal(counter[:, 0], [1, 2, 3, 4, 5])


def test_scan_matches_unrolled_sum(rng):
    elems = _elements(rng, 4, 2)
    x0 = rng.standard_normal(2)
    states = scan_sequential(elems, x0)
    for t in range(4):
        expected = np.prod(elems.a[:t + 1], axis=0) * x0
        for s in range(t + 1):
            expected = expected + np.prod(elems.a[s + 1:t + 1], axis=0) * elems.b[s]
        np.testing.assert_allclose(states[t], expected, rtol=1e-13)


def test_scan_accepts_element_list(rng):
    elems = _elements(rng, 3, 2)
    as_list = [elems[t] for t in range(3)]
    np.testing.assert_array_equal(scan_sequential(as_list, np.zeros(2)), scan_sequential(elems, np.zeros(2)))


def test_empty_sequence_rejected():
    with pytest.raises(ScanError, match="empty sequence"):
        scan_sequential([], np.zeros(2))
    with pytest.raises(ScanError, match="empty sequence"):
        scan_parallel([], np.zeros(2))


@pytest.mark.parametrize("T", [1, 2, 3, 17, 1024])
@pytest.mark.parametrize("chunk", [1, 3, 256])
def test_parallel_matches_sequential_fp64(T, chunk, rng):
    for _ in range(5):
        elems = _elements(rng, T, 4)
        x0 = rng.standard_normal(4)
        reference = scan_sequential(elems, x0)
        assert max_relative_deviation(scan_parallel(elems, x0, chunk=chunk), reference) < 1e-10


def test_parallel_matches_sequential_fp32(rng):
    fmt = NumericFormat.FP32
    elems = _elements(rng, 1024, 4, low=0.5)
    x0 = rng.standard_normal(4)
    reference = scan_sequential(elems, x0, fmt)
    assert max_relative_deviation(scan_parallel(elems, x0, chunk=64, fmt=fmt), reference) < 1e-4


def test_parallel_result_independent_of_workers(rng):
    elems = _elements(rng, 1000, 8)
    x0 = rng.standard_normal(8)
    single = scan_parallel(elems, x0, chunk=64, workers=1)
    for workers in (2, 4, 8):
        np.testing.assert_array_equal(scan_parallel(elems, x0, chunk=64, workers=workers), single)


@pytest.mark.slow
def test_parallel_matches_sequential_long(rng):
    for _ in range(50):
        elems = _elements(rng, 4096, 16)
        x0 = rng.standard_normal(16)
        reference = scan_sequential(elems, x0)
        assert max_relative_deviation(scan_parallel(elems, x0, chunk=256, workers=4), reference) < 1e-10


def test_compose_is_associative(rng):
    e1, e2, e3 = (ScanElement(rng.uniform(size=3), rng.standard_normal(3)) for _ in range(3))
    left = compose(compose(e1, e2), e3)
    right = compose(e1, compose(e2, e3))
    np.testing.assert_allclose(left.a, right.a, rtol=1e-15)
    np.testing.assert_allclose(left.b, right.b, rtol=1e-14, atol=1e-15)


def test_scan_is_linear_in_b_and_x0(rng):
    a = rng.uniform(size=(20, 3))
    b1, b2 = rng.standard_normal((20, 3)), rng.standard_normal((20, 3))
    z1, z2 = rng.standard_normal(3), rng.standard_normal(3)
    alpha, beta = 0.3, -1.7
    combined = scan_sequential(ScanElements(a, alpha * b1 + beta * b2), alpha * z1 + beta * z2)
    split = alpha * scan_sequential(ScanElements(a, b1), z1) + beta * scan_sequential(ScanElements(a, b2), z2)
    np.testing.assert_allclose(combined, split, rtol=1e-12, atol=1e-12)


# -----------------------
# forward
# -----------------------
def test_forward_hand_example(half_decay_params):
    trace = mamba_forward(half_decay_params(2), np.ones((2, 1)))
    np.testing.assert_allclose(trace.states[:, 0], [0.5, 0.75], rtol=1e-12)
    np.testing.assert_allclose(trace.outputs[:, 0], [0.5, 0.75], rtol=1e-12)


def test_forward_rejects_long_sequence(half_decay_params):
    with pytest.raises(ShapeError, match="sequence exceeds buffer"):
        mamba_forward(half_decay_params(2), np.ones((3, 1)))


def test_forward_zero_readout(rng):
    params = random_params(4, 16, BufferMode.INPUT_PROJECTED, seed=3)
    W = params.fused.W.copy()
    W[:, 8:] = 0.0
    trace = mamba_forward(params.with_weight(W), rng.standard_normal((16, 4)))
    assert not np.any(trace.outputs)


def test_forward_is_deterministic(small_params, rng):
    u = rng.standard_normal((5, 3))
    first = mamba_forward(small_params, u)
    second = mamba_forward(small_params, u)
    np.testing.assert_array_equal(first.outputs, second.outputs)


def test_decay_in_unit_interval(mode):
    for seed in range(300):
        params = random_params(4, 32, mode, seed=seed, gate_enabled=seed % 2 == 0)
        u = np.random.default_rng(seed).standard_normal((32, 4))
        a = mamba_forward(params, u).a
        assert np.all(a > 0.0) and np.all(a <= 1.0)


@pytest.mark.parametrize("name", ["bf16", "fp16", "fp32"])
def test_activations_on_policy_grid(name, mode, rng):
    policy = PrecisionPolicy.named(name)
    params = random_params(4, 24, mode, seed=11, gate_enabled=True)
    trace = mamba_forward(params, rng.standard_normal((24, 4)), policy=policy)
    for label, value in trace.activations().items():
        assert on_grid(value, policy.activation_format), label


def test_forward_parallel_scan_option(small_params, rng):
    u = rng.standard_normal((5, 3))
    np.testing.assert_allclose(
        mamba_forward(small_params, u, chunk=2, workers=2).states,
        mamba_forward(small_params, u).states,
        rtol=1e-12,
    )


# -----------------------
# backward
# -----------------------
def _loss(params, u, x0, g):
    return float(np.sum(g * mamba_forward(params, u, x0).outputs))


def _fd(fn, value, h=1e-5):
    grad = np.zeros_like(value)
    for idx in np.ndindex(value.shape):
        plus, minus = value.copy(), value.copy()
        plus[idx] += h
        minus[idx] -= h
        grad[idx] = (fn(plus) - fn(minus)) / (2 * h)
    return grad


@pytest.mark.parametrize("gate", [False, True], ids=["plain", "gated"])
def test_backward_matches_finite_differences(mode, gate):
    for seed in range(5):
        T, d = 5, 3
        params = random_params(d, T, mode, seed=seed, gate_enabled=gate)
        rng = np.random.default_rng(100 + seed)
        u = rng.standard_normal((T, d))
        x0 = rng.standard_normal(d)
        g = rng.standard_normal((T, d))

        grads = mamba_backward(params, mamba_forward(params, u, x0), g)
        checks = {
            "A_log": (grads.A_log, lambda v: _loss(params.replace(A_log=v), u, x0, g), params.A_log),
            "W": (grads.W, lambda v: _loss(params.with_weight(v), u, x0, g), params.fused.W),
            "delta_bias": (grads.delta_bias, lambda v: _loss(params.replace(delta_bias=v), u, x0, g), params.delta_bias),
            "x0": (grads.x0, lambda v: _loss(params, u, v, g), x0),
            "u": (grads.u, lambda v: _loss(params, v, x0, g), u),
        }
        if gate:
            checks["gate_weight"] = (
                grads.gate_weight,
                lambda v: _loss(params.replace(gate_weight=v), u, x0, g),
                params.gate_weight,
            )
        for name, (analytic, fn, value) in checks.items():
            np.testing.assert_allclose(analytic, _fd(fn, value), rtol=1e-6, atol=1e-8, err_msg=name)


def test_backward_zero_cotangent(small_params, rng):
    trace = mamba_forward(small_params, rng.standard_normal((5, 3)))
    grads = mamba_backward(small_params, trace, np.zeros((5, 3)))
    for name, value in grads.named().items():
        assert not np.any(value), name


def test_backward_severed_state(half_decay_params):
    params = half_decay_params(4)
    W = params.fused.W.copy()
    W[:, 0] = 1000.0
    params = params.with_weight(W)
    trace = mamba_forward(params, np.ones((4, 1)), np.ones(1))
    grads = mamba_backward(params, trace, np.ones((4, 1)))
    assert grads.x0[0] == 0.0


def test_backward_shape_mismatch(small_params, rng):
    trace = mamba_forward(small_params, rng.standard_normal((5, 3)))
    with pytest.raises(ShapeError):
        mamba_backward(small_params, trace, np.zeros((4, 3)))


@pytest.mark.slow
def test_backward_many_instances(mode):
    for seed in range(100):
        rng = np.random.default_rng(seed)
        T, d = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        params = random_params(d, T, mode, seed=seed, gate_enabled=bool(seed % 2))
        u = rng.standard_normal((T, d))
        x0 = rng.standard_normal(d)
        g = rng.standard_normal((T, d))
        grads = mamba_backward(params, mamba_forward(params, u, x0), g)
        fd = _fd(lambda v: _loss(params.with_weight(v), u, x0, g), params.fused.W)
        np.testing.assert_allclose(grads.W, fd, rtol=1e-6, atol=1e-8)
