# ============================================================
# Selective state-space block
# Discretization, scans, forward and reverse passes
# ============================================================

import dataclasses
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple, Union

import numpy as np

from errors import ScanError, ShapeError
from numerics import (
    FP64_POLICY,
    NumericFormat,
    PrecisionPolicy,
    quantize_array,
    sigmoid,
    silu,
    softplus,
    tracked,
)

logger = logging.getLogger(__name__)


class BufferMode(str, Enum):
    TIME_INDEXED = "time_indexed"
    INPUT_PROJECTED = "input_projected"


# ============================================================
# Parameter containers
# ============================================================

@dataclass(frozen=True)
class FusedBuffer:
    """
    Delta / B / C storage in one matrix with 3d columns.

    Columns [0, d) hold raw Delta, [d, 2d) the B diagonals, [2d, 3d) the C
    diagonals. TIME_INDEXED: row t-1 serves timestep t. INPUT_PROJECTED:
    the row for timestep t is u_t @ W.
    """

    mode: BufferMode
    W: np.ndarray

    @property
    def d(self) -> int:
        return self.W.shape[1] // 3

    def rows(self, v: np.ndarray) -> np.ndarray:
        T = v.shape[0]
        if self.mode is BufferMode.TIME_INDEXED:
            if T > self.W.shape[0]:
                raise ShapeError("sequence exceeds buffer")
            return self.W[:T]
        return v @ self.W

    def split(self, rows: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        d = self.d
        return rows[:, :d], rows[:, d:2 * d], rows[:, 2 * d:]


@dataclass(frozen=True)
class MambaParams:
    A_log: np.ndarray
    fused: FusedBuffer
    delta_bias: np.ndarray
    T_max: int
    gate_enabled: bool = False
    gate_weight: Optional[np.ndarray] = None

    def __post_init__(self):
        d = self.A_log.shape[0]
        if self.A_log.ndim != 1 or d < 1:
            raise ShapeError("A_log must be a non-empty vector")
        if self.fused.W.ndim != 2 or self.fused.W.shape[1] != 3 * d:
            raise ShapeError(f"fused buffer must have {3 * d} columns, got {self.fused.W.shape}")
        if self.fused.mode is BufferMode.TIME_INDEXED and self.fused.W.shape[0] != self.T_max:
            raise ShapeError("time-indexed buffer must have T_max rows")
        if self.fused.mode is BufferMode.INPUT_PROJECTED and self.fused.W.shape[0] != d:
            raise ShapeError("input-projected buffer must have d rows")
        if self.delta_bias.shape != (d,):
            raise ShapeError("delta_bias must have length d")
        if self.gate_weight is None:
            object.__setattr__(self, "gate_weight", np.zeros((d, d)))
        elif self.gate_weight.shape != (d, d):
            raise ShapeError("gate_weight must be d x d")

    @property
    def d(self) -> int:
        return int(self.A_log.shape[0])

    @property
    def A(self) -> np.ndarray:
        return -np.exp(self.A_log)

    @property
    def mode(self) -> BufferMode:
        return self.fused.mode

    def with_weight(self, W: np.ndarray) -> "MambaParams":
        return dataclasses.replace(self, fused=FusedBuffer(self.fused.mode, W))

    def replace(self, **changes) -> "MambaParams":
        return dataclasses.replace(self, **changes)


def random_params(
    d: int,
    T_max: int,
    mode: BufferMode = BufferMode.TIME_INDEXED,
    seed=0,
    gate_enabled: bool = False,
    weight_scale: float = 1.0,
) -> MambaParams:
    """Seeded valid draw: A_log ~ N(0,1), buffer ~ N(0, weight_scale^2)."""
    rng = np.random.default_rng(seed)
    A_log = rng.standard_normal(d)
    rows = T_max if mode is BufferMode.TIME_INDEXED else d
    scale = weight_scale if mode is BufferMode.TIME_INDEXED else weight_scale / np.sqrt(d)
    W = rng.standard_normal((rows, 3 * d)) * scale
    delta_bias = rng.standard_normal(d) * 0.5
    gate = rng.standard_normal((d, d)) / np.sqrt(d) if gate_enabled else None
    return MambaParams(
        A_log=A_log,
        fused=FusedBuffer(mode, W),
        delta_bias=delta_bias,
        T_max=T_max,
        gate_enabled=gate_enabled,
        gate_weight=gate,
    )


# ============================================================
# Discretization
# ============================================================

def discretize(params: MambaParams, delta_raw_t, B_diag_t) -> Tuple[np.ndarray, np.ndarray]:
    """
    Delta_bar = softplus(delta_raw + bias); a = exp(Delta_bar * A);
    bcoef = (a - 1) / A * B. Works per row or on whole T x d blocks.
    """
    A = params.A
    delta_bar = softplus(np.asarray(delta_raw_t, dtype=np.float64) + params.delta_bias)
    a = np.exp(delta_bar * A)
    bcoef = (a - 1.0) / A * np.asarray(B_diag_t, dtype=np.float64)
    return a, bcoef


# ============================================================
# Scans
# ============================================================

@dataclass(frozen=True)
class ScanElement:
    a: np.ndarray
    b: np.ndarray


@dataclass(frozen=True)
class ScanElements:
    """T scan elements stored column-stacked: a and b are T x d."""

    a: np.ndarray
    b: np.ndarray

    def __len__(self) -> int:
        return int(self.a.shape[0])

    def __getitem__(self, t: int) -> ScanElement:
        return ScanElement(self.a[t], self.b[t])

    @classmethod
    def stack(cls, elements: Union["ScanElements", Sequence[ScanElement]]) -> "ScanElements":
        if isinstance(elements, ScanElements):
            return elements
        if len(elements) == 0:
            return cls(np.zeros((0, 0)), np.zeros((0, 0)))
        return cls(
            np.asarray([e.a for e in elements], dtype=np.float64),
            np.asarray([e.b for e in elements], dtype=np.float64),
        )


def compose(first: ScanElement, second: ScanElement) -> ScanElement:
    """Apply `first` then `second`: (a1, b1) o (a2, b2) = (a1 a2, a2 b1 + b2)."""
    return ScanElement(first.a * second.a, second.a * first.b + second.b)


def _checked(elements, x0) -> Tuple[ScanElements, np.ndarray]:
    elems = ScanElements.stack(elements)
    if len(elems) == 0:
        raise ScanError("empty sequence")
    x0 = np.asarray(x0, dtype=np.float64)
    if elems.a.shape != elems.b.shape or elems.a.shape[1:] != x0.shape:
        raise ShapeError(f"scan shapes disagree: a{elems.a.shape} b{elems.b.shape} x0{x0.shape}")
    return elems, x0


def scan_sequential(elements, x0, fmt: NumericFormat = NumericFormat.FP64) -> np.ndarray:
    """Reference recurrence x_t = a_t * x_{t-1} + b_t."""
    elems, x = _checked(elements, x0)
    states = np.empty_like(elems.a)
    for t in range(len(elems)):
        x = elems.a[t] * x + elems.b[t]
        if fmt is not NumericFormat.FP64:
            x = quantize_array(x, fmt)
        states[t] = x
    return states


def _combine(a1, b1, a2, b2, fmt):
    a, b = a1 * a2, a2 * b1 + b2
    if fmt is not NumericFormat.FP64:
        a, b = quantize_array(a, fmt), quantize_array(b, fmt)
    return a, b


def _blelloch_exclusive(a: np.ndarray, b: np.ndarray, fmt) -> Tuple[np.ndarray, np.ndarray]:
    """Work-efficient exclusive scan (up-sweep then down-sweep) over the leading axis."""
    n = a.shape[0]
    size = 1
    while size < n:
        size *= 2
    sa = np.ones((size,) + a.shape[1:])
    sb = np.zeros((size,) + b.shape[1:])
    sa[:n], sb[:n] = a, b

    stride = 1
    while stride < size:
        right = np.arange(2 * stride - 1, size, 2 * stride)
        left = right - stride
        sa[right], sb[right] = _combine(sa[left], sb[left], sa[right], sb[right], fmt)
        stride *= 2

    sa[size - 1], sb[size - 1] = 1.0, 0.0
    stride = size // 2
    while stride >= 1:
        right = np.arange(2 * stride - 1, size, 2 * stride)
        left = right - stride
        left_a, left_b = sa[left].copy(), sb[left].copy()
        sa[left], sb[left] = sa[right], sb[right]
        sa[right], sb[right] = _combine(sa[right], sb[right], left_a, left_b, fmt)
        stride //= 2
    return sa[:n], sb[:n]


def _chunk_inclusive(a: np.ndarray, b: np.ndarray, fmt) -> Tuple[np.ndarray, np.ndarray]:
    ea, eb = _blelloch_exclusive(a, b, fmt)
    return _combine(ea, eb, a, b, fmt)


def scan_parallel(
    elements,
    x0,
    chunk: int = 256,
    workers: int = 1,
    fmt: NumericFormat = NumericFormat.FP64,
) -> np.ndarray:
    """
    Chunked prefix scan. Each chunk is scanned independently (optionally on a
    thread pool), chunk aggregates are combined with the same exclusive scan,
    and the carried-in state is applied per chunk. The combine order depends
    only on `chunk`, so results are identical for any worker count.
    """
    elems, x0 = _checked(elements, x0)
    if chunk < 1:
        raise ScanError("chunk must be positive")
    T = len(elems)
    spans = [(s, min(s + chunk, T)) for s in range(0, T, chunk)]

    def local(span):
        s, e = span
        return _chunk_inclusive(elems.a[s:e], elems.b[s:e], fmt)

    if workers > 1 and len(spans) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            partials = list(pool.map(local, spans))
    else:
        partials = [local(span) for span in spans]

    agg_a = np.stack([pa[-1] for pa, _ in partials])
    agg_b = np.stack([pb[-1] for _, pb in partials])
    carry_a, carry_b = _blelloch_exclusive(agg_a, agg_b, fmt)
    carries = carry_a * x0 + carry_b
    if fmt is not NumericFormat.FP64:
        carries = quantize_array(carries, fmt)

    states = np.empty_like(elems.a)
    for k, ((s, e), (pa, pb)) in enumerate(zip(spans, partials)):
        block = pa * carries[k] + pb
        states[s:e] = block if fmt is NumericFormat.FP64 else quantize_array(block, fmt)
    return states


# ============================================================
# Forward pass
# ============================================================

@dataclass(frozen=True)
class StateTrace:
    """Everything the forward pass produced; the reverse pass reads it back."""

    inputs: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    x0: np.ndarray
    scan_inputs: np.ndarray
    gate_pre: Optional[np.ndarray]
    rows: np.ndarray
    delta_bar: np.ndarray
    a: np.ndarray
    bcoef: np.ndarray
    fmt: NumericFormat

    def activations(self) -> dict:
        recorded = {
            "inputs": self.inputs,
            "scan_inputs": self.scan_inputs,
            "rows": self.rows,
            "delta_bar": self.delta_bar,
            "a": self.a,
            "bcoef": self.bcoef,
            "states": self.states,
            "outputs": self.outputs,
        }
        if self.gate_pre is not None:
            recorded["gate_pre"] = self.gate_pre
        return recorded


def mamba_forward(
    params: MambaParams,
    u,
    x0=None,
    policy: PrecisionPolicy = FP64_POLICY,
    chunk: Optional[int] = None,
    workers: int = 1,
) -> StateTrace:
    fmt = policy.activation_format

    def q(arr):
        return tracked(quantize_array(arr, fmt), fmt)

    u = np.asarray(u, dtype=np.float64)
    if u.ndim != 2 or u.shape[1] != params.d:
        raise ShapeError(f"input must be T x {params.d}, got {u.shape}")
    if params.mode is BufferMode.TIME_INDEXED and u.shape[0] > params.T_max:
        raise ShapeError("sequence exceeds buffer")
    x0 = np.zeros(params.d) if x0 is None else np.asarray(x0, dtype=np.float64)

    u = q(u)
    gate_pre = None
    if params.gate_enabled:
        gate_pre = q(u @ params.gate_weight.T)
        v = q(silu(gate_pre) * u)
    else:
        v = u

    rows = q(params.fused.rows(v))
    delta_raw, B_diag, C_diag = params.fused.split(rows)
    A = params.A
    delta_bar = q(softplus(delta_raw + params.delta_bias))
    a = q(np.exp(delta_bar * A))
    bcoef = q((a - 1.0) / A * B_diag)
    b = q(bcoef * v)

    elems = ScanElements(a, b)
    x0q = quantize_array(x0, fmt)
    if chunk is None:
        states = scan_sequential(elems, x0q, fmt)
    else:
        states = scan_parallel(elems, x0q, chunk=chunk, workers=workers, fmt=fmt)
    states = tracked(states, fmt)
    outputs = q(C_diag * states)

    return StateTrace(
        inputs=u,
        states=states,
        outputs=outputs,
        x0=x0q,
        scan_inputs=v,
        gate_pre=gate_pre,
        rows=rows,
        delta_bar=delta_bar,
        a=a,
        bcoef=bcoef,
        fmt=fmt,
    )


# ============================================================
# Reverse pass
# ============================================================

@dataclass(frozen=True)
class MambaGrads:
    A_log: np.ndarray
    W: np.ndarray
    delta_bias: np.ndarray
    gate_weight: np.ndarray
    x0: np.ndarray
    u: np.ndarray

    def named(self) -> dict:
        return {
            "A_log": self.A_log,
            "W": self.W,
            "delta_bias": self.delta_bias,
            "gate_weight": self.gate_weight,
            "x0": self.x0,
        }


def mamba_backward(params: MambaParams, trace: StateTrace, dLdy) -> MambaGrads:
    """Exact reverse-mode gradients of sum(dLdy * y) through the whole block."""
    gy = np.asarray(dLdy, dtype=np.float64)
    if gy.shape != trace.outputs.shape:
        raise ShapeError(f"output gradient shape {gy.shape} != {trace.outputs.shape}")
    if trace.states.shape[1] != params.d:
        raise ShapeError("trace was not produced by these parameters")

    d = params.d
    A = params.A
    x, a, bcoef, v = trace.states, trace.a, trace.bcoef, trace.scan_inputs
    T = x.shape[0]
    x_prev = np.vstack([trace.x0[None, :], x[:-1]])
    _, B_diag, C_diag = params.fused.split(trace.rows)
    z = trace.rows[:, :d] + params.delta_bias

    g_C = gy * x
    g_x = np.empty_like(x)
    carry = np.zeros(d)
    for t in range(T - 1, -1, -1):
        g_x[t] = gy[t] * C_diag[t] + carry
        carry = a[t] * g_x[t]
    g_x0 = carry

    g_bcoef = g_x * v
    g_v = g_x * bcoef
    g_B = g_bcoef * (a - 1.0) / A
    g_a = g_x * x_prev + g_bcoef * B_diag / A
    g_A = np.sum(g_bcoef * B_diag * (-(a - 1.0) / A ** 2), axis=0)

    g_delta_bar = g_a * a * A
    g_A += np.sum(g_a * a * trace.delta_bar, axis=0)
    g_z = g_delta_bar * sigmoid(z)
    g_bias = g_z.sum(axis=0)
    g_A_log = g_A * A

    g_rows = np.hstack([g_z, g_B, g_C])
    if params.mode is BufferMode.TIME_INDEXED:
        g_W = np.zeros_like(params.fused.W)
        g_W[:T] = g_rows
    else:
        g_W = v.T @ g_rows
        g_v = g_v + g_rows @ params.fused.W.T

    if params.gate_enabled:
        pre, u = trace.gate_pre, trace.inputs
        s = sigmoid(pre)
        g_pre = g_v * u * s * (1.0 + pre * (1.0 - s))
        g_u = g_v * pre * s + g_pre @ params.gate_weight
        g_G = g_pre.T @ u
    else:
        g_u = g_v
        g_G = np.zeros((d, d))

    return MambaGrads(
        A_log=g_A_log,
        W=g_W,
        delta_bias=g_bias,
        gate_weight=g_G,
        x0=g_x0,
        u=g_u,
    )
