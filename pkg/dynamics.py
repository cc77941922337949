# ============================================================
# Stability probes for the selective recurrence
# Lyapunov exponents, epsilon-perturbation and precision divergence
# ============================================================

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np

from errors import DynamicsError
from numerics import FP64_POLICY, PrecisionPolicy
from ssm_core import MambaParams, mamba_forward

logger = logging.getLogger(__name__)

MIN_FIT_POINTS = 8


class PerturbTarget(str, Enum):
    X0 = "x0"
    INPUT = "input"
    BOTH = "both"


@dataclass(frozen=True)
class LyapunovEstimate:
    per_dim: np.ndarray
    lambda_max: float
    T_used: int
    zeta_fit: float = 0.0
    zeta_fitted: bool = False

    def to_dict(self) -> dict:
        return {
            "per_dim": [float(v) for v in self.per_dim],
            "lambda_max": self.lambda_max,
            "T_used": self.T_used,
            "zeta_fit": self.zeta_fit if self.zeta_fitted else None,
        }


@dataclass(frozen=True)
class DivergenceTrace:
    epsilon: float
    deviations: np.ndarray
    overflowed: bool
    label: str = field(default="")

    def __len__(self) -> int:
        return int(self.deviations.shape[0])


def _estimate(per_dim: np.ndarray, T: int) -> LyapunovEstimate:
    return LyapunovEstimate(per_dim=per_dim, lambda_max=float(np.max(per_dim)), T_used=T)


# -------------------------------
# Lyapunov exponents
# -------------------------------
def lyapunov_closed_form(A_log, delta_bars) -> LyapunovEstimate:
    """lambda_j = A_j * mean_t(Delta_bar_t[j]); non-positive whenever Delta_bar >= 0."""
    delta_bars = np.atleast_2d(np.asarray(delta_bars, dtype=np.float64))
    T = delta_bars.shape[0]
    if T < 1:
        raise DynamicsError("empty Δ̄ sequence")
    if np.any(delta_bars < 0) or not np.all(np.isfinite(delta_bars)):
        raise DynamicsError("invalid Δ̄")
    A = -np.exp(np.asarray(A_log, dtype=np.float64))
    return _estimate(A * delta_bars.mean(axis=0), T)


def lyapunov_numeric(params: MambaParams, u, x0=None) -> LyapunovEstimate:
    """
    Mean log of the diagonal state Jacobians exp(Delta_bar_t * A). The logs
    are taken as Delta_bar_t * A directly, so steps where exp underflows to
    zero still contribute their exact exponent.
    """
    trace = mamba_forward(params, u, x0, FP64_POLICY)
    T = trace.delta_bar.shape[0]
    log_jac = trace.delta_bar * params.A
    return _estimate(log_jac.sum(axis=0) / T, T)


def with_zeta(estimate: LyapunovEstimate, zeta: float) -> LyapunovEstimate:
    return LyapunovEstimate(
        per_dim=estimate.per_dim,
        lambda_max=estimate.lambda_max,
        T_used=estimate.T_used,
        zeta_fit=float(zeta),
        zeta_fitted=True,
    )


# -------------------------------
# Divergence probes
# -------------------------------
def _deviation_trace(states, states_other, epsilon: float, label: str) -> DivergenceTrace:
    overflowed = not (np.all(np.isfinite(states)) and np.all(np.isfinite(states_other)))
    with np.errstate(invalid="ignore"):
        deviations = np.max(np.abs(states - states_other), axis=1)
    return DivergenceTrace(epsilon=epsilon, deviations=deviations, overflowed=overflowed, label=label)


def divergence_probe(
    params: MambaParams,
    u,
    epsilon: float,
    perturb: PerturbTarget = PerturbTarget.BOTH,
    policy: PrecisionPolicy = FP64_POLICY,
    x0=None,
) -> DivergenceTrace:
    """Max-abs state gap between a nominal run and one shifted by epsilon in x0 and/or u."""
    u = np.asarray(u, dtype=np.float64)
    if epsilon <= 0:
        raise DynamicsError("epsilon must be positive")
    if u.shape[0] < 2:
        raise DynamicsError("probe needs at least 2 steps")
    perturb = PerturbTarget(perturb)
    x0 = np.zeros(params.d) if x0 is None else np.asarray(x0, dtype=np.float64)

    x0_p = x0 + epsilon if perturb in (PerturbTarget.X0, PerturbTarget.BOTH) else x0
    u_p = u + epsilon if perturb in (PerturbTarget.INPUT, PerturbTarget.BOTH) else u

    nominal = mamba_forward(params, u, x0, policy)
    shifted = mamba_forward(params, u_p, x0_p, policy)
    trace = _deviation_trace(nominal.states, shifted.states, epsilon, f"{policy.name}/{perturb.value}")
    if trace.overflowed:
        logger.warning("[DIVERGENCE] overflow under %s (eps=%g)", policy.name, epsilon)
    return trace


def precision_probe(
    params: MambaParams,
    u,
    policy: PrecisionPolicy,
    reference: PrecisionPolicy = FP64_POLICY,
    x0=None,
) -> DivergenceTrace:
    """Max-abs gap between the same input run under `policy` and under `reference`."""
    low = mamba_forward(params, u, x0, policy)
    ref = mamba_forward(params, u, x0, reference)
    return _deviation_trace(low.states, ref.states, 0.0, f"{policy.name}-vs-{reference.name}")


def fit_deviation_rate(trace: DivergenceTrace) -> float:
    """OLS slope of log(deviation) against step, in nats per step."""
    dev = np.asarray(trace.deviations, dtype=np.float64)
    steps = np.arange(dev.shape[0], dtype=np.float64)
    usable = np.isfinite(dev) & (dev > 0)
    if int(usable.sum()) < MIN_FIT_POINTS:
        raise DynamicsError("insufficient signal")
    slope, _ = np.polyfit(steps[usable], np.log(dev[usable]), 1)
    return float(slope)


def half_ratio(trace: DivergenceTrace) -> float:
    """mean(second half) / mean(first half); about 1 when deviations do not compound."""
    dev = np.asarray(trace.deviations, dtype=np.float64)
    half = dev.shape[0] // 2
    first, second = float(np.mean(dev[:half])), float(np.mean(dev[half:]))
    if first == 0.0:
        return 0.0 if second == 0.0 else float("inf")
    return second / first
