# ============================================================
# Low-rank adapters
# Attach / merge, fused-buffer tying check, target selection
# ============================================================

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Dict, Mapping, Optional, Tuple

import numpy as np

from checkpoint import read_container, write_container
from errors import LoraError
from numerics import NumericFormat, quantize_array, tracked

logger = logging.getLogger(__name__)

TYING_TOLERANCE = 1e-10
RANK_TOLERANCE = 1e-10

KNOWN_ROLES = ("embeddings", "in_proj", "gate", "fused_buffer", "out_proj")
SLL_ROLES = ("fused_buffer", "embeddings", "in_proj", "out_proj")


class TargetStrategy(str, Enum):
    ALL = "ALL"
    SLL = "SLL"


@dataclass
class LoraAdapter:
    """
    Frozen `base` plus trainable factors. The effective weight is
    base + scale * U @ V; `base` is made read-only on attach.
    """

    base: np.ndarray
    U: np.ndarray
    V: np.ndarray
    scale: float = 1.0
    name: str = "weight"

    @property
    def r(self) -> int:
        return int(self.U.shape[1])

    def delta(self) -> np.ndarray:
        return self.scale * (self.U @ self.V)

    def project(self, x: np.ndarray) -> np.ndarray:
        """x @ (base + scale U V) without materializing the merged weight."""
        return x @ self.base + self.scale * ((x @ self.U) @ self.V)

    def grads(self, g_weight: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        """Chain rule from a gradient on the effective weight to (U, V)."""
        return self.scale * (g_weight @ self.V.T), self.scale * (self.U.T @ g_weight)


@dataclass(frozen=True)
class TargetSelection:
    strategy: TargetStrategy
    targeted: Tuple[str, ...]


@dataclass(frozen=True)
class TyingReport:
    rank_observed: int
    rank_bound: int
    segment_residuals: Tuple[float, float, float]
    shared_left_factor_ok: bool

    @property
    def rank_ok(self) -> bool:
        return self.rank_observed <= self.rank_bound

    @property
    def ok(self) -> bool:
        return self.shared_left_factor_ok and self.rank_ok

    def to_dict(self) -> dict:
        return {
            "rank_observed": self.rank_observed,
            "rank_bound": self.rank_bound,
            "rank_ok": self.rank_ok,
            "segment_residuals": {
                "delta": self.segment_residuals[0],
                "B": self.segment_residuals[1],
                "C": self.segment_residuals[2],
            },
            "shared_left_factor_ok": self.shared_left_factor_ok,
        }


def alpha_scale(alpha: float, r: int) -> float:
    """Conventional alpha / r multiplier."""
    return float(alpha) / float(r)


# -------------------------------
# Attach / merge
# -------------------------------
def attach_lora(
    base: np.ndarray,
    r: int,
    scale: float = 1.0,
    seed=0,
    name: str = "weight",
    fmt: NumericFormat = NumericFormat.FP64,
) -> LoraAdapter:
    """
    Wrap `base` with a rank-r adapter whose product starts at zero.

    `base` is frozen in place: a float64 array passed in becomes read-only
    for the caller too (for ToyLM that is `model.params[role]`). Pass a copy
    to keep a writable original.
    """
    base = np.asarray(base, dtype=np.float64)
    if base.ndim != 2:
        raise LoraError("LoRA targets a matrix")
    n_rows, n_cols = base.shape
    if r < 1:
        raise LoraError("rank must be at least 1")
    if r > min(n_rows, n_cols):
        raise LoraError("rank exceeds matrix")

    rng = np.random.default_rng(seed)
    V = tracked(quantize_array(rng.normal(0.0, 1.0 / np.sqrt(n_cols), size=(r, n_cols)), fmt), fmt)
    U = tracked(np.zeros((n_rows, r)), fmt)
    base.setflags(write=False)
    logger.debug("[LORA] attached r=%d to %s %s", r, name, base.shape)
    return LoraAdapter(base=base, U=U, V=V, scale=float(scale), name=name)


def merged_weight(adapter: LoraAdapter) -> np.ndarray:
    if adapter.scale == 0.0 or not np.any(adapter.U):
        return adapter.base.copy()
    return adapter.base + adapter.delta()


# -------------------------------
# Weight tying check
# -------------------------------
def verify_tying(adapter: LoraAdapter, d: int, delta: Optional[np.ndarray] = None) -> TyingReport:
    """
    Check that one left factor explains the update to all three column
    segments (Delta, B, C) of a fused buffer.

    `delta` is the observed update (merged - base); it defaults to the
    adapter's own scale * U @ V.
    """
    n_cols = adapter.base.shape[1]
    if n_cols % 3 != 0 or n_cols != 3 * d:
        raise LoraError("not a fused buffer")
    dW = adapter.delta() if delta is None else np.asarray(delta, dtype=np.float64)
    if dW.shape != adapter.base.shape:
        raise LoraError(f"update shape {dW.shape} != base shape {adapter.base.shape}")

    sigma = np.linalg.svd(dW, compute_uv=False)
    if sigma.size == 0 or sigma[0] == 0.0:
        rank = 0
    else:
        rank = int(np.sum(sigma > RANK_TOLERANCE * sigma[0]))

    total = float(np.linalg.norm(dW))
    residuals = []
    for k in range(3):
        target = dW[:, k * d:(k + 1) * d]
        if total == 0.0:
            residuals.append(0.0)
            continue
        if np.any(adapter.U):
            coef = np.linalg.lstsq(adapter.U, target, rcond=None)[0]
            miss = target - adapter.U @ coef
        else:
            miss = target
        residuals.append(float(np.linalg.norm(miss)) / total)

    ok = all(res < TYING_TOLERANCE for res in residuals)
    if not ok:
        logger.warning("[LORA] tying check failed for %s: residuals %s", adapter.name, residuals)
    return TyingReport(
        rank_observed=rank,
        rank_bound=adapter.r,
        segment_residuals=tuple(residuals),
        shared_left_factor_ok=ok,
    )


# -------------------------------
# Target selection
# -------------------------------
def select_targets(model, strategy) -> TargetSelection:
    """ALL: every weight role. SLL: fused buffer, embeddings, in/out projections."""
    strategy = TargetStrategy(strategy)
    roles = list(model.weight_roles())
    unknown = [role for role in roles if role not in KNOWN_ROLES]
    if unknown:
        raise LoraError(f"unknown weight role '{unknown[0]}'")

    if strategy is TargetStrategy.ALL:
        targeted = tuple(role for role in KNOWN_ROLES if role in roles)
    else:
        if "fused_buffer" not in roles:
            raise LoraError("missing x_proj role")
        targeted = tuple(role for role in SLL_ROLES if role in roles)
    return TargetSelection(strategy=strategy, targeted=targeted)


def trainable_param_count(model, selection: TargetSelection, r: int) -> Tuple[int, int]:
    weights = model.weight_roles()
    trainable = 0
    for role in selection.targeted:
        n_rows, n_cols = weights[role].shape
        trainable += r * (n_rows + n_cols)
    return trainable, model.parameter_count()


# -------------------------------
# Adapter checkpoints
# -------------------------------
def save_adapters(path: str, adapters: Mapping[str, LoraAdapter], meta: Mapping = None) -> None:
    tensors = {}
    for target, adapter in adapters.items():
        tensors[f"{target}.base"] = adapter.base
        tensors[f"{target}.lora_U"] = adapter.U
        tensors[f"{target}.lora_V"] = adapter.V
        tensors[f"{target}.merged"] = merged_weight(adapter)
    header = dict(meta or {})
    header.update({
        "kind": "lora_adapters",
        "targets": list(adapters),
        "r": {t: a.r for t, a in adapters.items()},
        "scale": {t: a.scale for t, a in adapters.items()},
    })
    write_container(path, tensors, header)
    logger.info("[LORA] wrote %d adapters to %s", len(adapters), path)


def load_adapters(path: str) -> Tuple[Dict[str, LoraAdapter], Dict[str, np.ndarray], dict]:
    """Returns (adapters, merged weights as stored, header meta)."""
    tensors, meta = read_container(path)
    targets = meta.get("targets") or []
    if meta.get("kind") != "lora_adapters" or not targets:
        raise LoraError("checkpoint has no adapter")

    adapters: Dict[str, LoraAdapter] = {}
    merged: Dict[str, np.ndarray] = {}
    for target in targets:
        try:
            base = tensors[f"{target}.base"]
            U = tensors[f"{target}.lora_U"]
            V = tensors[f"{target}.lora_V"]
        except KeyError as e:
            raise LoraError(f"adapter tensor missing: {e.args[0]}")
        adapters[target] = LoraAdapter(
            base=base,
            U=U,
            V=V,
            scale=float(meta.get("scale", {}).get(target, 1.0)),
            name=target,
        )
        merged[target] = tensors.get(f"{target}.merged", merged_weight(adapters[target]))
    return adapters, merged, meta
