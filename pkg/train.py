# ============================================================
# Fine-tuning harness
# AdamW + cosine annealing + clipping, mixed precision, ATPS / MMPT
# ============================================================

import gc
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, model_validator

from data import PAD, BatchStream
from errors import DataError, TrainingError
from lora import TargetStrategy, alpha_scale, select_targets, trainable_param_count
from numerics import FP64_POLICY, METER, NumericFormat, PrecisionPolicy, quantize_array, tracked

logger = logging.getLogger(__name__)

POLICY_PRESETS: Dict[str, PrecisionPolicy] = {
    name: PrecisionPolicy.named(name) for name in ("fp64", "fp32", "fp16", "bf16")
}
DEFAULT_COMPARE_RANK = 8
LOG_EVERY = 50


# ============================================================
# Config
# ============================================================

class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    learning_rate: float = 1e-3
    lora_rank: Optional[int] = None
    lora_alpha: Optional[float] = None
    lora_strategy: TargetStrategy = TargetStrategy.SLL
    warmup_steps: int = 0
    total_steps: int = 100
    batch_size: int = 8
    max_seq_len: int = 64
    clip_norm: float = 1.0
    epochs: int = 3
    seed: int = 0
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_scale: float = 1.0
    prefetch_depth: int = 2

    @model_validator(mode="after")
    def _check(self) -> "TrainConfig":
        if self.warmup_steps < 0 or self.total_steps < 0:
            raise ValueError("warmup_steps and total_steps must be non-negative")
        if self.warmup_steps > self.total_steps:
            raise ValueError("warmup_steps must not exceed total_steps")
        if self.lora_rank is not None and self.lora_rank < 1:
            raise ValueError("lora_rank must be at least 1")
        if self.batch_size < 1 or self.max_seq_len < 1 or self.epochs < 1:
            raise ValueError("batch_size, max_seq_len and epochs must be positive")
        if self.loss_scale <= 0:
            raise ValueError("loss_scale must be positive")
        return self

    @property
    def is_lora(self) -> bool:
        return self.lora_rank is not None

    @property
    def lora_scale(self) -> float:
        if self.lora_rank is None or self.lora_alpha is None:
            return 1.0
        return alpha_scale(self.lora_alpha, self.lora_rank)


# ============================================================
# Schedule / optimizer
# ============================================================

def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Linear warmup to learning_rate, then cosine annealing to 0 at total_steps."""
    if step < 0 or step > cfg.total_steps:
        raise TrainingError(step, f"outside schedule [0, {cfg.total_steps}]")
    lr = cfg.learning_rate
    if step < cfg.warmup_steps:
        return lr * step / cfg.warmup_steps
    span = cfg.total_steps - cfg.warmup_steps
    if span == 0:
        return lr
    p = (step - cfg.warmup_steps) / span
    return max(0.0, lr * 0.5 * (1.0 + math.cos(math.pi * p)))


@dataclass
class AdamState:
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(
    master_params: Mapping[str, np.ndarray],
    grads: Mapping[str, np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.01,
    master_format: NumericFormat = NumericFormat.FP32,
) -> Tuple[Dict[str, np.ndarray], AdamState]:
    """
    Bias-corrected Adam with decoupled weight decay. Returns new parameter
    arrays rounded to `master_format`; the inputs are left untouched.
    """
    for name, g in grads.items():
        if name not in master_params:
            raise TrainingError(state.step, f"gradient for unknown parameter '{name}'")
        if g.shape != master_params[name].shape:
            raise TrainingError(state.step, f"gradient shape mismatch for '{name}'")
        if not np.all(np.isfinite(g)):
            raise TrainingError(state.step, f"non-finite gradient in '{name}'")

    t = state.step + 1
    correction1 = 1.0 - beta1 ** t
    correction2 = 1.0 - beta2 ** t

    updated: Dict[str, np.ndarray] = {}
    for name, p in master_params.items():
        if name not in grads:
            updated[name] = p
            continue
        g = np.asarray(grads[name], dtype=np.float64)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1.0 - beta1) * g if m is None else beta1 * m + (1.0 - beta1) * g
        v = (1.0 - beta2) * g * g if v is None else beta2 * v + (1.0 - beta2) * g * g
        state.m[name] = tracked(quantize_array(m, master_format), master_format)
        state.v[name] = tracked(quantize_array(v, master_format), master_format)

        step = (state.m[name] / correction1) / (np.sqrt(state.v[name] / correction2) + eps)
        new = p - lr * (step + weight_decay * p)
        updated[name] = tracked(quantize_array(new, master_format), master_format)

    state.step = t
    return updated, state


def clip_grad_norm(grads: Mapping[str, np.ndarray], max_norm: float = 1.0) -> Tuple[Dict[str, np.ndarray], float]:
    norm = math.sqrt(sum(float(np.sum(np.square(g))) for g in grads.values()))
    if norm > max_norm and norm > 0.0:
        factor = max_norm / norm
        return {name: g * factor for name, g in grads.items()}, norm
    return dict(grads), norm


# ============================================================
# Loss
# ============================================================

def cross_entropy(logits, targets) -> Tuple[float, np.ndarray]:
    """Mean next-token cross-entropy over every position, and its gradient."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    log_probs = shifted - log_z
    picked = np.take_along_axis(log_probs, targets[..., None], axis=-1)[..., 0]
    n = targets.size
    loss = float(-picked.sum() / n)

    dlogits = np.exp(log_probs)
    np.put_along_axis(dlogits, targets[..., None], np.take_along_axis(dlogits, targets[..., None], axis=-1) - 1.0, axis=-1)
    return loss, dlogits / n


def token_accuracy(logits, targets, ignore_id: Optional[int] = None) -> float:
    pred = np.argmax(np.asarray(logits), axis=-1)
    targets = np.asarray(targets)
    mask = np.ones(targets.shape, dtype=bool) if ignore_id is None else targets != ignore_id
    if not mask.any():
        return 1.0
    return float(np.mean(pred[mask] == targets[mask]))


# ============================================================
# Metrics
# ============================================================

@dataclass
class TrainMetrics:
    loss_trace: List[float] = field(default_factory=list)
    lr_trace: List[float] = field(default_factory=list)
    grad_norm_trace: List[float] = field(default_factory=list)
    atps: float = 0.0
    mmpt: float = 0.0
    peak_bytes: int = 0
    total_tokens: int = 0
    wall_seconds: float = 0.0
    precision_policy: str = "fp64"
    trainable_params: int = 0
    total_params: int = 0

    @property
    def steps(self) -> int:
        return len(self.loss_trace)

    def finalize(self, wall_seconds: float, peak_bytes: int, cfg: TrainConfig) -> None:
        self.wall_seconds = float(wall_seconds)
        self.peak_bytes = int(peak_bytes)
        self.atps = self.total_tokens / self.wall_seconds if self.wall_seconds > 0 else 0.0
        self.mmpt = self.peak_bytes / (cfg.batch_size * cfg.max_seq_len)

    def rows(self) -> List[dict]:
        return [
            {"step": i, "lr": lr, "loss": loss, "grad_norm": norm}
            for i, (lr, loss, norm) in enumerate(zip(self.lr_trace, self.loss_trace, self.grad_norm_trace))
        ]

    def to_dict(self, config: Optional[TrainConfig] = None) -> dict:
        out = {
            "loss_trace": list(self.loss_trace),
            "atps": self.atps,
            "mmpt": self.mmpt,
            "peak_bytes": self.peak_bytes,
            "total_tokens": self.total_tokens,
            "wall_seconds": self.wall_seconds,
            "precision_policy": self.precision_policy,
            "trainable_params": self.trainable_params,
            "total_params": self.total_params,
        }
        if config is not None:
            out["config"] = config.model_dump(mode="json")
        return out

    def deterministic_dict(self) -> dict:
        """Everything except the wall-clock derived values."""
        out = self.to_dict()
        for key in ("atps", "wall_seconds"):
            out.pop(key)
        return out


def _model_bytes(model) -> int:
    total = sum(p.size for p in model.params.values())
    for adapter in model.adapters.values():
        total += adapter.U.size + adapter.V.size
    return int(total) * model.master_format.itemsize


# ============================================================
# Training loop
# ============================================================

def _trainable(model) -> Dict[str, np.ndarray]:
    if model.adapters:
        out = {}
        for role, adapter in model.adapters.items():
            out[f"{role}.lora_U"] = adapter.U
            out[f"{role}.lora_V"] = adapter.V
        return out
    return dict(model.params)


def _store(model, updated: Mapping[str, np.ndarray]) -> None:
    if model.adapters:
        for name, value in updated.items():
            role, factor = name.rsplit(".", 1)
            setattr(model.adapters[role], "U" if factor == "lora_U" else "V", value)
    else:
        model.params.update(updated)


def _trainable_grads(model, grads: Mapping[str, np.ndarray]) -> Dict[str, np.ndarray]:
    if not model.adapters:
        return dict(grads)
    out = {}
    for role, adapter in model.adapters.items():
        g_u, g_v = adapter.grads(grads[role])
        out[f"{role}.lora_U"] = g_u
        out[f"{role}.lora_V"] = g_v
    return out


def train_loop(model, cfg: TrainConfig, policy: PrecisionPolicy, data: BatchStream) -> TrainMetrics:
    """
    Full fine-tuning when cfg.lora_rank is None, otherwise adapter-only
    training on the cfg.lora_strategy targets. Stops after total_steps
    optimizer steps or cfg.epochs passes, whichever comes first.
    """
    if data.is_empty():
        raise DataError("empty batch stream")
    if data.seq_len > cfg.max_seq_len:
        raise DataError(f"sequence length {data.seq_len} exceeds max_seq_len {cfg.max_seq_len}")

    if cfg.is_lora and not model.adapters:
        selection = select_targets(model, cfg.lora_strategy)
        model.attach_adapters(selection, cfg.lora_rank, scale=cfg.lora_scale, seed=cfg.seed)

    metrics = TrainMetrics(precision_policy=policy.name, total_params=model.parameter_count())
    if model.adapters:
        metrics.trainable_params = sum(a.U.size + a.V.size for a in model.adapters.values())
    else:
        metrics.trainable_params = metrics.total_params

    master = policy.master_format
    state = AdamState()
    stream = data.with_batch_size(cfg.batch_size)

    gc.collect()
    METER.reset()
    baseline = METER.live_bytes
    own_bytes = _model_bytes(model)
    logger.info(
        "[TRAIN] %s %s: %d/%d trainable, %d steps",
        "LoRA" if model.adapters else "Full", policy.name,
        metrics.trainable_params, metrics.total_params, cfg.total_steps,
    )

    started = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        if step >= cfg.total_steps:
            break
        for x, y in stream.prefetch(cfg.prefetch_depth, epoch):
            if step >= cfg.total_steps:
                break
            lr = cosine_lr(step, cfg)
            logits, cache = model.forward(x, policy)
            loss, dlogits = cross_entropy(logits, y)
            if not math.isfinite(loss):
                raise TrainingError(step, "non-finite loss")

            grads = model.backward(cache, dlogits * cfg.loss_scale, policy.gradient_format)
            grads = {
                name: quantize_array(g / cfg.loss_scale, master)
                for name, g in grads.items()
            }
            grads = _trainable_grads(model, grads)
            grads, norm = clip_grad_norm(grads, cfg.clip_norm)

            try:
                updated, state = adamw_step(
                    _trainable(model), grads, state, lr,
                    beta1=cfg.beta1, beta2=cfg.beta2, eps=cfg.eps,
                    weight_decay=cfg.weight_decay, master_format=master,
                )
            except TrainingError as e:
                raise TrainingError(step, e.message.split(": ", 1)[-1])
            _store(model, updated)

            metrics.loss_trace.append(loss)
            metrics.lr_trace.append(lr)
            metrics.grad_norm_trace.append(norm)
            metrics.total_tokens += int(x.size)
            if step % LOG_EVERY == 0:
                logger.info("[TRAIN] step %d loss %.4f lr %.3e |g| %.3e", step, loss, lr, norm)
            step += 1

    wall = time.perf_counter() - started
    peak = METER.peak_bytes - baseline + own_bytes
    metrics.finalize(wall, peak, cfg)
    logger.info("[TRAIN] done: %d steps, %d tokens, peak %d bytes", metrics.steps, metrics.total_tokens, metrics.peak_bytes)
    return metrics


# ============================================================
# Evaluation / comparison
# ============================================================

@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float
    marked_accuracy: float
    mean_output: float
    logits: np.ndarray = field(repr=False)

    def to_dict(self) -> dict:
        return {
            "loss": self.loss,
            "accuracy": self.accuracy,
            "marked_accuracy": self.marked_accuracy,
            "mean_output": self.mean_output,
        }


def evaluate(model, batch, policy: PrecisionPolicy = FP64_POLICY) -> EvalResult:
    """`batch` is an (inputs, targets) pair or a BatchStream (evaluated whole)."""
    if isinstance(batch, BatchStream):
        inputs, targets = batch.inputs, batch.targets
    else:
        inputs, targets = batch
    logits, _ = model.forward(inputs, policy)
    loss, _ = cross_entropy(logits, targets)
    return EvalResult(
        loss=loss,
        accuracy=token_accuracy(logits, targets),
        marked_accuracy=token_accuracy(logits, targets, ignore_id=PAD),
        mean_output=float(np.mean(logits)),
        logits=logits,
    )


@dataclass(frozen=True)
class Variant:
    method: str  # "Full", "ALL" or "SLL"
    precision: str

    @property
    def name(self) -> str:
        return f"{self.method}-{self.precision}"

    @property
    def strategy(self) -> Optional[TargetStrategy]:
        return None if self.method == "Full" else TargetStrategy(self.method)


def default_variants() -> List[Variant]:
    return [Variant(method, precision) for method in ("Full", "ALL", "SLL") for precision in ("fp32", "fp16", "bf16")]


@dataclass
class CompareRow:
    variant: str
    metrics: TrainMetrics
    evaluation: EvalResult
    divergence: float
    atps_ratio: float = 0.0
    mmpt_ratio: float = 0.0
    error: Optional[str] = None

    def to_dict(self, timings: bool = True) -> dict:
        out = {
            "variant": self.variant,
            "mmpt": self.metrics.mmpt,
            "peak_bytes": self.metrics.peak_bytes,
            "mmpt_ratio": self.mmpt_ratio,
            "trainable_params": self.metrics.trainable_params,
            "total_params": self.metrics.total_params,
            "final_loss": self.metrics.loss_trace[-1] if self.metrics.loss_trace else None,
            "accuracy": self.evaluation.accuracy if self.evaluation else None,
            "marked_accuracy": self.evaluation.marked_accuracy if self.evaluation else None,
            "divergence": self.divergence,
            "error": self.error,
        }
        if timings:
            out["atps"] = self.metrics.atps
            out["atps_ratio"] = self.atps_ratio
        return out


def _variant_config(cfg: TrainConfig, variant: Variant) -> TrainConfig:
    if variant.strategy is None:
        return cfg.model_copy(update={"lora_rank": None})
    return cfg.model_copy(update={"lora_rank": cfg.lora_rank or DEFAULT_COMPARE_RANK, "lora_strategy": variant.strategy})


def compare_variants(
    cfg: TrainConfig,
    model_factory: Callable[[int], object],
    data: BatchStream,
    heldout: Tuple[np.ndarray, np.ndarray],
    variants: Optional[Sequence[Variant]] = None,
) -> Tuple[List[CompareRow], dict]:
    """
    Train each variant from the same initialization (model_factory(cfg.seed)).
    Ratios and output divergence are measured against FP32 Full, which is
    always trained first. Also returns the divergence of a freshly
    re-initialized model as the reference point for "far from the optimum".
    """
    variants = list(variants or default_variants())
    reference_variant = Variant("Full", "fp32")
    if reference_variant in variants:
        variants.remove(reference_variant)
    variants.insert(0, reference_variant)

    rows: List[CompareRow] = []
    reference_logits = None
    reference_metrics = None
    for variant in variants:
        model = model_factory(cfg.seed)
        policy = POLICY_PRESETS[variant.precision]
        vcfg = _variant_config(cfg, variant)
        try:
            metrics = train_loop(model, vcfg, policy, data)
        except TrainingError as e:
            logger.warning("[COMPARE] %s aborted: %s", variant.name, e.message)
            rows.append(CompareRow(variant.name, TrainMetrics(precision_policy=policy.name), None, float("nan"), error=e.message))
            continue

        evaluation = evaluate(model, heldout, FP64_POLICY)
        if reference_logits is None:
            reference_logits = evaluation.logits
            reference_metrics = metrics
        row = CompareRow(
            variant=variant.name,
            metrics=metrics,
            evaluation=evaluation,
            divergence=float(np.mean(np.abs(evaluation.logits - reference_logits))),
        )
        if reference_metrics.atps > 0:
            row.atps_ratio = metrics.atps / reference_metrics.atps
        if reference_metrics.mmpt > 0:
            row.mmpt_ratio = metrics.mmpt / reference_metrics.mmpt
        rows.append(row)

    reinit = evaluate(model_factory(cfg.seed + 1), heldout, FP64_POLICY)
    summary = {
        "reference": reference_variant.name,
        "reinit_divergence": float(np.mean(np.abs(reinit.logits - reference_logits))) if reference_logits is not None else None,
    }
    return rows, summary


def efficiency_check(rows: Sequence[CompareRow], lora_variant: str = "SLL-bf16") -> dict:
    """Direction of the LoRA-vs-Full efficiency gap; reported, not enforced here."""
    by_name = {row.variant: row for row in rows if row.error is None}
    full = by_name.get("Full-fp32")
    lora = by_name.get(lora_variant)
    if full is None or lora is None:
        return {"available": False}
    return {
        "available": True,
        "variant": lora_variant,
        "atps_ok": lora.metrics.atps >= full.metrics.atps,
        "memory_ok": lora.metrics.peak_bytes < full.metrics.peak_bytes,
    }


def trainable_fraction(model, strategy, r: int) -> float:
    trainable, total = trainable_param_count(model, select_targets(model, strategy), r)
    return trainable / total
