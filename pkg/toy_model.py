# toy_model.py
"""
A small next-token model around one selective state-space block:

    tokens -> embeddings -> in_proj -> [gate] Mamba block -> out_proj (+ residual) -> head

Matrix weights are exposed by role so LoRA can target them; `head`,
`A_log` and `delta_bias` are plain parameters.
"""

import logging
from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from checkpoint import read_container, write_container
from errors import CheckpointError, ShapeError
from lora import LoraAdapter, TargetSelection, attach_lora, merged_weight
from numerics import NumericFormat, PrecisionPolicy, quantize_array, tracked
from ssm_core import BufferMode, FusedBuffer, MambaParams, StateTrace, mamba_backward, mamba_forward

logger = logging.getLogger(__name__)

ROLE_ORDER = ("embeddings", "in_proj", "gate", "fused_buffer", "out_proj")
PARAM_ORDER = ROLE_ORDER + ("head", "A_log", "delta_bias")


@dataclass
class ForwardCache:
    tokens: np.ndarray
    weights: Dict[str, np.ndarray]
    block: MambaParams
    emb: np.ndarray
    h: np.ndarray
    traces: List[StateTrace]
    y: np.ndarray
    z: np.ndarray


class ToyLM:
    def __init__(
        self,
        vocab_size: int,
        d: int,
        mode: BufferMode = BufferMode.INPUT_PROJECTED,
        T_max: int = 64,
        gate_enabled: bool = False,
        seed=0,
        master_format: NumericFormat = NumericFormat.FP32,
    ):
        if vocab_size < 2 or d < 1:
            raise ShapeError("vocab_size must be >= 2 and d >= 1")
        self.vocab_size = vocab_size
        self.d = d
        self.mode = BufferMode(mode)
        self.T_max = T_max
        self.gate_enabled = gate_enabled
        self.master_format = master_format
        self.adapters: Dict[str, LoraAdapter] = {}

        rng = np.random.default_rng(seed)
        scale = 1.0 / np.sqrt(d)
        rows = T_max if self.mode is BufferMode.TIME_INDEXED else d

        W = rng.normal(0.0, scale, size=(rows, 3 * d))
        W[:, :d] *= 0.1
        # step sizes log-uniform in [1e-3, 1e-1], stored through inverse softplus
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=d))
        delta_bias = dt + np.log(-np.expm1(-dt))

        params = {
            "embeddings": rng.normal(0.0, 1.0, size=(vocab_size, d)),
            "in_proj": rng.normal(0.0, scale, size=(d, d)),
            "fused_buffer": W,
            "out_proj": rng.normal(0.0, scale, size=(d, d)),
            "head": rng.normal(0.0, scale, size=(d, vocab_size)),
            "A_log": np.log(1.0 + np.arange(d) % 16),
            "delta_bias": delta_bias,
        }
        if gate_enabled:
            params["gate"] = rng.normal(0.0, scale, size=(d, d))
        self.params: Dict[str, np.ndarray] = {
            name: tracked(quantize_array(value, master_format), master_format)
            for name, value in params.items()
        }

    # -----------------------
    # Introspection
    # -----------------------
    def weight_roles(self) -> Dict[str, np.ndarray]:
        return {role: self.params[role] for role in ROLE_ORDER if role in self.params}

    def parameter_count(self) -> int:
        return int(sum(value.size for value in self.params.values()))

    def block_params(self, weights: Optional[Dict[str, np.ndarray]] = None) -> MambaParams:
        weights = self.params if weights is None else weights
        return MambaParams(
            A_log=weights["A_log"],
            fused=FusedBuffer(self.mode, weights["fused_buffer"]),
            delta_bias=weights["delta_bias"],
            T_max=self.T_max,
            gate_enabled=self.gate_enabled,
            gate_weight=weights.get("gate"),
        )

    # -----------------------
    # Adapters
    # -----------------------
    def attach_adapters(self, selection: TargetSelection, r: int, scale: float = 1.0, seed=0) -> Dict[str, LoraAdapter]:
        for idx, role in enumerate(selection.targeted):
            self.adapters[role] = attach_lora(
                self.params[role], r, scale=scale, seed=[int(seed), idx], name=role, fmt=self.master_format
            )
        logger.info("[MODEL] LoRA r=%d on %s", r, ", ".join(selection.targeted))
        return self.adapters

    def effective_weights(self) -> Dict[str, np.ndarray]:
        weights = dict(self.params)
        for role, adapter in self.adapters.items():
            weights[role] = merged_weight(adapter)
        return weights

    # -----------------------
    # Forward / backward
    # -----------------------
    def forward(self, tokens, policy: PrecisionPolicy):
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError("tokens must be batch x time")
        fmt = policy.activation_format

        def q(arr):
            return tracked(quantize_array(arr, fmt), fmt)

        weights = {name: q(value) for name, value in self.effective_weights().items()}
        block = self.block_params(weights)

        emb = q(weights["embeddings"][tokens])
        h = q(emb @ weights["in_proj"])
        traces = [mamba_forward(block, h[i], None, policy) for i in range(tokens.shape[0])]
        y = np.stack([trace.outputs for trace in traces])
        z = q(y @ weights["out_proj"] + emb)
        logits = q(z @ weights["head"])
        return logits, ForwardCache(tokens, weights, block, emb, h, traces, y, z)

    def backward(self, cache: ForwardCache, dlogits, fmt: NumericFormat = NumericFormat.FP64) -> Dict[str, np.ndarray]:
        """Gradients for every parameter, rounded to `fmt`."""
        w = cache.weights
        d, V = self.d, self.vocab_size
        dlogits = np.asarray(dlogits, dtype=np.float64)

        grads: Dict[str, np.ndarray] = {}
        grads["head"] = cache.z.reshape(-1, d).T @ dlogits.reshape(-1, V)
        g_z = dlogits @ w["head"].T
        grads["out_proj"] = cache.y.reshape(-1, d).T @ g_z.reshape(-1, d)
        g_y = g_z @ w["out_proj"].T
        g_emb = g_z.copy()

        g_A_log = np.zeros(d)
        g_bias = np.zeros(d)
        g_W = np.zeros_like(w["fused_buffer"])
        g_gate = np.zeros((d, d))
        g_h = np.empty_like(cache.h)
        for i, trace in enumerate(cache.traces):
            block_grads = mamba_backward(cache.block, trace, g_y[i])
            g_A_log += block_grads.A_log
            g_bias += block_grads.delta_bias
            g_W += block_grads.W
            g_gate += block_grads.gate_weight
            g_h[i] = block_grads.u

        grads["in_proj"] = cache.emb.reshape(-1, d).T @ g_h.reshape(-1, d)
        g_emb += g_h @ w["in_proj"].T
        g_E = np.zeros_like(w["embeddings"])
        np.add.at(g_E, cache.tokens.reshape(-1), g_emb.reshape(-1, d))
        grads["embeddings"] = g_E
        grads["fused_buffer"] = g_W
        grads["A_log"] = g_A_log
        grads["delta_bias"] = g_bias
        if self.gate_enabled:
            grads["gate"] = g_gate

        return {name: tracked(quantize_array(value, fmt), fmt) for name, value in grads.items()}


# -----------------------
# Persistence
# -----------------------
def save_model(path: str, model: ToyLM) -> None:
    tensors = {name: model.params[name] for name in PARAM_ORDER if name in model.params}
    meta = {
        "kind": "toy_lm",
        "vocab_size": model.vocab_size,
        "d": model.d,
        "mode": model.mode.value,
        "T_max": model.T_max,
        "gate_enabled": model.gate_enabled,
        "master_format": model.master_format.value,
    }
    write_container(path, tensors, meta)


def load_model(path: str) -> ToyLM:
    tensors, meta = read_container(path)
    if meta.get("kind") != "toy_lm":
        raise CheckpointError("meta.kind", f"expected toy_lm, got {meta.get('kind')!r}")
    model = ToyLM(
        vocab_size=int(meta["vocab_size"]),
        d=int(meta["d"]),
        mode=BufferMode(meta["mode"]),
        T_max=int(meta["T_max"]),
        gate_enabled=bool(meta["gate_enabled"]),
        master_format=NumericFormat(meta.get("master_format", "fp32")),
    )
    for name in model.params:
        if name not in tensors:
            raise CheckpointError(name, "missing tensor")
        if tensors[name].shape != model.params[name].shape:
            raise CheckpointError(name, "shape/payload mismatch")
        model.params[name] = tensors[name]
    return model
