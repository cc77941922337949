# ============================================================
# Run configuration
# INI sections per subcommand, --set overrides, env fallbacks, presets
# ============================================================
"""
Config files are flat INI text, one section per subcommand:

    [train]
    preset = table3-130m
    total_steps = 500
    precision = bf16

    [divergence]
    epsilons = 1e-4, 1e-6
    policies = fp64, fp32, bf16, fp16

List values are comma-separated. Precedence, lowest first: section
defaults, preset (train only), file values, --set overrides.
"""

import configparser
import logging
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Type

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from dynamics import PerturbTarget
from errors import ConfigError
from lora import TargetStrategy
from ssm_core import BufferMode
from train import POLICY_PRESETS, TrainConfig

logger = logging.getLogger(__name__)

LAB_VERSION = "0.3.0"
SCHEMA_VERSION = 1

SEED_ENV = "SSMDYNLAB_SEED"
OUTPUT_ENV = "SSMDYNLAB_OUTPUT"
DEFAULT_OUTPUT_ROOT = "runs"

SUBCOMMANDS = ("lyapunov", "divergence", "scan-bench", "train", "lora-verify", "report")

# (learning rate, LoRA rank) per model size
PRESETS: Dict[str, Dict[str, Any]] = {
    "table3-130m": {"learning_rate": 1.0e-5, "lora_rank": 8},
    "table3-370m": {"learning_rate": 5.0e-5, "lora_rank": 16},
    "table3-790m": {"learning_rate": 1.0e-6, "lora_rank": 32},
    "table3-1.4b": {"learning_rate": 5.0e-6, "lora_rank": 64},
    "table3-2.8b": {"learning_rate": 5.0e-7, "lora_rank": 128},
}
PRESET_ALIASES = {"table3-small": "table3-130m", "table3-large": "table3-2.8b"}
PRESET_RECIPE = {"warmup_steps": 0, "clip_norm": 1.0, "epochs": 3}


# ============================================================
# Section models
# ============================================================

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")

    @model_validator(mode="before")
    @classmethod
    def _split_lists(cls, values: Any) -> Any:
        if not isinstance(values, dict):
            return values
        out = dict(values)
        for name, info in cls.model_fields.items():
            raw = out.get(name)
            if isinstance(raw, str) and getattr(info.annotation, "__origin__", None) in (list, List):
                out[name] = [item.strip() for item in raw.split(",") if item.strip()]
            elif isinstance(raw, str) and raw.strip().lower() in ("none", "") and not info.is_required():
                if info.default is None:
                    out[name] = None
        return out


class LyapunovSection(_Section):
    d: List[int] = [1, 4, 16]
    T: List[int] = [64, 512]
    draws: int = 1000
    mode: BufferMode = BufferMode.INPUT_PROJECTED
    gate_enabled: bool = False
    weight_scale: float = 1.0


class DivergenceSection(_Section):
    d: int = 4
    T: int = 256
    models: int = 8
    epsilons: List[float] = [1e-4]
    policies: List[str] = ["fp64", "fp32", "bf16", "fp16"]
    perturb: PerturbTarget = PerturbTarget.BOTH
    mode: BufferMode = BufferMode.INPUT_PROJECTED
    gate_enabled: bool = False

    @field_validator("policies")
    @classmethod
    def _known_policies(cls, value: List[str]) -> List[str]:
        for name in value:
            if name not in POLICY_PRESETS:
                raise ValueError(f"unknown precision policy '{name}'")
        return value


class ScanBenchSection(_Section):
    T: List[int] = [1, 2, 3, 17, 1024, 4096]
    d: int = 16
    workers: List[int] = [1, 2, 4]
    chunk: int = 256
    repeats: int = 3
    precision: str = "fp64"


class TrainSection(_Section):
    preset: Optional[str] = None
    precision: str = "fp32"
    d: int = 64
    vocab: int = 16
    T: int = 64
    k: Optional[int] = None
    n_train: int = 512
    n_heldout: int = 64
    mode: BufferMode = BufferMode.INPUT_PROJECTED
    gate_enabled: bool = False
    corpus: Optional[str] = None
    variants: List[str] = []
    strict_efficiency: bool = False

    learning_rate: float = 1e-3
    lora_rank: Optional[int] = None
    lora_alpha: Optional[float] = None
    lora_strategy: TargetStrategy = TargetStrategy.SLL
    warmup_steps: int = 0
    total_steps: int = 200
    batch_size: int = 8
    max_seq_len: int = 64
    clip_norm: float = 1.0
    epochs: int = 3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    loss_scale: float = 1.0
    prefetch_depth: int = 2

    def train_config(self, seed: int) -> TrainConfig:
        values = {name: getattr(self, name) for name in TrainConfig.model_fields if name in type(self).model_fields}
        values["seed"] = seed
        try:
            return TrainConfig(**values)
        except ValidationError as e:
            raise _as_config_error(e)


class LoraVerifySection(_Section):
    checkpoint: Optional[str] = None


class ReportSection(_Section):
    host: str = "127.0.0.1"
    port: int = 8000


SECTIONS: Dict[str, Type[_Section]] = {
    "lyapunov": LyapunovSection,
    "divergence": DivergenceSection,
    "scan-bench": ScanBenchSection,
    "train": TrainSection,
    "lora-verify": LoraVerifySection,
    "report": ReportSection,
}


# ============================================================
# Run spec
# ============================================================

@dataclass(frozen=True)
class RunSpec:
    subcommand: str
    config_path: Optional[str]
    output_dir: str
    seed: int
    overrides: Dict[str, str] = field(default_factory=dict)
    workers: int = 1
    options: Dict[str, Any] = field(default_factory=dict)

    def option(self, name: str, default=None):
        return self.options.get(name, default)


# ============================================================
# Loading
# ============================================================

def _as_config_error(e: ValidationError) -> ConfigError:
    first = e.errors()[0]
    key = ".".join(str(part) for part in first.get("loc", ())) or "config"
    if first.get("type") == "extra_forbidden":
        return ConfigError(key, "unknown key")
    return ConfigError(key, first.get("msg", "invalid value"))


def parse_overrides(pairs: Optional[Sequence[str]]) -> Dict[str, str]:
    out: Dict[str, str] = {}
    for pair in pairs or ():
        if "=" not in pair:
            raise ConfigError(pair, "override must look like key=value")
        key, value = pair.split("=", 1)
        key = key.strip()
        if not key:
            raise ConfigError(pair, "empty key")
        out[key] = value.strip()
    return out


def read_config_file(path: Optional[str], section: str) -> Dict[str, str]:
    if not path:
        return {}
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        with open(path, "r", encoding="utf-8") as f:
            parser.read_file(f)
    except OSError as e:
        raise ConfigError("config", f"cannot read {path}: {e}")
    except configparser.Error as e:
        raise ConfigError("config", f"malformed config file: {e}")
    if not parser.has_section(section):
        return {}
    return dict(parser.items(section))


def resolve_preset(name: str) -> Dict[str, Any]:
    canonical = PRESET_ALIASES.get(name, name)
    if canonical not in PRESETS:
        raise ConfigError("preset", f"unknown preset '{name}'")
    values = dict(PRESET_RECIPE)
    values.update(PRESETS[canonical])
    return values


def load_section(subcommand: str, path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None, preset: Optional[str] = None):
    """Typed config for `subcommand`. Unknown or invalid keys raise ConfigError naming the key."""
    if subcommand not in SECTIONS:
        raise ConfigError("subcommand", f"unknown subcommand '{subcommand}'")
    model = SECTIONS[subcommand]

    values: Dict[str, Any] = {}
    file_values = read_config_file(path, subcommand)
    merged = dict(file_values)
    merged.update(overrides or {})

    preset = preset or merged.get("preset")
    if subcommand == "train" and preset:
        values.update(resolve_preset(preset))
        values["preset"] = preset
        logger.info("[CONFIG] preset %s -> %s", preset, PRESETS[PRESET_ALIASES.get(preset, preset)])
    values.update(merged)

    try:
        return model(**values)
    except ValidationError as e:
        raise _as_config_error(e)


def resolve_seed(cli_seed: Optional[int]) -> int:
    if cli_seed is not None:
        return int(cli_seed)
    raw = os.getenv(SEED_ENV)
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(SEED_ENV, f"not an integer: {raw!r}")


def default_output_root() -> str:
    return os.getenv(OUTPUT_ENV) or DEFAULT_OUTPUT_ROOT
