"""Model / hardware / policy configuration and derived per-expert costs.

All byte-valued config fields accept either plain integers (bytes) or
suffixed strings such as "64MiB" or "16GiB/s" (the "/s" is tolerated on
bandwidth fields). Binary suffixes (KiB/MiB/GiB/TiB) are powers of 1024,
decimal ones (KB/MB/GB/TB) powers of 1000.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

PREFETCH_ON_DEMAND = "OnDemand"
PREFETCH_MOBILE = "MoBiLE"
PREFETCH_PREDICTIVE = "PredictiveGate"
PREFETCH_STRATEGIES = (PREFETCH_ON_DEMAND, PREFETCH_MOBILE, PREFETCH_PREDICTIVE)

SAMPLING_GREEDY = "Greedy"
SAMPLING_TEMPERATURE = "Temperature"

_BYTE_UNITS = {
    "": 1,
    "B": 1,
    "KB": 1000,
    "MB": 1000**2,
    "GB": 1000**3,
    "TB": 1000**4,
    "KIB": 1024,
    "MIB": 1024**2,
    "GIB": 1024**3,
    "TIB": 1024**4,
}

_BYTES_RE = re.compile(r"^\s*([0-9]*\.?[0-9]+)\s*([A-Za-z]*?)(/s)?\s*$")


class ConfigError(ValueError):
    """Raised when a configuration value violates an invariant."""


def parse_bytes(value, field_name: str = "value") -> int:
    """Parse an integer byte count or a suffixed string like "64MiB"."""
    if isinstance(value, bool):
        raise ConfigError(f"{field_name}: expected a byte quantity, got bool")
    if isinstance(value, (int, float)):
        if value < 0:
            raise ConfigError(f"{field_name}: byte quantity must be >= 0, got {value}")
        return int(value)
    if not isinstance(value, str):
        raise ConfigError(f"{field_name}: expected int or suffixed string, got {type(value).__name__}")
    m = _BYTES_RE.match(value)
    if not m:
        raise ConfigError(f"{field_name}: cannot parse byte quantity {value!r}")
    number, unit, _per_s = m.groups()
    unit_key = unit.upper()
    if unit_key not in _BYTE_UNITS:
        raise ConfigError(f"{field_name}: unknown byte unit {unit!r} in {value!r}")
    return int(float(number) * _BYTE_UNITS[unit_key])


@dataclass(frozen=True, order=True)
class ExpertId:
    """Identity of one expert FFN: (layer, expert) with lexicographic order."""

    layer: int
    expert: int

    def __str__(self) -> str:
        return f"L{self.layer}E{self.expert}"


@dataclass(frozen=True)
class ModelSpec:
    """Static description of the MoE architecture being simulated."""

    num_layers: int
    num_experts: int
    k_big: int
    k_little: int = 0  # 0 means "default to k_big // 2"
    hidden_dim: int = 64
    vocab_size: int = 256
    expert_bytes: int = 64 * 1024**2
    dense_bytes_per_layer: int = 8 * 1024**2
    eos_token: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.k_little == 0:
            object.__setattr__(self, "k_little", max(1, self.k_big // 2))

    def validate(self) -> "ModelSpec":
        if self.num_layers < 1:
            raise ConfigError(f"num_layers must be >= 1, got {self.num_layers}")
        if self.num_experts < 1:
            raise ConfigError(f"num_experts must be >= 1, got {self.num_experts}")
        if self.k_big > self.num_experts:
            raise ConfigError(f"k_big ({self.k_big}) exceeds num_experts ({self.num_experts})")
        if self.k_little > self.k_big:
            raise ConfigError(f"k_little ({self.k_little}) exceeds k_big ({self.k_big})")
        if self.k_little < 1:
            raise ConfigError(f"k_little must be >= 1, got {self.k_little}")
        if self.vocab_size < 2:
            raise ConfigError(f"vocab_size must be >= 2, got {self.vocab_size}")
        if self.expert_bytes <= 0:
            raise ConfigError(f"expert_bytes must be > 0, got {self.expert_bytes}")
        if self.dense_bytes_per_layer < 0:
            raise ConfigError(f"dense_bytes_per_layer must be >= 0, got {self.dense_bytes_per_layer}")
        if not (0 <= self.eos_token < self.vocab_size):
            raise ConfigError(f"eos_token ({self.eos_token}) outside vocab [0, {self.vocab_size})")
        if self.hidden_dim < 1:
            raise ConfigError(f"hidden_dim must be >= 1, got {self.hidden_dim}")
        return self


@dataclass(frozen=True)
class HardwareSpec:
    """Consumer-platform description: capacities, bandwidths, compute rates.

    `reserved` is the HBM budget held back for activations / KV state; it is
    not derivable from first principles, so it is an explicit knob with a
    1 GiB default.
    """

    hbm_capacity: int = 16 * 1024**3
    pcie_bandwidth: float = 16 * 1024**3  # bytes/second
    pcie_fixed_latency: float = 1e-4  # seconds per transfer
    gpu_expert_compute: float = 3e-4  # seconds per expert-token forward
    gpu_attn_compute: float = 2.7e-3  # seconds per layer-token attention
    lookahead_depth: int = 2
    reserved: int = 1024**3

    def validate(self) -> "HardwareSpec":
        if self.hbm_capacity <= 0:
            raise ConfigError(f"hbm_capacity must be > 0, got {self.hbm_capacity}")
        if self.pcie_bandwidth <= 0:
            raise ConfigError(f"pcie_bandwidth must be > 0, got {self.pcie_bandwidth}")
        if self.pcie_fixed_latency < 0:
            raise ConfigError(f"pcie_fixed_latency must be >= 0, got {self.pcie_fixed_latency}")
        if self.gpu_expert_compute <= 0:
            raise ConfigError(f"gpu_expert_compute must be > 0, got {self.gpu_expert_compute}")
        if self.gpu_attn_compute <= 0:
            raise ConfigError(f"gpu_attn_compute must be > 0, got {self.gpu_attn_compute}")
        if self.lookahead_depth < 1:
            raise ConfigError(f"lookahead_depth must be >= 1, got {self.lookahead_depth}")
        if self.reserved < 0:
            raise ConfigError(f"reserved must be >= 0, got {self.reserved}")
        return self


@dataclass(frozen=True)
class PolicySpec:
    """Fallback threshold plus prefetch / eviction / sampling choices."""

    gamma: float = 0.7
    prefetch_strategy: str = PREFETCH_MOBILE
    prediction_accuracy: float = 1.0  # only used by PredictiveGate
    eviction: str = "LRU"
    sampling: str = SAMPLING_GREEDY
    temperature: float = 1.0
    sampling_seed: int = 0
    reuse_little_gates: bool = False

    def validate(self) -> "PolicySpec":
        if not (0.0 <= self.gamma <= 1.0):
            raise ConfigError(f"gamma out of range [0, 1]: {self.gamma}")
        if self.prefetch_strategy not in PREFETCH_STRATEGIES:
            raise ConfigError(
                f"prefetch_strategy must be one of {PREFETCH_STRATEGIES}, got {self.prefetch_strategy!r}"
            )
        if not (0.0 <= self.prediction_accuracy <= 1.0):
            raise ConfigError(f"prediction_accuracy out of range [0, 1]: {self.prediction_accuracy}")
        if self.eviction != "LRU":
            raise ConfigError(f"eviction must be 'LRU', got {self.eviction!r}")
        if self.sampling not in (SAMPLING_GREEDY, SAMPLING_TEMPERATURE):
            raise ConfigError(f"sampling must be Greedy or Temperature, got {self.sampling!r}")
        if self.sampling == SAMPLING_TEMPERATURE and self.temperature <= 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")
        return self


@dataclass(frozen=True)
class CostTable:
    """Elementary per-expert / per-layer costs in seconds."""

    t_xfer: float  # seconds to move one expert over the interconnect
    t_exp: float  # seconds to run one expert on one token
    t_attn: float  # seconds of attention (+ router) per layer per token


def validate(spec):
    """Validate any spec object; returns it unchanged if all invariants hold."""
    return spec.validate()


def derive_costs(model: ModelSpec, hw: HardwareSpec) -> CostTable:
    """Elementary cost quantities used by the timing model."""
    t_xfer = hw.pcie_fixed_latency + model.expert_bytes / hw.pcie_bandwidth
    return CostTable(t_xfer=t_xfer, t_exp=hw.gpu_expert_compute, t_attn=hw.gpu_attn_compute)


def hbm_expert_slots(model: ModelSpec, hw: HardwareSpec) -> int:
    """Number of expert parameter slots that fit in HBM next to the dense weights.

    Raises ConfigError if the budget cannot hold even one layer's active set
    (k_big experts).
    """
    dense_total = model.num_layers * model.dense_bytes_per_layer
    budget = hw.hbm_capacity - dense_total - hw.reserved
    slots = budget // model.expert_bytes
    if slots < model.k_big:
        raise ConfigError(
            f"hbm_capacity {hw.hbm_capacity} leaves room for {slots} expert slots; "
            f"need at least k_big={model.k_big}"
        )
    return int(slots)


def _coerce(cls, data: dict, byte_fields: set[str], name: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"{name}: unknown fields {sorted(unknown)}")
    kwargs = {}
    for key, value in data.items():
        if key in byte_fields:
            kwargs[key] = parse_bytes(value, field_name=f"{name}.{key}")
        else:
            kwargs[key] = value
    return cls(**kwargs)


def model_from_dict(data: dict) -> ModelSpec:
    return _coerce(ModelSpec, data, {"expert_bytes", "dense_bytes_per_layer"}, "model").validate()


def hardware_from_dict(data: dict) -> HardwareSpec:
    spec = _coerce(HardwareSpec, data, {"hbm_capacity", "reserved"}, "hardware")
    if isinstance(spec.pcie_bandwidth, str):
        spec = replace(spec, pcie_bandwidth=float(parse_bytes(spec.pcie_bandwidth, "hardware.pcie_bandwidth")))
    return spec.validate()


def policy_from_dict(data: dict) -> PolicySpec:
    return _coerce(PolicySpec, data, set(), "policy").validate()


def load_config_file(path: str | Path) -> dict:
    """Load a JSON config file holding any of the `model` / `hardware` / `policy` objects."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    out = {}
    if "model" in raw:
        out["model"] = model_from_dict(raw["model"])
    if "hardware" in raw:
        out["hardware"] = hardware_from_dict(raw["hardware"])
    if "policy" in raw:
        out["policy"] = policy_from_dict(raw["policy"])
    if not out:
        raise ConfigError(f"{path}: no model/hardware/policy object found")
    return out


def data_path(name: str) -> Path:
    """Path of a packaged default config (e.g. "rtx4080.json")."""
    return Path(__file__).parent / "data" / name
