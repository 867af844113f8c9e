"""Router-logit traces: load/save, synthesis, and export from the toy model.

A trace is one JSON record per line with keys `t` (token index),
`confidence` (max little-pass probability) and `layers` (L lists of E router
logits). Files ending in `.gz` are gzip-compressed. The timing model runs
entirely off traces, so recorded real-model behavior and synthetic workloads
go through the same door.
"""

from __future__ import annotations

import gzip
import json
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from .config import ConfigError, data_path


@dataclass
class TraceRecord:
    token_index: int
    confidence: float
    layers: np.ndarray  # (L, E) router logits at the generated position

    def validate(self) -> "TraceRecord":
        if self.token_index < 0:
            raise ConfigError(f"record {self.token_index}: token_index must be >= 0")
        if not (0.0 < self.confidence <= 1.0):
            raise ConfigError(
                f"record {self.token_index}: confidence {self.confidence} outside (0, 1]"
            )
        if self.layers.ndim != 2:
            raise ConfigError(f"record {self.token_index}: layers must be 2-D")
        if not np.all(np.isfinite(self.layers)):
            raise ConfigError(f"record {self.token_index}: layers contain non-finite logits")
        return self


@dataclass(frozen=True)
class SyntheticTraceConfig:
    """Workload generator knobs.

    `popularity_skew` is a Zipf exponent over a per-layer random expert
    ranking; 0 means uniform. `reuse_prob` is the per-layer chance a token
    reuses the previous token's logit vector verbatim. Confidences come from
    Beta(conf_alpha, conf_beta).
    """

    seed: int = 0
    num_layers: int = 16
    num_experts: int = 64
    k_big: int = 8
    popularity_skew: float = 1.0
    reuse_prob: float = 0.5
    conf_alpha: float = 8.0
    conf_beta: float = 3.0

    def validate(self) -> "SyntheticTraceConfig":
        if self.num_layers < 1 or self.num_experts < 1:
            raise ConfigError("num_layers and num_experts must be >= 1")
        if not (1 <= self.k_big <= self.num_experts):
            raise ConfigError(f"k_big ({self.k_big}) outside [1, {self.num_experts}]")
        if self.popularity_skew < 0:
            raise ConfigError(f"popularity_skew must be >= 0, got {self.popularity_skew}")
        if not (0.0 <= self.reuse_prob <= 1.0):
            raise ConfigError(f"reuse_prob outside [0, 1]: {self.reuse_prob}")
        if self.conf_alpha <= 0 or self.conf_beta <= 0:
            raise ConfigError("confidence Beta parameters must be > 0")
        return self


def _open_text(path: Path, mode: str):
    if str(path).endswith(".gz"):
        return gzip.open(path, mode + "t")
    return open(path, mode)


def save_trace(path: str | Path, records: list[TraceRecord]) -> None:
    """One JSON object per line; floats at full precision; .gz honored."""
    path = Path(path)
    with _open_text(path, "w") as fh:
        for rec in records:
            line = json.dumps(
                {
                    "t": rec.token_index,
                    "confidence": rec.confidence,
                    "layers": [[float(v) for v in row] for row in rec.layers],
                }
            )
            fh.write(line + "\n")


def load_trace(path: str | Path) -> list[TraceRecord]:
    """Parse and validate a trace file; errors carry the offending line."""
    path = Path(path)
    records: list[TraceRecord] = []
    expected_shape: tuple[int, int] | None = None
    with _open_text(path, "r") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path}:{lineno}: invalid JSON ({exc})") from exc
            for key in ("t", "confidence", "layers"):
                if key not in obj:
                    raise ConfigError(f"{path}:{lineno}: missing key {key!r}")
            layers = obj["layers"]
            if not isinstance(layers, list) or not layers:
                raise ConfigError(f"{path}:{lineno}: layers must be a non-empty list")
            width = len(layers[0])
            for l, row in enumerate(layers):
                if not isinstance(row, list) or len(row) != width:
                    raise ConfigError(
                        f"{path}:{lineno}: layers[{l}] length {len(row)} != {width}"
                    )
            arr = np.asarray(layers, dtype=float)
            if expected_shape is None:
                expected_shape = arr.shape
            elif arr.shape != expected_shape:
                raise ConfigError(
                    f"{path}:{lineno}: layers shape {arr.shape} != {expected_shape}"
                )
            rec = TraceRecord(
                token_index=int(obj["t"]), confidence=float(obj["confidence"]), layers=arr
            )
            try:
                rec.validate()
            except ConfigError as exc:
                raise ConfigError(f"{path}:{lineno}: {exc}") from exc
            records.append(rec)
    return records


def gen_synthetic(cfg: SyntheticTraceConfig, n_tokens: int) -> list[TraceRecord]:
    """Deterministic synthetic workload.

    Fresh logits are drawn with the Gumbel-max trick over Zipf popularity
    weights (per-layer random expert ranking), so top-k frequency follows the
    skew. With probability reuse_prob a layer copies the previous token's
    logit vector, which reproduces its selection exactly.
    """
    cfg.validate()
    if n_tokens < 0:
        raise ConfigError(f"n_tokens must be >= 0, got {n_tokens}")
    rng = np.random.default_rng(cfg.seed)
    L, E = cfg.num_layers, cfg.num_experts

    ranks = np.stack([rng.permutation(E) for _ in range(L)])  # rank of each expert per layer
    log_pop = -cfg.popularity_skew * np.log(ranks + 1.0)  # Zipf over ranks

    records: list[TraceRecord] = []
    prev: np.ndarray | None = None
    for t in range(n_tokens):
        layers = np.empty((L, E))
        for l in range(L):
            if prev is not None and rng.random() < cfg.reuse_prob:
                layers[l] = prev[l]
            else:
                gumbel = -np.log(-np.log(rng.random(E)))
                layers[l] = log_pop[l] + gumbel
        confidence = float(rng.beta(cfg.conf_alpha, cfg.conf_beta))
        confidence = min(max(confidence, 1e-12), 1.0)
        records.append(TraceRecord(token_index=t, confidence=confidence, layers=layers))
        prev = layers
    return records


def synthetic_from_dict(data: dict) -> SyntheticTraceConfig:
    allowed = {f.name for f in fields(SyntheticTraceConfig)}
    unknown = set(data) - allowed
    if unknown:
        raise ConfigError(f"synthetic_trace: unknown fields {sorted(unknown)}")
    return SyntheticTraceConfig(**data).validate()


def load_synthetic_config(path: str | Path) -> tuple[SyntheticTraceConfig, int | None]:
    """Read a workload file: a `synthetic_trace` object plus optional `n_tokens`."""
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(raw, dict) or "synthetic_trace" not in raw:
        raise ConfigError(f"{path}: missing synthetic_trace object")
    cfg = synthetic_from_dict(raw["synthetic_trace"])
    n = raw.get("n_tokens")
    if n is not None and (not isinstance(n, int) or n < 0):
        raise ConfigError(f"{path}: n_tokens must be a non-negative integer")
    return cfg, n


def calibration_trace() -> list[TraceRecord]:
    """The packaged calibration workload, regenerated deterministically."""
    cfg, n = load_synthetic_config(data_path("calibration_trace.json"))
    return gen_synthetic(cfg, n if n is not None else 1000)


def record_from_model(decisions) -> list[TraceRecord]:
    """Export a functional generation's decisions as a timing trace.

    Every decision must carry its recorded router states (generate with
    record_router_states=True); replaying the result through the timing
    engine reproduces the functional run's expert demand exactly.
    """
    records = []
    for i, dec in enumerate(decisions):
        if dec.router_states is None:
            raise ConfigError(
                f"decision {i} has no recorded router states; "
                f"rerun generation with record_router_states=True"
            )
        records.append(
            TraceRecord(
                token_index=i,
                confidence=min(max(float(dec.confidence), 1e-12), 1.0),
                layers=np.asarray(dec.router_states, dtype=float),
            ).validate()
        )
    return records
