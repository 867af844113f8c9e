"""Run aggregation, the analytic speedup estimate, and sweep tables.

The analytic model prices a generated token at one reduced pass plus, with
probability r (the fallback ratio), one full planned pass:

    speedup = T / (T_l + r * T_b)

where T is the mean full-baseline token latency, T_l the mean reduced-pass
latency over accepted tokens, and T_b the mean planned full-pass latency
over fallback tokens. The measured speedup divides summed simulated
latencies instead; on stationary workloads the two agree.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

from .config import (
    PREFETCH_MOBILE,
    PREFETCH_PREDICTIVE,
    ConfigError,
    HardwareSpec,
    ModelSpec,
    PolicySpec,
    derive_costs,
    hbm_expert_slots,
)
from .engine import (
    PLAN_MOBILE,
    PLAN_ON_DEMAND,
    PLAN_PREGATED,
    TokenLatency,
    fallback_flags_from_confidence,
    simulate_full_stream,
    simulate_mobile_stream,
    stall_share,
)

CSV_COLUMNS = [
    "gamma",
    "k_little",
    "fallback_ratio",
    "T",
    "T_l",
    "T_b",
    "speedup_measured",
    "speedup_analytic",
    "stall_share",
    "cache_hit_rate",
]


@dataclass
class RunMetrics:
    """One summary row; field names mirror the CSV columns exactly."""

    gamma: float
    k_little: int
    fallback_ratio: float
    T: float
    T_l: float
    T_b: float
    speedup_measured: float
    speedup_analytic: float
    stall_share: float
    cache_hit_rate: float

    def row(self) -> list:
        return [getattr(self, name) for name in CSV_COLUMNS]


def analytic_speedup(T: float, T_l: float, T_b: float, r: float) -> float:
    """Expected speedup of the big-little scheme over the full baseline."""
    if T <= 0 or T_l <= 0:
        raise ValueError(f"latencies must be positive, got T={T}, T_l={T_l}")
    if not (0.0 <= r <= 1.0):
        raise ValueError(f"fallback ratio outside [0, 1]: {r}")
    if r > 0 and T_b <= 0:
        raise ValueError(f"T_b must be positive when r > 0, got {T_b}")
    return T / (T_l + r * T_b)


def aggregate(
    baseline_tokens: list[TokenLatency],
    primary_tokens: list[TokenLatency],
    gamma: float,
    k_little: int,
) -> RunMetrics:
    """Summarize a baseline run and the run under test over the same tokens.

    T_l averages the reduced pass over accepted tokens only (over all tokens
    when every one fell back), T_b the planned full pass over fallback
    tokens; this keeps the measured/analytic comparison a real consistency
    check rather than an identity. stall_share and cache_hit_rate describe
    the run under test, not the baseline.
    """
    if not baseline_tokens or not primary_tokens:
        raise ValueError("aggregate needs non-empty runs")
    if len(baseline_tokens) != len(primary_tokens):
        raise ValueError(
            f"token streams differ: baseline has {len(baseline_tokens)}, "
            f"run under test has {len(primary_tokens)}"
        )
    n = len(primary_tokens)
    fallbacks = sum(1 for t in primary_tokens if t.fallback)
    r = fallbacks / n

    little_all = [t.passes[0].total for t in primary_tokens]
    little_accepted = [t.passes[0].total for t in primary_tokens if not t.fallback]
    big_passes = [p.total for t in primary_tokens if t.fallback for p in t.passes[1:]]

    T = sum(t.total for t in baseline_tokens) / n
    T_l = (sum(little_accepted) / len(little_accepted)) if little_accepted else (
        sum(little_all) / n
    )
    T_b = (sum(big_passes) / len(big_passes)) if big_passes else 0.0

    total_baseline = sum(t.total for t in baseline_tokens)
    total_primary = sum(t.total for t in primary_tokens)
    hits = sum(p.hits for t in primary_tokens for p in t.passes)
    misses = sum(p.misses for t in primary_tokens for p in t.passes)

    return RunMetrics(
        gamma=gamma,
        k_little=k_little,
        fallback_ratio=r,
        T=T,
        T_l=T_l,
        T_b=T_b,
        speedup_measured=total_baseline / total_primary,
        speedup_analytic=analytic_speedup(T, T_l, T_b, r),
        stall_share=stall_share(primary_tokens),
        cache_hit_rate=hits / (hits + misses) if hits + misses else 1.0,
    )


def _big_plan_for(policy: PolicySpec) -> str:
    return PLAN_MOBILE if policy.prefetch_strategy == PREFETCH_MOBILE else PLAN_ON_DEMAND


def run_pair(
    records,
    model: ModelSpec,
    hw: HardwareSpec,
    policy: PolicySpec,
    gamma: float | None = None,
    fallback_flags: list[bool] | None = None,
    k_little: int | None = None,
    event_log: list | None = None,
) -> tuple[list[TokenLatency], list[TokenLatency], RunMetrics]:
    """Simulate the on-demand baseline and the policy's system on one trace.

    MoBiLE / OnDemand strategies run the big-little stream (fallback decided
    by stored confidences against gamma unless explicit flags are injected);
    PredictiveGate runs the full model under predicted prefetch instead, so
    its row reports r=0 with T_l playing the predicted-run latency.
    """
    if not records:
        raise ValueError("empty trace")
    model.validate()
    hw.validate()
    policy.validate()
    gamma = policy.gamma if gamma is None else gamma
    k_little = model.k_little if k_little is None else k_little
    if not (1 <= k_little <= model.k_big):
        raise ConfigError(f"k_little ({k_little}) outside [1, k_big={model.k_big}]")
    costs = derive_costs(model, hw)
    slots = hbm_expert_slots(model, hw)

    baseline, _ = simulate_full_stream(
        records, costs, slots, model.k_big, plan_mode=PLAN_ON_DEMAND
    )
    if policy.prefetch_strategy == PREFETCH_PREDICTIVE:
        primary, _ = simulate_full_stream(
            records,
            costs,
            slots,
            model.k_big,
            plan_mode=PLAN_PREGATED,
            prediction_accuracy=policy.prediction_accuracy,
            prediction_seed=policy.sampling_seed,
            event_log=event_log,
        )
    else:
        if fallback_flags is None:
            fallback_flags = fallback_flags_from_confidence(records, gamma)
        primary = simulate_mobile_stream(
            records,
            fallback_flags,
            costs,
            slots,
            k_little,
            model.k_big,
            hw.lookahead_depth,
            big_plan=_big_plan_for(policy),
            event_log=event_log,
        )
    return baseline, primary, aggregate(baseline, primary, gamma, k_little)


def gamma_sweep(
    records,
    model: ModelSpec,
    hw: HardwareSpec,
    policy: PolicySpec,
    gammas: list[float],
) -> list[RunMetrics]:
    """One row per threshold over a fixed trace; the baseline runs once."""
    if not gammas:
        raise ValueError("empty gamma grid")
    for g in gammas:
        if not (0.0 <= g <= 1.0):
            raise ConfigError(f"gamma outside [0, 1]: {g}")
    costs = derive_costs(model, hw)
    slots = hbm_expert_slots(model, hw)
    baseline, _ = simulate_full_stream(
        records, costs, slots, model.k_big, plan_mode=PLAN_ON_DEMAND
    )
    rows = []
    for g in gammas:
        flags = fallback_flags_from_confidence(records, g)
        primary = simulate_mobile_stream(
            records,
            flags,
            costs,
            slots,
            model.k_little,
            model.k_big,
            hw.lookahead_depth,
            big_plan=_big_plan_for(policy),
        )
        rows.append(aggregate(baseline, primary, g, model.k_little))
    return rows


def little_size_sweep(
    records,
    model: ModelSpec,
    hw: HardwareSpec,
    policy: PolicySpec,
    k_littles: list[int],
) -> list[RunMetrics]:
    """One row per reduced-pass width.

    The trace's stored confidences do not depend on k_little, so every row
    shares the same fallback pattern except k_little=k_big, where the reduced
    pass is the full pass and no fallback is needed (r forced to 0).
    """
    if not k_littles:
        raise ValueError("empty k_little grid")
    for k in k_littles:
        if not (1 <= k <= model.k_big):
            raise ConfigError(f"k_little ({k}) outside [1, k_big={model.k_big}]")
    costs = derive_costs(model, hw)
    slots = hbm_expert_slots(model, hw)
    baseline, _ = simulate_full_stream(
        records, costs, slots, model.k_big, plan_mode=PLAN_ON_DEMAND
    )
    rows = []
    for k in k_littles:
        if k == model.k_big:
            flags = [False] * len(records)
        else:
            flags = fallback_flags_from_confidence(records, policy.gamma)
        primary = simulate_mobile_stream(
            records,
            flags,
            costs,
            slots,
            k,
            model.k_big,
            hw.lookahead_depth,
            big_plan=_big_plan_for(policy),
        )
        rows.append(aggregate(baseline, primary, policy.gamma, k))
    return rows


def write_metrics_csv(path: str | Path, rows: list[RunMetrics]) -> None:
    """Canonical CSV output; header and column order are part of the contract."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row.row()])
