"""Desk-scale simulator for offloading-based MoE inference with a big-little
expert scheme: reduced-width decoding with confidence fallback to the full
model, whose expert loads are prefetched from the reduced pass's own router
logits.
"""

from .config import (
    ConfigError,
    CostTable,
    ExpertId,
    HardwareSpec,
    ModelSpec,
    PolicySpec,
    data_path,
    derive_costs,
    hbm_expert_slots,
    load_config_file,
    parse_bytes,
)
from .engine import (
    PassBreakdown,
    StreamSimulator,
    TokenLatency,
    fallback_flags_from_confidence,
    injected_fallback_flags,
    selections_from_logits,
    simulate_full_stream,
    simulate_mobile_stream,
    stall_share,
)
from .memory import CapacityDeadlock, HbmCache, TransferChannel
from .metrics import (
    CSV_COLUMNS,
    RunMetrics,
    aggregate,
    analytic_speedup,
    gamma_sweep,
    little_size_sweep,
    run_pair,
    write_metrics_csv,
)
from .policy import (
    PredictionOutcome,
    PrefetchPlan,
    build_mobile_plan,
    build_pregated_plan,
    on_demand_selection,
    should_fallback,
)
from .toymoe import (
    ToyMoE,
    TokenDecision,
    big_forward,
    build_model,
    full_forward,
    generate,
    little_forward,
    top_k,
)
from .trace import (
    SyntheticTraceConfig,
    TraceRecord,
    gen_synthetic,
    load_trace,
    record_from_model,
    save_trace,
)

__version__ = "0.1.0"
