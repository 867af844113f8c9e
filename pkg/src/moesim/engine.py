"""Discrete-event timing model for token generation over offloaded experts.

One simulated pass walks the layers of a token: attention compute, then a
wait until every selected expert is HBM-resident (the transfer stall), then
sequential expert compute. A prefetch plan may issue transfers ahead of
their layer at layer boundaries; the single transfer channel keeps draining
while compute proceeds, which is what lets planned transfers hide.

Three stream drivers cover the execution modes: the full on-demand baseline,
full passes under an arbitrary plan flavor (router-replay or predictive
gate), and the big-little stream where accepted tokens cost one reduced pass
and fallback tokens cost that pass plus a planned full pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import CostTable, ExpertId
from .memory import ISSUED, HbmCache, TransferChannel
from .policy import (
    PredictionOutcome,
    PrefetchPlan,
    build_mobile_plan,
    build_pregated_plan,
    on_demand_selection,
)
from .toymoe import top_k

PASS_FULL = "full"
PASS_LITTLE = "little"
PASS_BIG = "big"

PLAN_ON_DEMAND = "on_demand"
PLAN_MOBILE = "mobile"
PLAN_PREGATED = "pregated"


@dataclass
class PassBreakdown:
    """Latency accounting for one pass of one token.

    total = compute + transfer_stall holds exactly by construction.
    overlapped_transfer is the share of this pass's fresh transfer time that
    hid under compute instead of stalling it.
    """

    label: str
    total: float
    compute: float
    transfer_stall: float
    overlapped_transfer: float
    layer_stalls: list[float]
    fresh_transfers: int
    hits: int  # selected experts already resident/in flight when needed
    misses: int  # selected experts that required an on-demand issue


@dataclass
class TokenLatency:
    index: int
    fallback: bool
    passes: list[PassBreakdown]

    @property
    def total(self) -> float:
        return sum(p.total for p in self.passes)

    @property
    def transfer_stall(self) -> float:
        return sum(p.transfer_stall for p in self.passes)


def selections_from_logits(layers: np.ndarray, k: int) -> list[list[ExpertId]]:
    """Per-layer top-k expert identities from an (L, E) logit matrix."""
    layers = np.asarray(layers, dtype=float)
    return [
        [ExpertId(l, e) for e in top_k(layers[l], k)] for l in range(layers.shape[0])
    ]


class StreamSimulator:
    """Owns the cache/channel pair for one run; passes share warm state."""

    def __init__(self, costs: CostTable, slots: int, event_log: list | None = None):
        self.costs = costs
        self.cache = HbmCache(slots)
        self.channel = TransferChannel(costs.t_xfer)
        self.now = 0.0
        self.event_log = event_log

    def _log(self, time: float, kind: str, expert, layer: int) -> None:
        if self.event_log is not None:
            self.event_log.append((time, kind, str(expert), layer))

    def _issue_window(self, waiting: list, layer: int, now: float) -> list:
        """Speculatively issue plan entries whose window has opened.

        Entries are kept sorted by (earliest_issue_layer, layer, expert);
        deferred entries retry at the next boundary. Entries whose own layer
        already passed, or that routing will request anyway this layer, drop.
        """
        kept = []
        for i, entry in enumerate(waiting):
            if entry.earliest_issue_layer > layer:
                kept.extend(waiting[i:])
                break
            if entry.expert.layer < layer:
                continue  # stale: the target layer already executed
            if entry.after_routing:
                continue  # its own layer's demand path handles it
            result = self.cache.request(entry.expert, now, self.channel, speculative=True)
            if result is None:
                kept.append(entry)  # no victim available yet, retry later
            else:
                self._log(now, "prefetch", entry.expert, layer)
        return kept

    def run_pass(
        self, selections: list[list[ExpertId]], plan: PrefetchPlan, label: str
    ) -> PassBreakdown:
        costs = self.costs
        waiting = list(plan.entries)
        stalls: list[float] = []
        compute = 0.0
        hits = misses = 0
        issued_before = self.cache.stats.issued
        t = self.now
        self._log(t, "pass_start", "-", -1)
        for layer, selected in enumerate(selections):
            waiting = self._issue_window(waiting, layer, t)
            attn_end = t + costs.t_attn
            compute += costs.t_attn
            ready = attn_end
            for expert in selected:
                result = self.cache.request(expert, attn_end, self.channel)
                self.cache.pin(expert)
                if result.status == ISSUED:
                    misses += 1
                    self._log(attn_end, "demand", expert, layer)
                else:
                    hits += 1
                ready = max(ready, result.ready_time)
            stall = ready - attn_end
            stalls.append(stall)
            if stall > 0:
                self._log(attn_end, "stall", "-", layer)
            compute += len(selected) * costs.t_exp
            t = ready + len(selected) * costs.t_exp
            for expert in selected:
                self.cache.unpin(expert)
        self.now = t
        self._log(t, "pass_end", "-", -1)
        transfer_stall = sum(stalls)
        fresh = self.cache.stats.issued - issued_before
        overlapped = max(0.0, fresh * costs.t_xfer - transfer_stall)
        return PassBreakdown(
            label=label,
            total=compute + transfer_stall,
            compute=compute,
            transfer_stall=transfer_stall,
            overlapped_transfer=overlapped,
            layer_stalls=stalls,
            fresh_transfers=fresh,
            hits=hits,
            misses=misses,
        )

    def token_end(self) -> None:
        self.cache.token_end()


def simulate_full_stream(
    records,
    costs: CostTable,
    slots: int,
    k_big: int,
    plan_mode: str = PLAN_ON_DEMAND,
    lookahead: int = 1,
    prediction_accuracy: float = 1.0,
    prediction_seed: int = 0,
    event_log: list | None = None,
) -> tuple[list[TokenLatency], list[PredictionOutcome]]:
    """Every token runs the full model; the plan flavor decides transfer timing.

    on_demand: loads issue at their own layer after routing (the offloading
    baseline). mobile: router-replay plan issued `lookahead` layers ahead.
    pregated: per-expert Bernoulli(prediction_accuracy) predictions issue one
    layer ahead, the rest on demand; outcomes are returned for inspection.
    """
    if plan_mode not in (PLAN_ON_DEMAND, PLAN_MOBILE, PLAN_PREGATED):
        raise ValueError(f"unknown plan mode {plan_mode!r}")
    sim = StreamSimulator(costs, slots, event_log)
    rng = np.random.default_rng(prediction_seed)
    tokens: list[TokenLatency] = []
    outcomes: list[PredictionOutcome] = []
    for i, rec in enumerate(records):
        selections = selections_from_logits(rec.layers, k_big)
        if plan_mode == PLAN_MOBILE:
            plan = build_mobile_plan(rec.layers, k_big, lookahead)
        elif plan_mode == PLAN_PREGATED:
            plan, outcome = build_pregated_plan(selections, prediction_accuracy, rng)
            outcomes.append(outcome)
        else:
            plan = on_demand_selection(selections)
        result = sim.run_pass(selections, plan, PASS_FULL)
        tokens.append(TokenLatency(index=i, fallback=False, passes=[result]))
        sim.token_end()
    return tokens, outcomes


def simulate_mobile_stream(
    records,
    fallback_flags: list[bool],
    costs: CostTable,
    slots: int,
    k_little: int,
    k_big: int,
    lookahead: int,
    big_plan: str = PLAN_MOBILE,
    event_log: list | None = None,
) -> list[TokenLatency]:
    """Big-little stream: reduced pass per token, planned full pass on fallback.

    The reduced pass loads its experts on demand (its speedup comes from
    touching fewer experts, not from prefetching). A fallback token pays that
    pass again plus the full pass, whose plan replays the same router logits
    that chose the reduced pass's experts; the reduced pass therefore already
    warmed a subset of the full pass's targets.
    """
    if len(fallback_flags) != len(records):
        raise ValueError(
            f"fallback flags ({len(fallback_flags)}) and trace records "
            f"({len(records)}) differ in length"
        )
    if big_plan not in (PLAN_ON_DEMAND, PLAN_MOBILE):
        raise ValueError(f"unknown big-pass plan {big_plan!r}")
    sim = StreamSimulator(costs, slots, event_log)
    tokens: list[TokenLatency] = []
    for i, rec in enumerate(records):
        little_sel = selections_from_logits(rec.layers, k_little)
        passes = [sim.run_pass(little_sel, on_demand_selection(little_sel), PASS_LITTLE)]
        if fallback_flags[i]:
            big_sel = selections_from_logits(rec.layers, k_big)
            if big_plan == PLAN_MOBILE:
                plan = build_mobile_plan(rec.layers, k_big, lookahead)
            else:
                plan = on_demand_selection(big_sel)
            passes.append(sim.run_pass(big_sel, plan, PASS_BIG))
        tokens.append(TokenLatency(index=i, fallback=fallback_flags[i], passes=passes))
        sim.token_end()
    return tokens


def stall_share(tokens: list[TokenLatency]) -> float:
    """Fraction of total simulated time spent waiting on expert transfers."""
    if not tokens:
        raise ValueError("stall_share of an empty run")
    total = sum(t.total for t in tokens)
    stall = sum(t.transfer_stall for t in tokens)
    return stall / total


def fallback_flags_from_confidence(records, gamma: float) -> list[bool]:
    """Trace-mode fallback rule: strict `> gamma` accepts the little token."""
    return [rec.confidence <= gamma for rec in records]


def injected_fallback_flags(n_tokens: int, ratio: float) -> list[bool]:
    """Evenly spaced flags hitting floor(n * ratio) fallbacks exactly."""
    if not (0.0 <= ratio <= 1.0):
        raise ValueError(f"fallback ratio outside [0, 1]: {ratio}")
    return [
        int((i + 1) * ratio + 1e-9) > int(i * ratio + 1e-9) for i in range(n_tokens)
    ]


def write_event_log(path, events) -> None:
    """Plain-text event dump: one `time kind expert layer` line per event."""
    with open(path, "w") as fh:
        fh.write("# time kind expert layer\n")
        for time, kind, expert, layer in events:
            fh.write(f"{time:.9f} {kind} {expert} {layer}\n")
