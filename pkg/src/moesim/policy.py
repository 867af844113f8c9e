"""Fallback decision and prefetch planning.

Three transfer-scheduling flavors share one plan representation:

* on-demand: each expert may only be requested at its own layer, after that
  layer's routing has run (issue point "after attention");
* router-replay ("MoBiLE"): the big pass's per-layer targets are known up
  front from the little pass's recorded router logits, so every transfer is
  issuable `lookahead` layers early, at the layer boundary;
* predictive gate: a modeled pre-gating baseline with one-layer lookahead and
  per-expert Bernoulli(prediction_accuracy) hits; unpredicted experts fall
  back to on-demand loads at their own layer.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import ExpertId


@dataclass(frozen=True)
class PlanEntry:
    expert: ExpertId
    earliest_issue_layer: int
    after_routing: bool  # True: only issuable after the layer's attention/router


@dataclass
class PrefetchPlan:
    """Ordered expert-transfer schedule for one token pass.

    `targets[l]` is the exact expert set layer `l` will execute; `entries`
    is the issue schedule sorted by (earliest_issue_layer, layer, expert).
    """

    targets: list[list[ExpertId]]
    entries: list[PlanEntry]

    @property
    def num_layers(self) -> int:
        return len(self.targets)


@dataclass
class PredictionOutcome:
    """Per-layer hit/miss bookkeeping for the predictive-gate baseline."""

    predicted: list[set[int]]
    true: list[set[int]]

    @property
    def hits(self) -> list[set[int]]:
        return [p & t for p, t in zip(self.predicted, self.true)]

    @property
    def misses(self) -> list[set[int]]:
        return [t - p for p, t in zip(self.predicted, self.true)]

    def miss_count(self) -> int:
        return sum(len(m) for m in self.misses)

    def prediction_count(self) -> int:
        return sum(len(t) for t in self.true)


def should_fallback(probs: np.ndarray, gamma: float) -> bool:
    """True iff the little pass's best next-token probability fails the threshold.

    Acceptance uses a strict `>` test: max(probs) > gamma keeps the little
    token, anything else falls back.
    """
    probs = np.asarray(probs, dtype=float)
    total = float(probs.sum())
    if abs(total - 1.0) > 1e-4:
        raise ValueError(f"probability vector sums to {total}, expected 1 within 1e-4")
    return float(probs.max()) <= gamma


def _sorted_entries(entries: list[PlanEntry]) -> list[PlanEntry]:
    return sorted(entries, key=lambda e: (e.earliest_issue_layer, e.expert.layer, e.expert.expert))


def build_mobile_plan(router_states: np.ndarray, k_big: int, lookahead: int) -> PrefetchPlan:
    """All-layers-up-front plan from the evicted token's router logits.

    Layer l's target set is top_k(router_states[l], k_big); each expert is
    issuable `lookahead` layers before its own, clamped at layer 0.
    """
    from .toymoe import top_k  # shared tie-break rules

    if lookahead < 1:
        raise ValueError(f"lookahead must be >= 1, got {lookahead}")
    states = np.asarray(router_states, dtype=float)
    if states.ndim != 2:
        raise ValueError(f"router states must be 2-D (layers x experts), got shape {states.shape}")
    targets = []
    entries = []
    for layer in range(states.shape[0]):
        chosen = [ExpertId(layer, e) for e in top_k(states[layer], k_big)]
        targets.append(chosen)
        issue = max(0, layer - lookahead)
        entries.extend(PlanEntry(c, issue, after_routing=False) for c in chosen)
    return PrefetchPlan(targets=targets, entries=_sorted_entries(entries))


def on_demand_selection(selection: list[list[ExpertId]]) -> PrefetchPlan:
    """Degenerate plan: every expert loads at its own layer, after routing."""
    entries = []
    for layer, chosen in enumerate(selection):
        if not chosen:
            raise ValueError(f"layer {layer} has an empty expert selection")
        entries.extend(PlanEntry(c, layer, after_routing=True) for c in chosen)
    return PrefetchPlan(targets=[list(s) for s in selection], entries=_sorted_entries(entries))


def build_pregated_plan(
    true_selection: list[list[ExpertId]],
    prediction_accuracy: float,
    rng: np.random.Generator | int,
) -> tuple[PrefetchPlan, PredictionOutcome]:
    """Modeled pre-gating baseline: one-layer lookahead, imperfect prediction.

    Each truly-needed expert is independently predicted with probability
    `prediction_accuracy` (draws consumed in (layer, selection-order) order, so
    a seeded replay reproduces the outcome). Predicted experts prefetch one
    layer ahead; the rest load on demand. `rng` may be a seed or a Generator
    shared across a token stream.
    """
    if not (0.0 <= prediction_accuracy <= 1.0):
        raise ValueError(f"prediction_accuracy out of range [0, 1]: {prediction_accuracy}")
    if isinstance(rng, (int, np.integer)):
        rng = np.random.default_rng(rng)
    entries = []
    predicted_sets = []
    true_sets = []
    for layer, chosen in enumerate(true_selection):
        if not chosen:
            raise ValueError(f"layer {layer} has an empty expert selection")
        draws = rng.random(len(chosen))
        predicted = set()
        for expert, u in zip(chosen, draws):
            if u < prediction_accuracy:
                predicted.add(expert.expert)
                entries.append(PlanEntry(expert, max(0, layer - 1), after_routing=False))
            else:
                entries.append(PlanEntry(expert, layer, after_routing=True))
        predicted_sets.append(predicted)
        true_sets.append({e.expert for e in chosen})
    plan = PrefetchPlan(targets=[list(s) for s in true_selection], entries=_sorted_entries(entries))
    return plan, PredictionOutcome(predicted=predicted_sets, true=true_sets)
