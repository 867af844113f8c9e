"""A tiny deterministic MoE transformer used as the functional reference.

The "little" and "big" models are the same weights run with different
top-k widths, so there is exactly one forward implementation. The big
(fallback) pass can replay the router logits recorded by the little pass at
the final position, which fixes its expert selection up front; that is the
property the prefetch planner relies on.

Everything is plain numpy, float64, fully reproducible from ModelSpec.seed.
Full-sequence recomputation per generated token (no KV cache) keeps the
functional semantics unambiguous at desk scale.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .config import (
    SAMPLING_TEMPERATURE,
    ConfigError,
    ModelSpec,
    PolicySpec,
)
from .policy import should_fallback

ACCEPTED_LITTLE = "Little"
ACCEPTED_BIG = "BigFallback"

# Output-head sharpening so toy confidences spread across (0, 1) instead of
# hugging 1/vocab; chosen so greedy chains accept roughly three quarters of
# tokens at the default threshold.
LOGIT_SCALE = 24.0

_LN_EPS = 1e-5
_MAX_HIDDEN = 512
_MAX_VOCAB = 4096
_MAX_LAYERS = 64
_MAX_EXPERTS = 256


@dataclass(frozen=True)
class ToyMoE:
    """Immutable weight bundle; safe to share across runs."""

    spec: ModelSpec
    embed: np.ndarray  # (V, d)
    attn_q: np.ndarray  # (L, d, d)
    attn_k: np.ndarray
    attn_v: np.ndarray
    attn_o: np.ndarray
    router: np.ndarray  # (L, d, E)
    expert_in: np.ndarray  # (L, E, d, d)
    expert_out: np.ndarray  # (L, E, d, d)
    head: np.ndarray  # (d, V)


@dataclass
class ForwardResult:
    """Final-position outputs of one full forward pass."""

    probs: np.ndarray  # (V,) next-token distribution at the last position
    router_states: np.ndarray  # (L, E) router logits at the last position
    selections: list[list[int]]  # per layer, expert indices used at the last position


@dataclass
class TokenDecision:
    """Outcome of one generated token under the accept/fallback loop."""

    token: int
    accepted_by: str  # ACCEPTED_LITTLE or ACCEPTED_BIG
    confidence: float  # max little-pass probability
    little_selections: list[list[int]]
    big_selections: list[list[int]] | None = None  # set iff fallback
    router_states: np.ndarray | None = None  # retained iff fallback (or if recording)


def top_k(logits: np.ndarray, k: int) -> list[int]:
    """Indices of the k largest logits, descending, ties by ascending index."""
    logits = np.asarray(logits)
    if k > logits.shape[-1]:
        raise ValueError(f"k ({k}) exceeds number of experts ({logits.shape[-1]})")
    if not np.all(np.isfinite(logits)):
        raise ValueError("router logits must be finite")
    order = np.argsort(-logits, kind="stable")
    return [int(i) for i in order[:k]]


def softmax(x: np.ndarray) -> np.ndarray:
    x = x - np.max(x)
    e = np.exp(x)
    return e / e.sum()


def build_model(spec: ModelSpec) -> ToyMoE:
    """Deterministic toy weights from spec.seed; uniform(-1, 1) scaled by 1/sqrt(d)."""
    spec.validate()
    if spec.hidden_dim > _MAX_HIDDEN:
        raise ConfigError(f"hidden_dim {spec.hidden_dim} exceeds toy-model limit {_MAX_HIDDEN}")
    if spec.vocab_size > _MAX_VOCAB:
        raise ConfigError(f"vocab_size {spec.vocab_size} exceeds toy-model limit {_MAX_VOCAB}")
    if spec.num_layers > _MAX_LAYERS:
        raise ConfigError(f"num_layers {spec.num_layers} exceeds toy-model limit {_MAX_LAYERS}")
    if spec.num_experts > _MAX_EXPERTS:
        raise ConfigError(f"num_experts {spec.num_experts} exceeds toy-model limit {_MAX_EXPERTS}")
    rng = np.random.default_rng(spec.seed)
    d, E, L, V = spec.hidden_dim, spec.num_experts, spec.num_layers, spec.vocab_size
    scale = 1.0 / np.sqrt(d)

    def mat(*shape):
        return rng.uniform(-1.0, 1.0, size=shape) * scale

    return ToyMoE(
        spec=spec,
        embed=mat(V, d),
        attn_q=mat(L, d, d),
        attn_k=mat(L, d, d),
        attn_v=mat(L, d, d),
        attn_o=mat(L, d, d),
        router=mat(L, d, E),
        expert_in=mat(L, E, d, d),
        expert_out=mat(L, E, d, d),
        head=mat(d, V),
    )


def _layer_norm(x: np.ndarray) -> np.ndarray:
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    return (x - mean) / np.sqrt(var + _LN_EPS)


def _positional(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    dim = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (dim // 2)) / d)
    enc = np.where(dim % 2 == 0, np.sin(angle), np.cos(angle))
    return enc


def forward(
    model: ToyMoE,
    tokens: list[int],
    k: int,
    replay_states: np.ndarray | None = None,
    reuse_gates: bool = False,
) -> ForwardResult:
    """Full causal forward over `tokens` with top-k routing at every position.

    If `replay_states` (an L x E logit matrix) is given, the final position's
    selection at each layer is top_k over those logits instead of the pass's
    own; gate weights still come from the pass's own logits unless
    `reuse_gates` is set. Other positions always use their own routing.
    """
    spec = model.spec
    if not tokens:
        raise ValueError("token sequence is empty")
    for t in tokens:
        if not (0 <= t < spec.vocab_size):
            raise ValueError(f"token {t} outside vocab [0, {spec.vocab_size})")
    if replay_states is not None:
        replay_states = np.asarray(replay_states, dtype=float)
        if replay_states.shape != (spec.num_layers, spec.num_experts):
            raise ValueError(
                f"router states shape {replay_states.shape} does not match "
                f"(num_layers, num_experts) = ({spec.num_layers}, {spec.num_experts})"
            )

    n, d = len(tokens), spec.hidden_dim
    x = model.embed[np.asarray(tokens)] + _positional(n, d)
    mask = np.triu(np.full((n, n), -np.inf), k=1)
    states = np.empty((spec.num_layers, spec.num_experts))
    selections: list[list[int]] = []

    for layer in range(spec.num_layers):
        h = _layer_norm(x)
        q = h @ model.attn_q[layer]
        key = h @ model.attn_k[layer]
        v = h @ model.attn_v[layer]
        scores = q @ key.T / np.sqrt(d) + mask
        scores -= scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn /= attn.sum(axis=-1, keepdims=True)
        x = x + (attn @ v) @ model.attn_o[layer]

        h2 = _layer_norm(x)
        logits = h2 @ model.router[layer]  # (n, E)
        states[layer] = logits[-1]

        moe_out = np.zeros_like(x)
        for pos in range(n):
            final = pos == n - 1
            if final and replay_states is not None:
                sel = top_k(replay_states[layer], k)
                gate_logits = replay_states[layer] if reuse_gates else logits[pos]
            else:
                sel = top_k(logits[pos], k)
                gate_logits = logits[pos]
            gates = softmax(gate_logits[sel])
            for g, e in zip(gates, sel):
                hidden = np.maximum(h2[pos] @ model.expert_in[layer, e], 0.0)
                moe_out[pos] += g * (hidden @ model.expert_out[layer, e])
            if final:
                selections.append(sel)
        x = x + moe_out

    out = _layer_norm(x[-1]) @ model.head * LOGIT_SCALE
    return ForwardResult(probs=softmax(out), router_states=states, selections=selections)


def little_forward(model: ToyMoE, tokens: list[int]) -> ForwardResult:
    """Reduced-width pass: k_little experts per layer, own routing throughout."""
    return forward(model, tokens, model.spec.k_little)


def big_forward(
    model: ToyMoE,
    tokens: list[int],
    router_states: np.ndarray,
    reuse_gates: bool = False,
) -> ForwardResult:
    """Full-width pass whose final-position selection replays recorded logits.

    Fixing the selection to top_k(router_states[layer], k_big) is what lets a
    prefetch plan built from the same logits be exact.
    """
    return forward(
        model, tokens, model.spec.k_big, replay_states=router_states, reuse_gates=reuse_gates
    )


def full_forward(model: ToyMoE, tokens: list[int]) -> ForwardResult:
    """Plain full-width pass, own routing; the offloading baseline's semantics."""
    return forward(model, tokens, model.spec.k_big)


def _sample(probs: np.ndarray, policy: PolicySpec, rng: np.random.Generator) -> int:
    if policy.sampling == SAMPLING_TEMPERATURE:
        logp = np.log(probs) / policy.temperature
        return int(rng.choice(len(probs), p=softmax(logp)))
    return int(np.argmax(probs))


def generate(
    model: ToyMoE,
    prompt: list[int],
    policy: PolicySpec,
    max_len: int,
    record_router_states: bool = False,
) -> tuple[list[int], list[TokenDecision]]:
    """Accept/fallback decoding loop.

    Each step runs the little pass; if its best probability clears gamma
    (strict >) the token is kept, otherwise the big pass regenerates it using
    the little pass's recorded router states. Stops at eos or max_len.

    `record_router_states` keeps the recorded logits on accepted tokens too
    (needed when exporting a timing trace); by default they are retained only
    for fallback tokens.
    """
    if not prompt:
        raise ValueError("prompt is empty")
    if max_len < 1:
        raise ValueError(f"max_len must be >= 1, got {max_len}")
    policy.validate()
    rng = np.random.default_rng(policy.sampling_seed)
    tokens = list(prompt)
    decisions: list[TokenDecision] = []
    while len(decisions) < max_len:
        little = little_forward(model, tokens)
        confidence = float(little.probs.max())
        if should_fallback(little.probs, policy.gamma):
            big = big_forward(
                model, tokens, little.router_states, reuse_gates=policy.reuse_little_gates
            )
            token = _sample(big.probs, policy, rng)
            decisions.append(
                TokenDecision(
                    token=token,
                    accepted_by=ACCEPTED_BIG,
                    confidence=confidence,
                    little_selections=little.selections,
                    big_selections=big.selections,
                    router_states=little.router_states,
                )
            )
        else:
            token = _sample(little.probs, policy, rng)
            decisions.append(
                TokenDecision(
                    token=token,
                    accepted_by=ACCEPTED_LITTLE,
                    confidence=confidence,
                    little_selections=little.selections,
                    router_states=little.router_states if record_router_states else None,
                )
            )
        tokens.append(token)
        if token == model.spec.eos_token:
            break
    return tokens, decisions
