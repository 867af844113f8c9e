"""Aggregation, the analytic speedup model, sweeps, and the CSV contract."""

import csv

import numpy as np
import pytest

from moesim.config import ConfigError, HardwareSpec, ModelSpec, PolicySpec
from moesim.engine import PASS_BIG, PASS_FULL, PASS_LITTLE, PassBreakdown, TokenLatency
from moesim.metrics import (
    CSV_COLUMNS,
    aggregate,
    analytic_speedup,
    gamma_sweep,
    little_size_sweep,
    run_pair,
    write_metrics_csv,
)
from moesim.trace import SyntheticTraceConfig, gen_synthetic

MODEL = ModelSpec(
    num_layers=4, num_experts=16, k_big=4, k_little=2,
    hidden_dim=16, vocab_size=32,
    expert_bytes=2 * 1024**2, dense_bytes_per_layer=1024**2,
)
HW = HardwareSpec(
    hbm_capacity=100 * 1024**2, pcie_bandwidth=1024**3,
    pcie_fixed_latency=0.0, lookahead_depth=2, reserved=0,
)
TRACE = gen_synthetic(
    SyntheticTraceConfig(seed=12, num_layers=4, num_experts=16, k_big=4,
                         popularity_skew=0.4, reuse_prob=0.1),
    40,
)


def fake_pass(label, total, stall=0.0, hits=0, misses=0):
    return PassBreakdown(
        label=label, total=total, compute=total - stall, transfer_stall=stall,
        overlapped_transfer=0.0, layer_stalls=[stall], fresh_transfers=misses,
        hits=hits, misses=misses,
    )


def baseline_token(i, total=10.0, stall=6.0):
    return TokenLatency(index=i, fallback=False,
                        passes=[fake_pass(PASS_FULL, total, stall)])


class TestAnalyticSpeedup:
    def test_no_fallback_reduces_to_latency_ratio(self):
        assert analytic_speedup(T=2.0, T_l=1.0, T_b=0.0, r=0.0) == 2.0

    def test_hand_value_at_one_fifth_fallback(self):
        # 1 / (0.5405 + 0.21 * 0.459) = 1 / 0.63689
        v = analytic_speedup(T=1.0, T_l=0.5405, T_b=0.459, r=0.21)
        assert v == 1.0 / (0.5405 + 0.21 * 0.459)
        assert round(v, 3) == 1.570

    def test_full_fallback_with_equal_costs_halves_throughput(self):
        assert analytic_speedup(T=3.0, T_l=3.0, T_b=3.0, r=1.0) == 0.5

    def test_monotone_in_fallback_ratio(self):
        values = [analytic_speedup(1.0, 0.5, 0.9, r) for r in np.linspace(0, 1, 11)]
        assert all(a > b for a, b in zip(values, values[1:]))

    def test_input_validation(self):
        with pytest.raises(ValueError, match="positive"):
            analytic_speedup(0.0, 1.0, 1.0, 0.5)
        with pytest.raises(ValueError, match="positive"):
            analytic_speedup(1.0, 0.0, 1.0, 0.5)
        with pytest.raises(ValueError, match="ratio"):
            analytic_speedup(1.0, 1.0, 1.0, 1.5)
        with pytest.raises(ValueError, match="T_b"):
            analytic_speedup(1.0, 1.0, 0.0, 0.5)


class TestAggregate:
    def test_hand_computed_summary(self):
        # baseline: four tokens of 10. run under test: two accepted tokens
        # (little pass 4), two fallbacks (little 5 + big 7). so r = 0.5,
        # T = 10, T_l = 4 (accepted only), T_b = 7,
        # measured = 40 / (4 + 4 + 12 + 12) = 1.25,
        # analytic = 10 / (4 + 0.5 * 7) = 4/3.
        baseline = [baseline_token(i) for i in range(4)]
        primary = [
            TokenLatency(0, False, [fake_pass(PASS_LITTLE, 4.0, hits=8)]),
            TokenLatency(1, True, [fake_pass(PASS_LITTLE, 5.0, stall=1.0, hits=6, misses=2),
                                   fake_pass(PASS_BIG, 7.0, stall=2.0, hits=16)]),
            TokenLatency(2, False, [fake_pass(PASS_LITTLE, 4.0, hits=8)]),
            TokenLatency(3, True, [fake_pass(PASS_LITTLE, 5.0, stall=1.0, hits=6, misses=2),
                                   fake_pass(PASS_BIG, 7.0, stall=2.0, hits=16)]),
        ]
        m = aggregate(baseline, primary, gamma=0.7, k_little=2)
        assert m.fallback_ratio == 0.5
        assert m.T == 10.0
        assert m.T_l == 4.0
        assert m.T_b == 7.0
        assert m.speedup_measured == 40.0 / 32.0
        assert m.speedup_analytic == 10.0 / 7.5
        assert m.stall_share == 6.0 / 32.0  # (1 + 2) stall per fallback token
        assert m.cache_hit_rate == 60.0 / 64.0
        assert m.gamma == 0.7 and m.k_little == 2

    def test_all_fallback_uses_all_littles_for_t_l(self):
        baseline = [baseline_token(i) for i in range(2)]
        primary = [
            TokenLatency(0, True, [fake_pass(PASS_LITTLE, 3.0), fake_pass(PASS_BIG, 8.0)]),
            TokenLatency(1, True, [fake_pass(PASS_LITTLE, 5.0), fake_pass(PASS_BIG, 8.0)]),
        ]
        m = aggregate(baseline, primary, gamma=1.0, k_little=2)
        assert m.fallback_ratio == 1.0
        assert m.T_l == 4.0  # mean over every token, since none were accepted

    def test_no_fallback_reports_zero_big_latency(self):
        baseline = [baseline_token(0)]
        primary = [TokenLatency(0, False, [fake_pass(PASS_LITTLE, 4.0)])]
        m = aggregate(baseline, primary, gamma=0.0, k_little=2)
        assert m.fallback_ratio == 0.0 and m.T_b == 0.0
        assert m.speedup_analytic == 10.0 / 4.0

    def test_stream_length_mismatch_rejected(self):
        short = [TokenLatency(0, False, [fake_pass(PASS_LITTLE, 4.0)])]
        with pytest.raises(ValueError, match="differ"):
            aggregate([baseline_token(0), baseline_token(1)], short, gamma=0.5, k_little=2)
        with pytest.raises(ValueError, match="non-empty"):
            aggregate([], [], gamma=0.5, k_little=2)


class TestRunPair:
    def test_gamma_extremes(self):
        _, primary, m0 = run_pair(TRACE, MODEL, HW, PolicySpec(gamma=0.0))
        assert m0.fallback_ratio == 0.0
        assert all(len(t.passes) == 1 for t in primary)
        _, primary, m1 = run_pair(TRACE, MODEL, HW, PolicySpec(gamma=1.0))
        assert m1.fallback_ratio == 1.0
        assert all(len(t.passes) == 2 for t in primary)
        assert m0.speedup_measured > m1.speedup_measured

    def test_injected_flags_override_confidences(self):
        flags = [i % 4 == 0 for i in range(len(TRACE))]
        _, primary, m = run_pair(TRACE, MODEL, HW, PolicySpec(gamma=0.7),
                                 fallback_flags=flags)
        assert m.fallback_ratio == sum(flags) / len(flags)
        assert [t.fallback for t in primary] == flags

    def test_measured_and_analytic_agree_on_a_steady_trace(self):
        # low-variance workload: the per-token decomposition should price the
        # stream within a few percent
        trace = gen_synthetic(
            SyntheticTraceConfig(seed=5, num_layers=4, num_experts=16, k_big=4,
                                 popularity_skew=0.2, reuse_prob=0.05),
            200,
        )
        _, _, m = run_pair(trace, MODEL, HW, PolicySpec(gamma=0.7))
        assert abs(m.speedup_measured - m.speedup_analytic) / m.speedup_analytic < 0.05

    def test_predictive_gate_runs_the_full_model(self):
        policy = PolicySpec(prefetch_strategy="PredictiveGate", prediction_accuracy=0.8)
        _, primary, m = run_pair(TRACE, MODEL, HW, policy)
        assert m.fallback_ratio == 0.0
        assert all(p.label == PASS_FULL for t in primary for p in t.passes)

    def test_k_little_override_validated(self):
        with pytest.raises(ConfigError, match="k_little"):
            run_pair(TRACE, MODEL, HW, PolicySpec(), k_little=9)

    def test_empty_trace_rejected(self):
        with pytest.raises(ValueError, match="empty"):
            run_pair([], MODEL, HW, PolicySpec())


class TestSweeps:
    def test_gamma_sweep_fallback_monotone(self):
        rows = gamma_sweep(TRACE, MODEL, HW, PolicySpec(), [0.0, 0.5, 0.7, 0.9])
        assert [r.gamma for r in rows] == [0.0, 0.5, 0.7, 0.9]
        ratios = [r.fallback_ratio for r in rows]
        assert ratios[0] == 0.0
        assert all(a <= b for a, b in zip(ratios, ratios[1:]))
        speeds = [r.speedup_measured for r in rows]
        assert all(a >= b for a, b in zip(speeds, speeds[1:]))

    def test_gamma_sweep_validates_grid(self):
        with pytest.raises(ValueError, match="empty"):
            gamma_sweep(TRACE, MODEL, HW, PolicySpec(), [])
        with pytest.raises(ConfigError, match="gamma"):
            gamma_sweep(TRACE, MODEL, HW, PolicySpec(), [0.5, 1.5])

    def test_little_size_sweep_full_width_is_the_baseline(self):
        rows = little_size_sweep(TRACE, MODEL, HW, PolicySpec(gamma=0.7), [2, 4])
        assert [r.k_little for r in rows] == [2, 4]
        full = rows[-1]
        # k_little == k_big: the reduced pass is the baseline pass and no
        # token falls back, so the streams are identical step for step
        assert full.fallback_ratio == 0.0
        assert full.speedup_measured == 1.0
        # both narrower widths see the same confidence-driven fallback pattern
        assert rows[0].fallback_ratio == gamma_sweep(
            TRACE, MODEL, HW, PolicySpec(), [0.7]
        )[0].fallback_ratio

    def test_little_size_sweep_validates_grid(self):
        with pytest.raises(ConfigError, match="k_little"):
            little_size_sweep(TRACE, MODEL, HW, PolicySpec(), [0])


class TestCsvContract:
    def test_header_is_pinned(self):
        assert CSV_COLUMNS == [
            "gamma", "k_little", "fallback_ratio", "T", "T_l", "T_b",
            "speedup_measured", "speedup_analytic", "stall_share", "cache_hit_rate",
        ]

    def test_written_file_round_trips(self, tmp_path):
        rows = gamma_sweep(TRACE, MODEL, HW, PolicySpec(), [0.0, 0.7])
        path = tmp_path / "metrics.csv"
        write_metrics_csv(path, rows)
        lines = path.read_text().splitlines()
        assert lines[0] == ",".join(CSV_COLUMNS)
        assert len(lines) == 3
        with open(path) as fh:
            parsed = list(csv.DictReader(fh))
        for row, parsed_row in zip(rows, parsed):
            # repr-formatted floats parse back to the exact same values
            assert float(parsed_row["speedup_measured"]) == row.speedup_measured
            assert float(parsed_row["T_l"]) == row.T_l
            assert int(parsed_row["k_little"]) == row.k_little
