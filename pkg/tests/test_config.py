"""Config parsing, validation, and derived cost/capacity quantities."""

import json

import pytest

from moesim.config import (
    ConfigError,
    CostTable,
    ExpertId,
    HardwareSpec,
    ModelSpec,
    PolicySpec,
    data_path,
    derive_costs,
    hardware_from_dict,
    hbm_expert_slots,
    load_config_file,
    model_from_dict,
    parse_bytes,
    policy_from_dict,
    validate,
)

MIB = 1024**2
GIB = 1024**3


class TestParseBytes:
    def test_plain_int_passthrough(self):
        assert parse_bytes(12345) == 12345
        assert parse_bytes(0) == 0

    def test_binary_suffixes(self):
        assert parse_bytes("64MiB") == 64 * MIB
        assert parse_bytes("16GiB") == 16 * GIB
        assert parse_bytes("1KiB") == 1024
        assert parse_bytes("2TiB") == 2 * 1024**4

    def test_decimal_suffixes(self):
        assert parse_bytes("1.5KB") == 1500
        assert parse_bytes("2MB") == 2_000_000
        assert parse_bytes("3GB") == 3_000_000_000

    def test_bandwidth_per_second_suffix_tolerated(self):
        assert parse_bytes("16GiB/s") == 16 * GIB
        assert parse_bytes("64GB/s") == 64 * 10**9

    def test_case_and_whitespace(self):
        assert parse_bytes(" 64 mib ") == 64 * MIB
        assert parse_bytes("128B") == 128

    def test_bare_numeric_string(self):
        assert parse_bytes("123") == 123

    def test_float_input_truncates(self):
        assert parse_bytes(10.9) == 10

    def test_rejects_negative(self):
        with pytest.raises(ConfigError):
            parse_bytes(-1)

    def test_rejects_bool(self):
        with pytest.raises(ConfigError):
            parse_bytes(True)

    def test_rejects_unknown_unit(self):
        with pytest.raises(ConfigError, match="XiB"):
            parse_bytes("64XiB")

    def test_rejects_garbage(self):
        with pytest.raises(ConfigError):
            parse_bytes("lots of bytes")
        with pytest.raises(ConfigError):
            parse_bytes([64])

    def test_error_names_field(self):
        with pytest.raises(ConfigError, match="hardware.hbm_capacity"):
            parse_bytes("??", field_name="hardware.hbm_capacity")


class TestExpertId:
    def test_ordering_is_layer_then_expert(self):
        assert ExpertId(0, 5) < ExpertId(1, 0)
        assert ExpertId(2, 1) < ExpertId(2, 3)
        assert sorted([ExpertId(1, 0), ExpertId(0, 9), ExpertId(0, 2)]) == [
            ExpertId(0, 2),
            ExpertId(0, 9),
            ExpertId(1, 0),
        ]

    def test_hashable_and_printable(self):
        assert len({ExpertId(0, 1), ExpertId(0, 1), ExpertId(1, 1)}) == 2
        assert str(ExpertId(3, 7)) == "L3E7"


class TestModelSpec:
    def test_half_width_little_config_is_valid(self):
        spec = ModelSpec(num_layers=16, num_experts=64, k_big=4, k_little=2)
        assert validate(spec) is spec

    def test_k_little_defaults_to_half_of_k_big(self):
        assert ModelSpec(num_layers=2, num_experts=16, k_big=8).k_little == 4
        # floor division, never below one
        assert ModelSpec(num_layers=2, num_experts=16, k_big=1).k_little == 1

    def test_k_little_exceeding_k_big_rejected(self):
        with pytest.raises(ConfigError, match="k_little"):
            ModelSpec(num_layers=2, num_experts=16, k_big=4, k_little=5).validate()

    def test_k_big_exceeding_num_experts_rejected(self):
        with pytest.raises(ConfigError, match="k_big"):
            ModelSpec(num_layers=2, num_experts=4, k_big=8).validate()

    def test_structural_invariants(self):
        with pytest.raises(ConfigError, match="num_layers"):
            ModelSpec(num_layers=0, num_experts=4, k_big=2).validate()
        with pytest.raises(ConfigError, match="vocab_size"):
            ModelSpec(num_layers=1, num_experts=4, k_big=2, vocab_size=1).validate()
        with pytest.raises(ConfigError, match="expert_bytes"):
            ModelSpec(num_layers=1, num_experts=4, k_big=2, expert_bytes=0).validate()
        with pytest.raises(ConfigError, match="eos_token"):
            ModelSpec(num_layers=1, num_experts=4, k_big=2, vocab_size=8, eos_token=8).validate()

    def test_validate_is_idempotent(self):
        spec = ModelSpec(num_layers=4, num_experts=8, k_big=2)
        assert validate(validate(spec)) is spec


class TestHardwareSpec:
    def test_defaults_are_valid(self):
        assert HardwareSpec().validate() is not None

    def test_invariants(self):
        with pytest.raises(ConfigError, match="pcie_bandwidth"):
            HardwareSpec(pcie_bandwidth=0).validate()
        with pytest.raises(ConfigError, match="pcie_fixed_latency"):
            HardwareSpec(pcie_fixed_latency=-1e-5).validate()
        with pytest.raises(ConfigError, match="lookahead_depth"):
            HardwareSpec(lookahead_depth=0).validate()
        with pytest.raises(ConfigError, match="gpu_attn_compute"):
            HardwareSpec(gpu_attn_compute=0).validate()


class TestPolicySpec:
    def test_defaults_are_valid(self):
        assert PolicySpec().validate().gamma == 0.7

    def test_gamma_out_of_range(self):
        with pytest.raises(ConfigError, match="gamma"):
            PolicySpec(gamma=1.2).validate()
        with pytest.raises(ConfigError, match="gamma"):
            PolicySpec(gamma=-0.1).validate()

    def test_gamma_endpoints_allowed(self):
        assert PolicySpec(gamma=0.0).validate().gamma == 0.0
        assert PolicySpec(gamma=1.0).validate().gamma == 1.0

    def test_unknown_strategy_rejected(self):
        with pytest.raises(ConfigError, match="prefetch_strategy"):
            PolicySpec(prefetch_strategy="Oracle").validate()

    def test_prediction_accuracy_range(self):
        with pytest.raises(ConfigError, match="prediction_accuracy"):
            PolicySpec(prediction_accuracy=1.5).validate()

    def test_only_lru_eviction(self):
        with pytest.raises(ConfigError, match="eviction"):
            PolicySpec(eviction="FIFO").validate()

    def test_temperature_must_be_positive_when_sampling(self):
        with pytest.raises(ConfigError, match="temperature"):
            PolicySpec(sampling="Temperature", temperature=0.0).validate()
        assert PolicySpec(sampling="Temperature", temperature=0.8).validate()


class TestDeriveCosts:
    def test_transfer_time_is_size_over_bandwidth(self):
        # 64 MiB / 16 GiB/s = 2^26 / 2^34 s = 1/256 s, exact in binary
        model = ModelSpec(num_layers=1, num_experts=4, k_big=2, expert_bytes=64 * MIB)
        hw = HardwareSpec(pcie_bandwidth=16 * GIB, pcie_fixed_latency=0.0)
        assert derive_costs(model, hw).t_xfer == 0.00390625

    def test_fixed_latency_is_additive(self):
        model = ModelSpec(num_layers=1, num_experts=4, k_big=2, expert_bytes=64 * MIB)
        hw = HardwareSpec(pcie_bandwidth=16 * GIB, pcie_fixed_latency=1e-4)
        assert derive_costs(model, hw).t_xfer == 0.00390625 + 1e-4

    def test_compute_costs_pass_through(self):
        model = ModelSpec(num_layers=1, num_experts=4, k_big=2)
        hw = HardwareSpec(gpu_expert_compute=3e-4, gpu_attn_compute=2.4e-3)
        costs = derive_costs(model, hw)
        assert costs == CostTable(t_xfer=costs.t_xfer, t_exp=3e-4, t_attn=2.4e-3)

    def test_pure_function_of_inputs(self):
        model = ModelSpec(num_layers=2, num_experts=8, k_big=4)
        hw = HardwareSpec()
        assert derive_costs(model, hw) == derive_costs(model, hw)


class TestHbmExpertSlots:
    def test_budget_floor_division(self):
        # 16 GiB - 16 * 128 MiB dense - 6 GiB reserved = 8 GiB -> 128 slots of 64 MiB
        model = ModelSpec(
            num_layers=16, num_experts=64, k_big=8,
            expert_bytes=64 * MIB, dense_bytes_per_layer=128 * MIB,
        )
        hw = HardwareSpec(hbm_capacity=16 * GIB, reserved=6 * GIB)
        assert hbm_expert_slots(model, hw) == 128

    def test_exactly_k_big_slots_is_accepted(self):
        model = ModelSpec(
            num_layers=1, num_experts=8, k_big=4,
            expert_bytes=1 * MIB, dense_bytes_per_layer=0,
        )
        hw = HardwareSpec(hbm_capacity=4 * MIB, reserved=0)
        assert hbm_expert_slots(model, hw) == 4

    def test_below_one_active_set_rejected(self):
        model = ModelSpec(
            num_layers=1, num_experts=8, k_big=4,
            expert_bytes=1 * MIB, dense_bytes_per_layer=0,
        )
        hw = HardwareSpec(hbm_capacity=3 * MIB, reserved=0)
        with pytest.raises(ConfigError, match="k_big"):
            hbm_expert_slots(model, hw)


class TestDictLoaders:
    def test_byte_strings_accepted_in_model(self):
        spec = model_from_dict(
            {"num_layers": 2, "num_experts": 8, "k_big": 4, "expert_bytes": "64MiB"}
        )
        assert spec.expert_bytes == 64 * MIB

    def test_bandwidth_string_accepted_in_hardware(self):
        spec = hardware_from_dict({"pcie_bandwidth": "16GiB/s", "hbm_capacity": "16GiB"})
        assert spec.pcie_bandwidth == float(16 * GIB)
        assert spec.hbm_capacity == 16 * GIB

    def test_unknown_field_rejected(self):
        with pytest.raises(ConfigError, match="unknown fields"):
            model_from_dict({"num_layers": 2, "num_experts": 8, "k_big": 4, "gpu": "big"})
        with pytest.raises(ConfigError, match="unknown fields"):
            policy_from_dict({"gamma": 0.7, "fallback": True})

    def test_invalid_values_surface_validation_errors(self):
        with pytest.raises(ConfigError, match="gamma"):
            policy_from_dict({"gamma": 2.0})


class TestConfigFiles:
    def test_round_trip_all_three_objects(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(
            json.dumps(
                {
                    "model": {"num_layers": 4, "num_experts": 16, "k_big": 4,
                              "expert_bytes": "32MiB"},
                    "hardware": {"pcie_bandwidth": "8GiB/s", "lookahead_depth": 3},
                    "policy": {"gamma": 0.5},
                }
            )
        )
        loaded = load_config_file(path)
        assert loaded["model"].expert_bytes == 32 * MIB
        assert loaded["model"].k_little == 2
        assert loaded["hardware"].lookahead_depth == 3
        assert loaded["policy"].gamma == 0.5

    def test_partial_file_loads_present_objects_only(self, tmp_path):
        path = tmp_path / "just_policy.json"
        path.write_text(json.dumps({"policy": {"gamma": 0.9}}))
        loaded = load_config_file(path)
        assert set(loaded) == {"policy"}

    def test_empty_object_rejected(self, tmp_path):
        path = tmp_path / "empty.json"
        path.write_text("{}")
        with pytest.raises(ConfigError, match="no model/hardware/policy"):
            load_config_file(path)

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "bad.json"
        path.write_text("{not json")
        with pytest.raises(ConfigError, match="invalid JSON"):
            load_config_file(path)


class TestPackagedConfigs:
    def test_packaged_defaults_load_and_compose(self):
        model = load_config_file(data_path("olmoe_desk.json"))["model"]
        hw = load_config_file(data_path("rtx4080.json"))["hardware"]
        policy = load_config_file(data_path("policy_default.json"))["policy"]
        assert model.num_layers == 16 and model.num_experts == 64
        assert model.k_big == 8 and model.k_little == 4
        assert policy.gamma == 0.7
        # (16 GiB - 16 * 8 MiB - 6 GiB) / 64 MiB = 10112 / 64 = 158
        assert hbm_expert_slots(model, hw) == 158
        costs = derive_costs(model, hw)
        assert costs.t_xfer == 0.00390625 + 1e-4
        assert costs.t_attn == 0.0024
        assert costs.t_exp == 0.0003
