"""Command-line driver: functional runs, trace runs, synthesis, sweeps.

Every run writes a manifest.json recording resolved configs, applied
overrides and seeds; rerunning with the same flags reproduces every CSV and
decision log byte for byte. Outputs carry no timestamps by design.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, replace
from pathlib import Path

from .config import (
    ConfigError,
    HardwareSpec,
    ModelSpec,
    PolicySpec,
    data_path,
    load_config_file,
    parse_bytes,
)
from .engine import write_event_log
from .metrics import RunMetrics, run_pair, write_metrics_csv
from .toymoe import ACCEPTED_BIG, build_model, generate
from .trace import (
    calibration_trace,
    gen_synthetic,
    load_synthetic_config,
    load_trace,
    record_from_model,
    save_trace,
)

SWEEP_KINDS = ("gamma", "k_little", "bandwidth", "lookahead")

_PACKAGED = {
    "model": "olmoe_desk.json",
    "hw": "rtx4080.json",
    "policy": "policy_default.json",
}


@dataclass
class RunManifest:
    subcommand: str
    configs: dict
    overrides: dict
    seeds: dict
    grid: list | None
    artifacts: list


def _resolve_config(kind: str, path: str | None) -> tuple[str, Path]:
    if path is None:
        name = _PACKAGED[kind]
        return f"packaged:{name}", data_path(name)
    return path, Path(path)


def _load_specs(args) -> tuple[ModelSpec, HardwareSpec, PolicySpec, dict, dict]:
    """Resolve config files and apply flag overrides; returns specs + manifest bits."""
    configs = {}
    model_label, model_path = _resolve_config("model", args.model)
    hw_label, hw_path = _resolve_config("hw", args.hw)
    policy_label, policy_path = _resolve_config("policy", args.policy)
    configs["model"], configs["hw"], configs["policy"] = model_label, hw_label, policy_label

    model = load_config_file(model_path).get("model")
    hw = load_config_file(hw_path).get("hardware")
    policy = load_config_file(policy_path).get("policy")
    if model is None:
        raise ConfigError(f"{model_path}: no model object")
    if hw is None:
        raise ConfigError(f"{hw_path}: no hardware object")
    if policy is None:
        raise ConfigError(f"{policy_path}: no policy object")

    overrides = {}
    if getattr(args, "seed", None) is not None:
        model = replace(model, seed=args.seed)
        policy = replace(policy, sampling_seed=args.seed)
        overrides["seed"] = args.seed
    if getattr(args, "gamma", None) is not None:
        policy = replace(policy, gamma=args.gamma)
        overrides["gamma"] = args.gamma
    if getattr(args, "k_little", None) is not None:
        model = replace(model, k_little=args.k_little)
        overrides["k_little"] = args.k_little
    if getattr(args, "lookahead", None) is not None:
        hw = replace(hw, lookahead_depth=args.lookahead)
        overrides["lookahead"] = args.lookahead
    model.validate()
    hw.validate()
    policy.validate()
    return model, hw, policy, configs, overrides


def _write_manifest(out_dir: Path, manifest: RunManifest) -> None:
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")


def _parse_prompt(text: str) -> list[int]:
    if text.startswith("@"):
        text = Path(text[1:]).read_text()
    parts = text.replace(",", " ").split()
    if not parts:
        raise ConfigError("prompt is empty")
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"prompt must be integer token ids: {exc}") from exc


def _out_dir(args) -> Path:
    out = Path(args.out if args.out else "moesim-out")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ----------------------------------------------------------------------
# subcommands


def cmd_run(args) -> int:
    model, hw, policy, configs, overrides = _load_specs(args)
    out = _out_dir(args)
    prompt = _parse_prompt(args.prompt)
    toy = build_model(model)
    tokens, decisions = generate(
        toy, prompt, policy, args.max_len, record_router_states=True
    )
    records = record_from_model(decisions)
    flags = [d.accepted_by == ACCEPTED_BIG for d in decisions]
    events = [] if args.event_log else None
    _, _, row = run_pair(
        records, model, hw, policy, fallback_flags=flags, event_log=events
    )
    write_metrics_csv(out / "metrics.csv", [row])
    with open(out / "decisions.jsonl", "w") as fh:
        for i, dec in enumerate(decisions):
            fh.write(
                json.dumps(
                    {
                        "t": i,
                        "token": dec.token,
                        "accepted_by": dec.accepted_by,
                        "confidence": dec.confidence,
                    }
                )
                + "\n"
            )
    artifacts = ["metrics.csv", "decisions.jsonl"]
    if events is not None:
        write_event_log(out / "events.log", events)
        artifacts.append("events.log")
    _write_manifest(
        out,
        RunManifest(
            subcommand="run",
            configs=configs,
            overrides={**overrides, "prompt": prompt, "max_len": args.max_len},
            seeds={"model": model.seed, "sampling": policy.sampling_seed},
            grid=None,
            artifacts=artifacts + ["manifest.json"],
        ),
    )
    print(
        f"generated {len(decisions)} tokens ({sum(flags)} fallbacks), "
        f"speedup {row.speedup_measured:.3f}x measured / "
        f"{row.speedup_analytic:.3f}x analytic -> {out}"
    )
    return 0


def cmd_run_trace(args) -> int:
    model, hw, policy, configs, overrides = _load_specs(args)
    out = _out_dir(args)
    records = load_trace(args.trace)
    if not records:
        raise ConfigError(f"{args.trace}: trace is empty")
    events = [] if args.event_log else None
    _, _, row = run_pair(records, model, hw, policy, event_log=events)
    write_metrics_csv(out / "metrics.csv", [row])
    artifacts = ["metrics.csv"]
    if events is not None:
        write_event_log(out / "events.log", events)
        artifacts.append("events.log")
    configs["trace"] = args.trace
    _write_manifest(
        out,
        RunManifest(
            subcommand="run-trace",
            configs=configs,
            overrides=overrides,
            seeds={"sampling": policy.sampling_seed},
            grid=None,
            artifacts=artifacts + ["manifest.json"],
        ),
    )
    print(
        f"replayed {len(records)} tokens (r={row.fallback_ratio:.3f}), "
        f"speedup {row.speedup_measured:.3f}x measured / "
        f"{row.speedup_analytic:.3f}x analytic -> {out}"
    )
    return 0


def cmd_gen_trace(args) -> int:
    if args.synth:
        cfg, n_cfg = load_synthetic_config(args.synth)
    else:
        cfg, n_cfg = load_synthetic_config(data_path("calibration_trace.json"))
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed)
    n = args.n if args.n is not None else (n_cfg if n_cfg is not None else 1000)
    records = gen_synthetic(cfg, n)
    out = Path(args.out if args.out else "trace.jsonl")
    if out.parent and not out.parent.exists():
        out.parent.mkdir(parents=True, exist_ok=True)
    save_trace(out, records)
    mean_conf = (
        sum(r.confidence for r in records) / len(records) if records else float("nan")
    )
    print(
        f"wrote {len(records)} tokens to {out} "
        f"(layers={cfg.num_layers}, experts={cfg.num_experts}, "
        f"mean confidence {mean_conf:.4f})"
    )
    return 0


def _materialize_trace(source) -> list:
    kind = source[0]
    if kind == "file":
        return load_trace(source[1])
    if kind == "synthetic":
        from .trace import synthetic_from_dict

        return gen_synthetic(synthetic_from_dict(source[1]), source[2])
    return calibration_trace()


_WORKER_STATE: dict = {}


def _sweep_init(source, model, hw, policy):
    _WORKER_STATE["records"] = _materialize_trace(source)
    _WORKER_STATE["base"] = (model, hw, policy)


def _sweep_point(task) -> RunMetrics:
    kind, value = task
    records = _WORKER_STATE["records"]
    model, hw, policy = _WORKER_STATE["base"]
    return _point_metrics(records, model, hw, policy, kind, value)


def _point_metrics(records, model, hw, policy, kind, value) -> RunMetrics:
    if kind == "gamma":
        _, _, row = run_pair(records, model, hw, policy, gamma=float(value))
    elif kind == "k_little":
        k = int(value)
        flags = [False] * len(records) if k == model.k_big else None
        _, _, row = run_pair(
            records, model, hw, policy, fallback_flags=flags, k_little=k
        )
    elif kind == "bandwidth":
        hw2 = replace(
            hw, pcie_bandwidth=float(parse_bytes(value, "sweep.bandwidth"))
        ).validate()
        _, _, row = run_pair(records, model, hw2, policy)
    elif kind == "lookahead":
        hw2 = replace(hw, lookahead_depth=int(value)).validate()
        _, _, row = run_pair(records, model, hw2, policy)
    else:
        raise ConfigError(f"unknown sweep kind {kind!r}")
    return row


def _parse_grid(kind: str, text: str) -> list:
    values = [v.strip() for v in text.split(",") if v.strip()]
    if not values:
        raise ConfigError("sweep grid is empty")
    try:
        if kind == "gamma":
            return [float(v) for v in values]
        if kind in ("k_little", "lookahead"):
            return [int(v) for v in values]
    except ValueError as exc:
        raise ConfigError(f"sweep grid for {kind}: {exc}") from exc
    return values  # bandwidth keeps suffixed strings


def _plot_sweep(path: Path, kind: str, grid: list, rows: list[RunMetrics]) -> None:
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    labels = [str(g) for g in grid]
    x = range(len(rows))
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(x, [r.speedup_measured for r in rows], "o-", label="measured")
    ax1.plot(x, [r.speedup_analytic for r in rows], "s--", label="analytic")
    ax1.set_xticks(list(x), labels)
    ax1.set_xlabel(kind)
    ax1.set_ylabel("speedup over full baseline")
    ax1.legend()
    ax2.plot(x, [r.stall_share for r in rows], "o-", label="stall share")
    ax2.plot(x, [r.fallback_ratio for r in rows], "s--", label="fallback ratio")
    ax2.set_xticks(list(x), labels)
    ax2.set_xlabel(kind)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def cmd_sweep(args) -> int:
    model, hw, policy, configs, overrides = _load_specs(args)
    out = _out_dir(args)
    grid = _parse_grid(args.kind, args.grid)
    if args.trace:
        source = ("file", args.trace)
        configs["trace"] = args.trace
    else:
        source = ("calibration",)
        configs["trace"] = "packaged:calibration_trace.json"

    tasks = [(args.kind, v) for v in grid]
    if args.jobs > 1:
        with ProcessPoolExecutor(
            max_workers=args.jobs,
            initializer=_sweep_init,
            initargs=(source, model, hw, policy),
        ) as pool:
            rows = list(pool.map(_sweep_point, tasks))
    else:
        records = _materialize_trace(source)
        rows = [
            _point_metrics(records, model, hw, policy, args.kind, v) for v in grid
        ]

    write_metrics_csv(out / "sweep.csv", rows)
    artifacts = ["sweep.csv"]
    if args.plot:
        _plot_sweep(out / "sweep.png", args.kind, grid, rows)
        artifacts.append("sweep.png")
    _write_manifest(
        out,
        RunManifest(
            subcommand="sweep",
            configs=configs,
            overrides={**overrides, "kind": args.kind, "jobs": args.jobs},
            seeds={"sampling": policy.sampling_seed},
            grid=list(grid),
            artifacts=artifacts + ["manifest.json"],
        ),
    )
    print(f"swept {args.kind} over {len(grid)} points -> {out / 'sweep.csv'}")
    return 0


# ----------------------------------------------------------------------
# argument parsing


def _add_common(parser: argparse.ArgumentParser, with_trace: bool = False) -> None:
    parser.add_argument("--model", help="model config JSON (default: packaged)")
    parser.add_argument("--hw", help="hardware config JSON (default: packaged)")
    parser.add_argument("--policy", help="policy config JSON (default: packaged)")
    if with_trace:
        parser.add_argument("--trace", help="trace file (.jsonl or .jsonl.gz)")
    parser.add_argument("--out", help="output directory")
    parser.add_argument("--seed", type=int, help="override model and sampling seeds")
    parser.add_argument("--gamma", type=float, help="override fallback threshold")
    parser.add_argument(
        "--k-little", dest="k_little", type=int, help="override reduced expert count"
    )
    parser.add_argument(
        "--lookahead", type=int, help="override prefetch lookahead depth"
    )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="moesim",
        description=(
            "Simulate offloading-based MoE decoding with big-little experts, "
            "confidence fallback and router-replay prefetching."
        ),
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="functional generation plus timing")
    _add_common(p_run)
    p_run.add_argument("--prompt", default="1,2,3,4", help="token ids, or @file")
    p_run.add_argument("--max-len", dest="max_len", type=int, default=16)
    p_run.add_argument(
        "--event-log", dest="event_log", action="store_true", help="dump events.log"
    )
    p_run.set_defaults(func=cmd_run)

    p_rt = sub.add_parser("run-trace", help="timing over a recorded trace")
    _add_common(p_rt, with_trace=True)
    p_rt.add_argument(
        "--event-log", dest="event_log", action="store_true", help="dump events.log"
    )
    p_rt.set_defaults(func=cmd_run_trace, required_trace=True)

    p_gt = sub.add_parser("gen-trace", help="synthesize a workload trace")
    p_gt.add_argument("--synth", help="synthetic workload config JSON")
    p_gt.add_argument("--n", type=int, help="number of tokens")
    p_gt.add_argument("--seed", type=int, help="override generator seed")
    p_gt.add_argument("--out", help="output trace path (default trace.jsonl)")
    p_gt.set_defaults(func=cmd_gen_trace)

    p_sw = sub.add_parser("sweep", help="grid sweep emitting one CSV row per point")
    _add_common(p_sw, with_trace=True)
    p_sw.add_argument("--kind", choices=SWEEP_KINDS, required=True)
    p_sw.add_argument(
        "--grid", required=True, help="comma-separated grid values for --kind"
    )
    p_sw.add_argument("--jobs", type=int, default=1, help="concurrent grid points")
    p_sw.add_argument("--plot", action="store_true", help="also render sweep.png")
    p_sw.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "required_trace", False) and not args.trace:
        parser.error("run-trace requires --trace")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
