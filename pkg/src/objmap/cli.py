"""Command-line entry points.

    objmap sim      --out scenario.yaml        write the default scenario
    objmap run      --scenario S --out DIR     full in-process run
    objmap backend  --bind HOST:PORT ...       networked backend
    objmap sensor   --scenario S --camera K --connect HOST:PORT
    objmap replay   --stream FILE --out DIR    re-run a recorded stream
    objmap eval     --run NAME=DIR ... --out DIR

Every threshold flag can also be set via an OBJMAP_<FLAG> environment
variable (e.g. OBJMAP_TAU_DIST=0.4); a value in the scenario/run config
file takes precedence over flags.
"""

from __future__ import annotations

import argparse
import os
import sys

from .evaluation import run_eval
from .pipeline import (
    RunConfig,
    VARIANT_ICP_LOCAL,
    VARIANTS,
    replay_run,
    run_pipeline,
    run_sensor,
    serve_backend,
)
from .pose_est import PoseConfig
from .sim import ConfigError, CorruptFile, default_scenario, load_scenario, save_scenario
from .tracker import TrackerConfig


def _env_default(flag: str, fallback):
    raw = os.environ.get("OBJMAP_" + flag.upper().replace("-", "_"))
    if raw is None:
        return fallback
    return type(fallback)(raw)


def _add_threshold_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--tau-dist", type=float, default=_env_default("tau_dist", 0.30))
    p.add_argument("--tau-track", type=float, default=_env_default("tau_track", 0.75))
    p.add_argument("--tau-occ", type=int, default=_env_default("tau_occ", 2))
    p.add_argument("--sync-window-ms", type=float, default=_env_default("sync_window_ms", 250.0))
    p.add_argument("--ransac-iters", type=int, default=_env_default("ransac_iters", 100))
    p.add_argument("--icp-max-iters", type=int, default=_env_default("icp_max_iters", 50))
    p.add_argument("--variant", choices=VARIANTS, default=_env_default("variant", VARIANT_ICP_LOCAL))
    p.add_argument("--mode", choices=["mesh", "submap"], default=_env_default("mode", "mesh"),
                   help="object representation; submap enables segment transmission")


def _run_config(args, scenario) -> RunConfig:
    return RunConfig(
        scenario=scenario,
        variant=args.variant,
        representation=args.mode,
        pose=PoseConfig(
            tau_dist=args.tau_dist,
            ransac_iters=args.ransac_iters,
            icp_max_iters=args.icp_max_iters,
        ),
        tracker=TrackerConfig(tau_track=args.tau_track),
        sync_window_ms=args.sync_window_ms,
        submap_tau_occ=args.tau_occ,
    )


def _load_scenario_arg(spec: str, seed: int | None):
    if spec == "default":
        scenario = default_scenario(seed=seed if seed is not None else 0)
    else:
        scenario = load_scenario(spec)
        if seed is not None:
            from dataclasses import replace

            scenario = replace(scenario, seed=seed)
    return scenario


def _addr(spec: str) -> tuple[str, int]:
    host, _, port = spec.rpartition(":")
    return host or "127.0.0.1", int(port)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="objmap", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_sim = sub.add_parser("sim", help="write the default scenario config")
    p_sim.add_argument("--out", required=True)
    p_sim.add_argument("--seed", type=int, default=0)
    p_sim.add_argument("--duration", type=float, default=60.0)

    p_run = sub.add_parser("run", help="full in-process run: sensors + backend")
    p_run.add_argument("--scenario", default="default")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--out", required=True)
    _add_threshold_flags(p_run)

    p_backend = sub.add_parser("backend", help="networked backend")
    p_backend.add_argument("--bind", default="127.0.0.1:7707")
    p_backend.add_argument("--sensors", type=int, required=True)
    p_backend.add_argument("--scenario", default="default")
    p_backend.add_argument("--seed", type=int, default=None)
    p_backend.add_argument("--out", default=None)
    _add_threshold_flags(p_backend)

    p_sensor = sub.add_parser("sensor", help="networked sensor node")
    p_sensor.add_argument("--scenario", default="default")
    p_sensor.add_argument("--seed", type=int, default=None)
    p_sensor.add_argument("--camera", type=int, required=True)
    p_sensor.add_argument("--connect", default="127.0.0.1:7707")
    _add_threshold_flags(p_sensor)

    p_replay = sub.add_parser("replay", help="re-run a recorded stream file")
    p_replay.add_argument("--stream", required=True)
    p_replay.add_argument("--scenario", default="default")
    p_replay.add_argument("--seed", type=int, default=None)
    p_replay.add_argument("--out", required=True)
    _add_threshold_flags(p_replay)

    p_eval = sub.add_parser("eval", help="evaluate completed runs")
    p_eval.add_argument("--run", action="append", required=True, metavar="NAME=DIR")
    p_eval.add_argument("--out", default=None)
    p_eval.add_argument("--iou", action="store_true")
    p_eval.add_argument("--iou-stride", type=int, default=10)

    args = parser.parse_args(argv)
    try:
        if args.command == "sim":
            save_scenario(default_scenario(seed=args.seed, duration_s=args.duration), args.out)
            print(f"wrote {args.out}")
        elif args.command == "run":
            scenario = _load_scenario_arg(args.scenario, args.seed)
            result = run_pipeline(_run_config(args, scenario), args.out)
            print(f"{len(result.snapshots)} snapshots -> {result.out_dir}")
        elif args.command == "backend":
            scenario = _load_scenario_arg(args.scenario, args.seed)
            result = serve_backend(_addr(args.bind), args.sensors, _run_config(args, scenario),
                                   args.out)
            print(f"{len(result.snapshots)} snapshots from {args.sensors} sensors")
        elif args.command == "sensor":
            scenario = _load_scenario_arg(args.scenario, args.seed)
            sent = run_sensor(_run_config(args, scenario), args.camera, _addr(args.connect))
            print(f"sensor {args.camera}: {sent} payload bytes sent")
        elif args.command == "replay":
            scenario = _load_scenario_arg(args.scenario, args.seed)
            result = replay_run(args.stream, _run_config(args, scenario), args.out)
            print(f"{len(result.snapshots)} snapshots -> {result.out_dir}")
        elif args.command == "eval":
            runs = dict(spec.split("=", 1) for spec in args.run)
            report = run_eval(runs, out_dir=args.out, iou=args.iou, iou_stride=args.iou_stride)
            for row in report["variants"]:
                print(
                    f"{row['name']}: n={row['n']} "
                    f"E_trans={row['e_trans']:.3f}cm E_rot={row['e_rot']:.3f}deg"
                )
    except (ConfigError, CorruptFile, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
