"""Command line entry points.

    teleop serve  --scene scenes/arena.json --port 8765
    teleop replay --log run.gstl --port 8765
    teleop bench  map-speed | fps | metrics ...

Every flag can also come from the environment with a TELEOP_ prefix
(TELEOP_PORT=9000, TELEOP_MODE=coupled, ...); explicit flags win over
environment values. Exit codes: 0 clean shutdown, 2 configuration error,
3 runtime fault.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from typing import Optional, Sequence

from .service import EXIT_CLEAN, EXIT_CONFIG, EXIT_FAULT, ConfigError, ServeConfig, TeleopService

ENV_PREFIX = "TELEOP_"


def _env_default(env: dict, name: str, fallback):
    raw = env.get(ENV_PREFIX + name.upper().replace("-", "_"))
    return fallback if raw is None else raw


def _parse_resolution(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        width, height = int(w), int(h)
    except ValueError:
        raise argparse.ArgumentTypeError(f"resolution must look like 672x376, got {text!r}")
    if width <= 0 or height <= 0:
        raise argparse.ArgumentTypeError("resolution must be positive")
    return width, height


def build_parser(env: Optional[dict] = None) -> argparse.ArgumentParser:
    env = dict(os.environ if env is None else env)

    def dflt(name, fallback, cast=str):
        value = _env_default(env, name, fallback)
        if value is None or cast is str or not isinstance(value, str):
            return value
        try:
            return cast(value)
        except ValueError:
            raise ConfigError(
                f"invalid {ENV_PREFIX}{name.upper().replace('-', '_')}={value!r}"
            ) from None

    parser = argparse.ArgumentParser(prog="teleop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add_service_flags(p, with_scene: bool):
        if with_scene:
            p.add_argument("--scene", default=dflt("scene", None), help="scene description JSON")
            p.add_argument(
                "--sensor-hz", type=float, default=dflt("sensor_hz", 15.0, float),
                help="sensor frame rate (default 15)",
            )
            p.add_argument("--record", default=dflt("record", None), help="record frames to this log file")
        else:
            p.add_argument("--log", default=dflt("log", None), help="frame log to replay")
        p.add_argument("--host", default=dflt("host", "127.0.0.1"))
        p.add_argument("--port", type=int, default=dflt("port", 8765, int))
        p.add_argument(
            "--resolution", type=_parse_resolution,
            default=dflt("resolution", "672x376"), help="sensor resolution WxH (default 672x376)",
        )
        p.add_argument(
            "--mode", choices=("decoupled", "coupled"), default=dflt("mode", "decoupled"),
            help="render-scheduling mode (default decoupled)",
        )
        p.add_argument(
            "--max-gaussians", type=int, default=dflt("max_gaussians", 200_000, int),
        )
        p.add_argument("--seed", type=int, default=dflt("seed", 0, int))
        p.add_argument("--ui-dir", default=dflt("ui_dir", None), help="serve viewer static files from this directory")

    serve = sub.add_parser("serve", help="run the live simulation service")
    add_service_flags(serve, with_scene=True)

    replay = sub.add_parser("replay", help="serve a recorded frame log")
    add_service_flags(replay, with_scene=False)

    bench = sub.add_parser("bench", help="metrics and benchmarks")
    bench_sub = bench.add_subparsers(dest="bench_command", required=True)

    speed = bench_sub.add_parser("map-speed", help="per-keyframe quality convergence over a log")
    speed.add_argument("--log", required=True, help="frame log file")
    speed.add_argument("--out", default="report.csv", help="CSV output path")
    speed.add_argument("--seed", type=int, default=dflt("seed", 0, int))

    fps = bench_sub.add_parser("fps", help="viewer frame-time distribution per scheduling mode")
    fps.add_argument("--mode", choices=("decoupled", "coupled"), required=True)
    fps.add_argument("--gaussians", type=int, default=50_000)
    fps.add_argument("--seconds", type=float, default=5.0)
    fps.add_argument("--idle", action="store_true", help="leave the optimizer idle (baseline run)")
    fps.add_argument("--out", default="fps.csv", help="CSV output path")

    metrics = bench_sub.add_parser("metrics", help="PSNR/SSIM between two image files")
    metrics.add_argument("--ref", required=True)
    metrics.add_argument("--test", required=True)

    return parser


def _run_service(config: ServeConfig) -> int:
    try:
        service = TeleopService(config)
        service.start()
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        code = service.wait()
        return EXIT_CLEAN if code is None else code
    except KeyboardInterrupt:
        service.stop()
        return EXIT_CLEAN


def _cmd_serve(args) -> int:
    if args.scene is None:
        print("error: --scene is required (or set TELEOP_SCENE)", file=sys.stderr)
        return EXIT_CONFIG
    width, height = args.resolution
    return _run_service(
        ServeConfig(
            scene_path=args.scene,
            host=args.host,
            port=args.port,
            width=width,
            height=height,
            mode=args.mode,
            sensor_hz=args.sensor_hz,
            max_gaussians=args.max_gaussians,
            seed=args.seed,
            record_path=args.record,
            ui_dir=args.ui_dir,
        )
    )


def _cmd_replay(args) -> int:
    if args.log is None:
        print("error: --log is required (or set TELEOP_LOG)", file=sys.stderr)
        return EXIT_CONFIG
    width, height = args.resolution
    return _run_service(
        ServeConfig(
            replay_path=args.log,
            host=args.host,
            port=args.port,
            width=width,
            height=height,
            mode=args.mode,
            max_gaussians=args.max_gaussians,
            seed=args.seed,
            ui_dir=args.ui_dir,
        )
    )


def _cmd_bench_map_speed(args) -> int:
    from . import bench
    from .wire import FrameLogReader, WireError, frame_from_message

    try:
        reader = FrameLogReader(args.log)
    except (OSError, WireError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    frames = (frame_from_message(m) for m in reader)
    reports = bench.measure_map_speed(frames, seed=args.seed)
    bench.write_map_speed_csv(reports, args.out)
    for rep in reports:
        t20 = "not reached" if rep.time_to_psnr20_s is None else f"{rep.time_to_psnr20_s:.2f}s"
        print(
            f"keyframe {rep.keyframe_id}: final {rep.final_psnr_db:.2f} dB / "
            f"ssim {rep.final_ssim:.3f}, 95% at {rep.time_to_95pct_final_psnr_s:.2f}s, "
            f"20 dB at {t20}"
        )
    print(f"wrote {args.out}")
    return EXIT_CLEAN


def _cmd_bench_fps(args) -> int:
    from . import bench

    report = bench.measure_viewer_fps(
        args.mode, args.gaussians, args.seconds, optimizer_active=not args.idle
    )
    bench.write_fps_csv([report], args.out)
    print(
        f"{report.mode}: median {report.median_frame_time_s * 1e3:.1f} ms, "
        f"p95 {report.p95_frame_time_s * 1e3:.1f} ms, {report.viewer_fps:.1f} fps, "
        f"optimizer {report.optimizer_iters_per_s:.1f} iters/s"
    )
    print(f"wrote {args.out}")
    return EXIT_CLEAN


def _cmd_bench_metrics(args) -> int:
    from . import bench

    try:
        ref = bench.load_image(args.ref)
        test = bench.load_image(args.test)
        result = {"psnr_db": bench.psnr(ref, test), "ssim": bench.ssim(ref, test)}
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(json.dumps(result, sort_keys=True))
    return EXIT_CLEAN


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("TELEOP_LOG_LEVEL", "INFO"))
    try:
        args = build_parser().parse_args(argv)
        if args.command == "serve":
            return _cmd_serve(args)
        if args.command == "replay":
            return _cmd_replay(args)
        if args.bench_command == "map-speed":
            return _cmd_bench_map_speed(args)
        if args.bench_command == "fps":
            return _cmd_bench_fps(args)
        return _cmd_bench_metrics(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        return EXIT_CLEAN
    except Exception as exc:  # unexpected breakage = runtime fault
        logging.getLogger("teleop").exception("runtime fault")
        print(f"fault: {exc}", file=sys.stderr)
        return EXIT_FAULT


if __name__ == "__main__":
    sys.exit(main())
