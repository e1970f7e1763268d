"""Command-line surface: tdf, localize, simulate, evaluate, render.

Exit codes: 0 ok, 2 I/O error, 3 validation error, 4 initialization
failure.  With --json every command prints a machine-readable summary to
stdout; all commands are deterministic under fixed seeds and inputs.
"""

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import io as sio
from .pipeline import run_localization
from .polar import PolarGridSpec
from .semantic_map import ClassSet, NoRoadCellsError, build_tdf
from .sim import NoiseSpec, WorldSpec, generate_world, perturb_odometry, simulate_trajectory, synthesize_scan

EXIT_OK = 0
EXIT_IO = 2
EXIT_VALIDATION = 3
EXIT_INIT = 4

# fixed render palette (class index -> RGB); index 255 is unlabelled
PALETTE = {
    0: (120, 120, 126),  # road
    1: (222, 205, 160),  # terrain
    2: (70, 140, 66),    # vegetation
    3: (176, 58, 46),    # building
    255: (0, 0, 0),      # unlabelled
}
TRAJECTORY_COLOR_INDEX = 254
TRAJECTORY_COLOR = (255, 255, 0)


class CliError(Exception):
    def __init__(self, code, message):
        super().__init__(message)
        self.code = code


def _emit(args, summary, human_lines=()):
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        for line in human_lines:
            print(line)


# ---------------------------------------------------------------------------
# subcommands


def cmd_tdf(args):
    map_path = Path(args.map)
    try:
        semantic_map, _ = sio.load_map_bundle(map_path)
    except sio.FormatError as e:
        raise CliError(EXIT_VALIDATION, str(e)) from e
    out_path = Path(args.out) if args.out else map_path.with_suffix(".ctdf")
    classes = ClassSet()
    t0 = time.perf_counter()
    tdf = build_tdf(semantic_map, classes, args.trunc_radius)
    build_s = time.perf_counter() - t0
    try:
        sio.write_tdf_cache(out_path, tdf)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write TDF cache: {e}") from e
    source_counts = {
        name: int((semantic_map.cells == i).sum()) for i, name in enumerate(classes.names)
    }
    summary = {
        "out": str(out_path),
        "build_time_s": build_s,
        "source_cells": source_counts,
        "trunc_radius": args.trunc_radius,
    }
    _emit(
        args,
        summary,
        [f"built TDF in {build_s:.3f} s -> {out_path}"]
        + [f"  {k}: {v} source cells" for k, v in source_counts.items()],
    )
    return EXIT_OK


def cmd_localize(args):
    if args.config is None:
        raise CliError(EXIT_VALIDATION, "localize requires --config")
    config = sio.load_config(args.config)
    try:
        result = run_localization(
            config, threads=args.threads, seed=args.seed, fixed_scale=args.fixed_scale
        )
    except NoRoadCellsError as e:
        raise CliError(EXIT_INIT, str(e)) from e
    summary = result.summary()
    _emit(
        args,
        summary,
        [
            f"steps: {result.n_steps}, converged: {result.converged}"
            + (f" at t={result.convergence_time_s:.1f} s" if result.converged else ""),
            f"scale estimate: {result.scale_est:.4f} px/m",
            f"priors added: {result.n_priors} over {result.n_nodes} keyframes",
            f"result log: {result.result_log}",
            f"trajectory: {result.trajectory}",
        ],
    )
    return EXIT_OK


def _load_worldspec(path):
    try:
        raw = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise CliError(EXIT_VALIDATION, f"bad world spec: {e}") from e
    known = {
        "size", "scale_px_per_m", "road_style", "building_density", "tree_density",
        "seed", "road_width_px", "length_m", "frame_dt", "label_flip_prob",
        "point_dropout_prob", "odom_noise", "range_jitter_std",
    }
    unknown = set(raw) - known
    if unknown:
        raise CliError(EXIT_VALIDATION, f"unknown world spec key(s): {', '.join(sorted(unknown))}")
    return raw


def cmd_simulate(args):
    raw = _load_worldspec(args.worldspec)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    seed = args.seed if args.seed is not None else int(raw.get("seed", 0))
    try:
        wspec = WorldSpec(
            size=int(raw.get("size", 256)),
            scale_true=float(raw.get("scale_px_per_m", 2.0)),
            road_style=raw.get("road_style", "irregular"),
            building_density=float(raw.get("building_density", 0.5)),
            tree_density=float(raw.get("tree_density", 0.5)),
            seed=seed,
            road_width_px=float(raw.get("road_width_px", 5.0)),
        )
        noise = NoiseSpec(
            label_flip_prob=float(raw.get("label_flip_prob", 0.0)),
            point_dropout_prob=float(raw.get("point_dropout_prob", 0.0)),
            odom_noise=tuple(raw.get("odom_noise", (0.0, 0.0, 0.0))),
            range_jitter_std=float(raw.get("range_jitter_std", 0.0)),
        )
    except ValueError as e:
        raise CliError(EXIT_VALIDATION, str(e)) from e
    length_m = float(raw.get("length_m", 120.0))
    frame_dt = float(raw.get("frame_dt", 0.5))

    world = generate_world(wspec)
    traj = simulate_trajectory(world, length_m, seed)
    rng = np.random.default_rng(seed + 1)
    spec = PolarGridSpec()
    timestamps = np.arange(len(traj.poses)) * frame_dt
    frames = [
        synthesize_scan(world, pose, spec, noise, rng, timestamp=float(t))
        for pose, t in zip(traj.poses, timestamps)
    ]
    odom = perturb_odometry(traj.poses, noise, rng, timestamps=timestamps)

    map_path = out_dir / "map.pgm"
    sio.save_map_bundle(map_path, world.map)
    sio.write_poses_csv(out_dir / "gt_poses.csv", timestamps, traj.poses)
    sio.write_scan_stream(out_dir / "scans.sscn", frames)
    sio.write_odometry(out_dir / "odometry.txt", odom)
    run_cfg = sio.default_config_values()
    run_cfg.update(
        {
            "map": "map.pgm",
            "scans": "scans.sscn",
            "odometry": "odometry.txt",
            "ground_truth": "gt_poses.csv",
            "output_dir": "out",
            "tdf_cache": "map.ctdf",
            "frame_dt": frame_dt,
            "rng_seed": seed,
        }
    )
    sio.save_config(out_dir / "run_config.json", run_cfg)

    summary = {
        "out_dir": str(out_dir),
        "n_frames": len(frames),
        "trajectory_m": length_m,
        "truncated": traj.truncated,
        "scale_px_per_m": wspec.scale_true,
        "road_fraction": float((world.map.cells == 0).mean()),
    }
    _emit(
        args,
        summary,
        [
            f"world {wspec.size}x{wspec.size} @ {wspec.scale_true} px/m ({wspec.road_style})",
            f"{len(frames)} frames over {length_m:.0f} m -> {out_dir}",
        ],
    )
    return EXIT_OK


def cmd_evaluate(args):
    rows = sio.read_result_log(args.result_log)
    gt_ts, gt_poses = sio.read_poses_csv(args.ground_truth)
    scale = args.error_scale
    threshold = args.threshold

    errs = []
    for row in rows:
        if row["err_m"] is not None:
            errs.append((row["t"], row["err_m"] * scale, row["converged"], row["scale"]))
        else:
            idx = int(np.argmin(np.abs(gt_ts - row["t"])))
            err = float(np.hypot(row["x"] - gt_poses[idx][0], row["y"] - gt_poses[idx][1]))
            errs.append((row["t"], err * scale, row["converged"], row["scale"]))

    conv_rows = [e for e in errs if e[2]]
    if not conv_rows:
        summary = {"converged": False}
        _emit(args, summary, ["run never converged"])
        return EXIT_OK

    t_conv = conv_rows[0][0]
    t0 = errs[0][0]
    window = [e[1] for e in errs if t_conv <= e[0] <= t_conv + 20.0]
    post = [e[1] for e in errs if e[0] >= t_conv]
    mean_20s = float(np.mean(window)) if window else None
    mean_post = float(np.mean(post)) if post else None
    scale_est = conv_rows[-1][3]
    summary = {
        "converged": True,
        "convergence_time_s": float(t_conv - t0),
        "mean_err_20s": mean_20s,
        "mean_err_post_convergence": mean_post,
        "correct_convergence": bool(mean_20s is not None and mean_20s < threshold),
        "scale_est": scale_est,
    }
    if args.true_scale is not None:
        summary["scale_ratio"] = scale_est / args.true_scale
    _emit(
        args,
        summary,
        [
            f"converged at t={summary['convergence_time_s']:.1f} s",
            f"mean error first 20 s: {mean_20s:.2f} (threshold {threshold})",
            f"mean error after convergence: {mean_post:.2f}",
            f"correct convergence: {summary['correct_convergence']}",
        ],
    )
    return EXIT_OK


def cmd_render(args):
    from PIL import Image

    try:
        semantic_map, _ = sio.load_map_bundle(args.map)
    except sio.FormatError as e:
        raise CliError(EXIT_VALIDATION, str(e)) from e
    cells = semantic_map.cells
    indexed = cells.copy()

    clipped = 0
    if args.trajectory is not None:
        nodes = sio.read_trajectory_csv(args.trajectory)
        scale = semantic_map.scale_prior or 1.0
        pts = np.array([[n.pose[0], n.pose[1]] for n in nodes]) if nodes else np.zeros((0, 2))
        if len(pts):
            px = pts * scale + semantic_map.origin_px
            for i in range(len(px) - 1):
                steps = max(2, int(np.hypot(*(px[i + 1] - px[i]))) * 2)
                line = px[i] + np.linspace(0, 1, steps)[:, None] * (px[i + 1] - px[i])
                xi = np.round(line[:, 0]).astype(int)
                yi = np.round(line[:, 1]).astype(int)
                inside = (xi >= 0) & (xi < cells.shape[1]) & (yi >= 0) & (yi < cells.shape[0])
                clipped += int((~inside).sum())
                indexed[yi[inside], xi[inside]] = TRAJECTORY_COLOR_INDEX

    lut = np.zeros((256, 3), dtype=np.uint8)
    for idx, rgb in PALETTE.items():
        lut[idx] = rgb
    lut[TRAJECTORY_COLOR_INDEX] = TRAJECTORY_COLOR
    img = Image.fromarray(indexed, mode="P")
    img.putpalette(lut.reshape(-1).tolist())
    try:
        img.save(args.out, format="PNG", optimize=False, compress_level=6)
    except OSError as e:
        raise CliError(EXIT_IO, f"cannot write render: {e}") from e
    summary = {"out": str(args.out), "clipped_points": clipped}
    _emit(args, summary, [f"wrote {args.out} ({clipped} trajectory samples clipped)"])
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _common_flags(parser):
    parser.add_argument("--config", default=argparse.SUPPRESS, help="run config JSON")
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override RNG seed")
    parser.add_argument("--json", action="store_true", default=argparse.SUPPRESS,
                        help="print machine-readable JSON summary")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker threads for particle weighting")
    parser.add_argument("--fixed-scale", type=float, dest="fixed_scale",
                        default=argparse.SUPPRESS, help="pin the map scale (px/m)")


def build_parser():
    parser = argparse.ArgumentParser(prog="semloc", description=__doc__)
    _common_flags(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tdf", help="precompute the class-wise TDF cache for a map")
    _common_flags(p)
    p.add_argument("map", help="map raster (PGM/PNG with JSON sidecar)")
    p.add_argument("--trunc-radius", type=float, default=50.0)
    p.add_argument("-o", "--out", default=None, help="output cache path (default: <map>.ctdf)")
    p.set_defaults(func=cmd_tdf)

    p = sub.add_parser("localize", help="run the localization pipeline from a config")
    _common_flags(p)
    p.set_defaults(func=cmd_localize)

    p = sub.add_parser("simulate", help="generate a synthetic world + sensor streams")
    _common_flags(p)
    p.add_argument("worldspec", help="world spec JSON")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("evaluate", help="score a result log against ground truth")
    _common_flags(p)
    p.add_argument("result_log")
    p.add_argument("ground_truth")
    p.add_argument("--error-scale", type=float, default=1.0,
                   help="multiply errors before thresholding (e.g. px/m for cell units)")
    p.add_argument("--threshold", type=float, default=10.0,
                   help="correct-convergence limit in scaled error units")
    p.add_argument("--true-scale", type=float, default=None,
                   help="true map scale for the scale-ratio metric")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="render the class map (and a trajectory) to PNG")
    _common_flags(p)
    p.add_argument("map")
    p.add_argument("--trajectory", default=None)
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_render)
    return parser


_FLAG_DEFAULTS = {"config": None, "seed": None, "json": False, "threads": 1, "fixed_scale": None}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    for key, default in _FLAG_DEFAULTS.items():
        if not hasattr(args, key):
            setattr(args, key, default)
    try:
        return args.func(args)
    except CliError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.code
    except sio.ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except sio.FormatError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except FileNotFoundError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_IO
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
