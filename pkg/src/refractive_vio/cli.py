"""Command-line entry point: ``run``, ``simulate``, ``check-jacobians`` and ``rectify``.

Exit codes are 0 on success, 1 when a check or the estimator fails and 2 for
usage or input errors.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import camera as cm
from . import checks
from . import simulator as sim
from .dataset import (
    DatasetError,
    NoOverlapError,
    compute_ape,
    read_dataset,
    trajectory_length,
    write_n_series,
    write_pgm,
    write_state_log,
)
from .filter import FilterConfig, NoiseConfig
from .runner import noise_from_dataset, run_estimator
from .sensitivity import HeuristicParams

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


class UsageError(Exception):
    """Invalid arguments or input data; maps to exit code 2."""


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")


def _log(args, msg: str) -> None:
    if not getattr(args, "quiet", False):
        print(msg, file=sys.stderr)


# ---------------------------------------------------------------------------
# run


def build_run_config(args) -> tuple[FilterConfig, NoiseConfig]:
    try:
        heuristic = HeuristicParams(q=args.q, k=args.k)
        config = FilterConfig(
            n0=args.n0,
            n_std0=args.n_std0,
            estimate_n=not args.fixed_n,
            heuristic=heuristic,
            heuristic_mode=args.heuristic_mode,
            patch_size=args.patch_size,
            levels=args.levels,
            max_features=args.max_features,
            iekf_max_iter=args.iekf_max_iter,
            check_invariants=args.check_invariants,
        )
        noise = replace(NoiseConfig(), n_walk=args.n_walk)
    except ValueError as err:
        raise UsageError(str(err)) from None
    return config, noise


def cmd_run(args) -> int:
    config, noise = build_run_config(args)
    dataset = read_dataset(args.dataset)
    noise = noise_from_dataset(dataset, noise)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(
        out / "run_config.json",
        {
            "dataset": str(Path(args.dataset).resolve()),
            "filter": asdict(config),
            "noise": asdict(noise),
            "ape_start": args.ape_start,
            "max_frames": args.max_frames,
            # the estimator has no random component; the seed is kept for provenance
            "seed": args.seed,
        },
    )

    def progress(i, total, rec):
        if (i + 1) % 100 == 0 or i + 1 == total:
            _log(args, f"frame {i + 1}/{total}  t={rec.t_ns * 1e-9:.1f}s  n={rec.n:.5f}  features={rec.num_features}")

    t0 = time.perf_counter()
    records = run_estimator(dataset, config, noise, max_frames=args.max_frames, progress=progress)
    if not records:
        print(f"error: no frame was processed from {args.dataset}", file=sys.stderr)
        return EXIT_FAILURE
    write_state_log(records, out / "state.csv")
    write_n_series(records, out / "n_vs_time.csv")
    last = records[-1]
    summary = {
        "frames": len(records),
        "final_n": last.n,
        "final_n_std": last.n_std,
        "wall_time_s": time.perf_counter() - t0,
    }
    truth = dataset.groundtruth_records()
    if truth:
        try:
            ape = compute_ape(records, truth, align="se3", start_time=args.ape_start)
        except NoOverlapError as err:
            print(f"warning: APE skipped: {err}", file=sys.stderr)
        else:
            length = trajectory_length(dataset.groundtruth[1])
            report = ape.as_dict()
            report["trajectory_length"] = length
            report["rmse_percent_of_length"] = 100.0 * ape.rmse / length if length > 0 else float("nan")
            _write_json(out / "ape.json", report)
            summary["ape_rmse"] = ape.rmse
            summary["ape_percent"] = report["rmse_percent_of_length"]
    _write_json(out / "summary.json", summary)
    print(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}" for k, v in summary.items()))
    return EXIT_OK


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    try:
        traj = sim.SimTrajectory(args.pattern, period=args.period, laps=args.laps)
        config = sim.SimConfig(n_true=args.n_true, frame_rate=args.frame_rate, imu_rate=args.imu_rate, seed=args.seed, light=args.light)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out = Path(args.out)
    if out.exists() and any(out.iterdir()):
        raise UsageError(f"output directory {out} is not empty")

    def progress(i, total):
        if (i + 1) % 200 == 0 or i + 1 == total:
            _log(args, f"rendered {i + 1}/{total}")

    sim.generate_dataset(sim.scene_for(config, args.scene_seed), traj, config, out, progress=progress)
    _write_json(
        out / "simulation.json",
        {
            "pattern": args.pattern,
            "laps": args.laps,
            "period": args.period,
            "duration": traj.duration,
            "n_true": args.n_true,
            "frame_rate": args.frame_rate,
            "imu_rate": args.imu_rate,
            "seed": args.seed,
            "scene_seed": args.scene_seed,
            "light": args.light,
        },
    )
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# check-jacobians


def cmd_check_jacobians(args) -> int:
    t0 = time.perf_counter()
    results = checks.check_jacobians(seed=args.seed, trials=args.trials, perturb=args.perturb)
    elapsed = time.perf_counter() - t0
    width = max(len(r.name) for r in results)
    failed = False
    for r in results:
        ok = r.passed(args.tolerance)
        failed |= not ok
        print(f"{r.name:<{width}}  worst relative error {r.worst_error:.3e}  {'PASS' if ok else 'FAIL'}")
        if not ok:
            print(f"  failing input: {json.dumps(_jsonable(r.worst_input))}")
    print(f"{args.trials} trials in {elapsed:.2f}s")
    return EXIT_FAILURE if failed else EXIT_OK


# ---------------------------------------------------------------------------
# rectify


def cmd_rectify(args) -> int:
    if not 1.0 <= args.n <= 2.0:
        raise UsageError("--n must lie in [1, 2]")
    dataset = read_dataset(args.dataset)
    try:
        map_u, map_v, valid = cm.rectification_map(dataset.camera, args.n)
    except ValueError as err:
        raise UsageError(str(err)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for t, img in dataset.frames():
        rect = cm.remap_bilinear(img.astype(float), map_u, map_v, valid, fill=sim.MID_GRAY)
        write_pgm(out / f"{t}.pgm", np.clip(np.rint(rect), 0, 255).astype(np.uint8))
    print(f"wrote {dataset.num_frames} rectified frames to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser


def _positive_int(text: str) -> int:
    v = int(text)
    if v <= 0:
        raise argparse.ArgumentTypeError("must be a positive integer")
    return v


def _positive_float(text: str) -> float:
    v = float(text)
    if not v > 0:
        raise argparse.ArgumentTypeError("must be positive")
    return v


def build_parser() -> argparse.ArgumentParser:
    defaults = FilterConfig()
    heuristic = HeuristicParams()
    parser = argparse.ArgumentParser(
        prog="refractive-vio",
        description="Monocular visual-inertial odometry through a flat refractive port with online refractive index estimation.",
        allow_abbrev=False,
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("run", help="run the estimator on a dataset", allow_abbrev=False)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n0", type=float, default=defaults.n0, help="initial refractive index (default %(default)s)")
    p.add_argument("--n-std0", type=_positive_float, default=defaults.n_std0, help="initial index standard deviation (default %(default)s)")
    p.add_argument("--n-walk", type=float, default=NoiseConfig().n_walk, help="index random-walk density M_n in 1/sqrt(s) (default %(default)s)")
    p.add_argument("--fixed-n", action="store_true", help="keep the index fixed at --n0")
    p.add_argument(
        "--heuristic-mode",
        choices=("epipolar", "none", "zero"),
        default=defaults.heuristic_mode,
        help="index Jacobian weighting: epipolar sensitivity, constant 1, or constant 0 (default %(default)s)",
    )
    p.add_argument("--q", type=float, default=heuristic.q, help="sensitivity exponent on |sin 2theta| (default %(default)s)")
    p.add_argument("--k", type=float, default=heuristic.k, help="sensitivity exponent on the radius (default %(default)s)")
    p.add_argument("--patch-size", type=_positive_int, default=defaults.patch_size, help="patch side in pixels (default %(default)s)")
    p.add_argument("--levels", type=int, default=defaults.levels, help="coarsest pyramid level (default %(default)s)")
    p.add_argument("--max-features", type=int, default=defaults.max_features, help="tracked feature capacity (default %(default)s)")
    p.add_argument("--iekf-max-iter", type=_positive_int, default=defaults.iekf_max_iter, help="update iterations per frame (default %(default)s)")
    p.add_argument("--ape-start", type=float, default=0.0, help="ignore estimates earlier than this many seconds in the APE (default %(default)s)")
    p.add_argument("--max-frames", type=_positive_int, default=None, help="stop after this many frames")
    p.add_argument("--seed", type=int, default=0, help="random seed recorded with the outputs (default %(default)s)")
    p.add_argument("--check-invariants", action="store_true", help="assert covariance and quaternion invariants after every step")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("simulate", help="render a synthetic dataset", allow_abbrev=False)
    p.add_argument("--out", required=True, help="output dataset directory (created; must be empty)")
    p.add_argument("--pattern", choices=sim.PATTERNS, default="rectangle", help="trajectory shape (default %(default)s)")
    p.add_argument("--laps", type=_positive_float, default=3.0, help="number of laps (default %(default)s)")
    p.add_argument("--period", type=_positive_float, default=60.0, help="seconds per lap (default %(default)s)")
    p.add_argument("--light", choices=("good", "low"), default="good", help="lighting condition (default %(default)s)")
    p.add_argument("--n-true", type=float, default=1.33, help="refractive index used for rendering (default %(default)s)")
    p.add_argument("--frame-rate", type=_positive_float, default=10.0, help="camera rate in Hz (default %(default)s)")
    p.add_argument("--imu-rate", type=_positive_float, default=200.0, help="IMU rate in Hz (default %(default)s)")
    p.add_argument("--seed", type=int, default=0, help="IMU and image noise seed (default %(default)s)")
    p.add_argument("--scene-seed", type=int, default=None, help="wall texture seed (default: fixed pool texture)")
    p.add_argument("--quiet", action="store_true", help="suppress progress messages")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("check-jacobians", help="compare analytic camera Jacobians with finite differences", allow_abbrev=False)
    p.add_argument("--seed", type=int, default=0, help="random seed (default %(default)s)")
    p.add_argument("--trials", type=_positive_int, default=1000, help="random inputs per Jacobian (default %(default)s)")
    p.add_argument("--tolerance", type=_positive_float, default=checks.DEFAULT_TOLERANCE, help="maximum relative error (default %(default)s)")
    p.add_argument("--perturb", choices=checks.JACOBIAN_NAMES, default=None, help="scale one analytic Jacobian by 1+1e-3 to show the check catches it")
    p.set_defaults(func=cmd_check_jacobians)

    p = sub.add_parser("rectify", help="warp dataset frames to an equivalent in-air view", allow_abbrev=False)
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--n", type=float, required=True, help="refractive index to undo")
    p.add_argument("--out", required=True, help="output directory for rectified PGM frames")
    p.set_defaults(func=cmd_rectify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (UsageError, DatasetError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, ArithmeticError, np.linalg.LinAlgError) as err:
        print(f"error: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
