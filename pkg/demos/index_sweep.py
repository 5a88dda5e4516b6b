"""Estimate the refractive index from several initial guesses on one simulated dataset.

Usage::

    python3 demos/index_sweep.py OUT_DIR [--laps 1] [--n0 1.31 1.35 ...]

Writes one ``n_<n0>.csv`` per initial value (time, n, standard deviation)
and prints when each run settles within 0.005 of the true index.
"""

import argparse
from pathlib import Path

from refractive_vio import simulator as sim
from refractive_vio.dataset import read_dataset, write_n_series
from refractive_vio.filter import FilterConfig
from refractive_vio.runner import first_entry_time, run_estimator


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("out", type=Path)
    parser.add_argument("--laps", type=float, default=1.0)
    parser.add_argument("--pattern", choices=sim.PATTERNS, default="rectangle")
    parser.add_argument("--n0", type=float, nargs="+", default=[1.31, 1.33, 1.35])
    args = parser.parse_args()

    cfg = sim.SimConfig()
    data_dir = args.out / f"{args.pattern}_{args.laps:g}laps"
    if not data_dir.exists():
        traj = sim.SimTrajectory(args.pattern, laps=args.laps)
        sim.generate_dataset(sim.scene_for(cfg), traj, cfg, data_dir)
    dataset = read_dataset(data_dir)

    for n0 in args.n0:
        records = run_estimator(dataset, FilterConfig(n0=n0))
        write_n_series(records, args.out / f"n_{n0:.3f}.csv")
        entry = first_entry_time(records, cfg.n_true - 0.005, cfg.n_true + 0.005)
        settled = "not settled" if entry is None else f"settled after {entry:.1f} s"
        print(f"n0={n0:.3f}  final n={records[-1].n:.5f} +- {records[-1].n_std:.5f}  {settled}")


if __name__ == "__main__":
    main()
