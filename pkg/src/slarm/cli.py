"""Command line entry points.

slarm run        sweep (resolution, speed, seed) cells and export artifacts
slarm radio-map  build a radio map CSV from an exported occupancy PGM
slarm accuracy   compare an estimated map directory against a truth directory
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .experiment import ExperimentConfig, run_experiment
from .grid import OccupancyGrid
from .metrics import radio_map_accuracy
from .radio import RadioMap, build_radio_map, write_radio_csv, write_radio_matrix_csv
from .world import load_scenario_file


def _parse_floats(text: str) -> list[float]:
    return [float(tok) for tok in text.split(",") if tok]


def _parse_seeds(text: str) -> list[int]:
    """Accept '1,2,5' or an inclusive range '1..10'."""
    if ".." in text:
        lo, hi = text.split("..")
        return list(range(int(lo), int(hi) + 1))
    return [int(tok) for tok in text.split(",") if tok]


def _cmd_run(args) -> int:
    cfg = ExperimentConfig(
        scenario_path=args.scenario,
        resolutions=_parse_floats(args.resolutions),
        speeds=_parse_floats(args.speeds),
        seeds=_parse_seeds(args.seeds),
        particles=args.particles,
        epsilon_db=args.epsilon_db,
        mode=args.mode,
        out_dir=args.out,
        scan_rate_hz=args.scan_rate,
        expansion_radius=args.expansion_radius,
        calibration_runs=args.calibration_runs,
        max_steps=args.max_steps,
        jobs=args.jobs,
    )
    results, errors = run_experiment(cfg)
    for res in results:
        row = res.metrics_row()
        status = f"ERROR {res.error}" if res.error else (
            f"coverage={row['coverage_rate']:.3f} "
            f"accuracy={row['radio_accuracy_pct']:.2f}% "
            f"time={row['exploration_time_s']:.1f}s")
        print(f"{res.key():40s} {status}")
    print(f"wrote artifacts to {cfg.out_dir} ({len(results)} cells, "
          f"{errors} failed)")
    return 2 if errors else 0


def _cmd_radio_map(args) -> int:
    scenario = load_scenario_file(args.scenario)
    grid = OccupancyGrid.from_pgm(args.grid)
    radio = build_radio_map(grid, scenario)
    write_radio_csv(radio, args.out)
    if args.matrix:
        write_radio_matrix_csv(radio, args.matrix)
    print(f"wrote {args.out}")
    return 0


def _load_map_pair(path_spec: str) -> tuple[np.ndarray, RadioMap]:
    """A directory holding one *occupancy*.pgm and one *radio_matrix*.csv,
    or the two files given as 'map.pgm,matrix.csv'."""
    if "," in path_spec:
        pgm_path, matrix_path = (Path(p) for p in path_spec.split(",", 1))
    else:
        root = Path(path_spec)
        pgms = sorted(root.glob("*occupancy*.pgm"))
        matrices = sorted(root.glob("*radio_matrix*.csv"))
        if len(pgms) != 1 or len(matrices) != 1:
            raise SystemExit(
                f"{root}: need exactly one occupancy PGM and one radio matrix "
                f"CSV (found {len(pgms)} / {len(matrices)}); pass the files "
                f"explicitly as 'map.pgm,matrix.csv'")
        pgm_path, matrix_path = pgms[0], matrices[0]
    grid = OccupancyGrid.from_pgm(pgm_path)
    rows = []
    with open(matrix_path) as fh:
        for line in fh:
            rows.append([float(tok) for tok in line.strip().split(",")])
    gains = np.array(rows)[::-1].T  # rows were written top-down
    if gains.shape != grid.shape:
        raise SystemExit(f"{matrix_path}: shape {gains.shape} does not match "
                         f"grid {grid.shape}")
    radio = RadioMap(delta=grid.delta, x_max=grid.x_max, y_max=grid.y_max,
                     fc_ghz=0.0, gain_db=gains, path_loss_db=-gains,
                     los=np.where(np.isfinite(gains), 1, -1).astype(np.int8))
    return grid.tristate(), radio


def _cmd_accuracy(args) -> int:
    est_tri, est_radio = _load_map_pair(args.est)
    truth_tri, truth_radio = _load_map_pair(args.truth)
    pct = radio_map_accuracy(est_tri, est_radio, truth_tri, truth_radio,
                             epsilon_db=args.epsilon_db)
    print(f"accuracy: {pct:.2f}%")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="slarm")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment sweep")
    run.add_argument("--scenario", required=True)
    run.add_argument("--resolutions", required=True,
                     help="comma-separated cell sizes in meters")
    run.add_argument("--speeds", required=True,
                     help="comma-separated robot speeds in m/s")
    run.add_argument("--particles", type=int, default=30)
    run.add_argument("--seeds", required=True, help="'1..10' or '1,2,3'")
    run.add_argument("--epsilon-db", type=float, default=1.0)
    run.add_argument("--mode", choices=["theoretical", "simulational", "both"],
                     default="both")
    run.add_argument("--out", required=True)
    run.add_argument("--scan-rate", type=float, default=10.0)
    run.add_argument("--expansion-radius", type=float, default=0.1)
    run.add_argument("--calibration-runs", type=int, default=5)
    run.add_argument("--max-steps", type=int, default=None)
    run.add_argument("--jobs", type=int, default=1)
    run.set_defaults(func=_cmd_run)

    radio = sub.add_parser("radio-map",
                           help="radio map CSV from an occupancy PGM")
    radio.add_argument("--grid", required=True)
    radio.add_argument("--scenario", required=True)
    radio.add_argument("--out", required=True)
    radio.add_argument("--matrix", default=None,
                       help="also write the grid-shaped gain matrix here")
    radio.set_defaults(func=_cmd_radio_map)

    acc = sub.add_parser("accuracy",
                         help="accuracy of an estimated map vs ground truth")
    acc.add_argument("--est", required=True)
    acc.add_argument("--truth", required=True)
    acc.add_argument("--epsilon-db", type=float, default=1.0)
    acc.set_defaults(func=_cmd_accuracy)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
