"""End-to-end experiment pipelines and the sweep harness.

Two pipelines per (resolution, speed, seed) cell:

* theoretical: coverage exploration over the true occupancy grid, radio map
  from the resulting values. No sensing error anywhere.
* simulational: the full loop. The robot drives cell-center to cell-center
  at speed v with exact actuation; the LiDAR fires at a fixed rate, so
  faster runs see fewer scans per meter. Each scan drives one particle
  filter update; per trajectory segment the best particle's freshly updated
  cells form a sub-map, and the estimated map is the latest-wins merge of
  all sub-maps. Obstacles sensed by the filter feed back into the coverage
  values so exploration avoids them.

Every random stream derives from the cell seed, so a cell is a pure function
of (config, seed).
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .coverage import (CoverageReport, init_coverage, run_coverage,
                       write_trajectory_csv)
from .grid import (OCC_THRESHOLD, OccupancyGrid, SubMap, dilate_occupied,
                   disc_radius_cells, merge_submaps)
from .metrics import exploration_time_s, radio_map_accuracy
from .radio import RadioMap, build_radio_map, write_radio_csv, write_radio_matrix_csv
from .slam import RbpfSlam, SlamParams, compute_ate
from .world import (OdometryReading, Scenario, load_scenario_file,
                    rasterize_ground_truth, simulate_lidar, wrap_angle)

MODE_THEORETICAL = "theoretical"
MODE_SIMULATIONAL = "simulational"

# RNG stream tags (seed, tag, ...).
_TAG_LIDAR = 1
_TAG_ODOM = 2
_TAG_COVERAGE = 6
_TAG_CALIBRATION = 9


@dataclass
class ExperimentConfig:
    scenario_path: str
    resolutions: list[float]
    speeds: list[float]
    seeds: list[int]
    particles: int = 30
    epsilon_db: float = 1.0
    mode: str = "both"
    out_dir: str = "out"
    scan_rate_hz: float = 10.0
    expansion_radius: float = 0.05
    expansion_radius_theoretical: float = 0.0
    calibration_runs: int = 5
    calibration_transitions: int = 40
    max_steps: int | None = None
    jobs: int = 1

    def __post_init__(self):
        if not self.resolutions or not self.speeds or not self.seeds:
            raise ValueError("resolutions, speeds, and seeds must be nonempty")
        if any(d <= 0 for d in self.resolutions):
            raise ValueError("resolutions must be positive")
        if any(v <= 0 for v in self.speeds):
            raise ValueError("speeds must be positive")
        if self.mode not in (MODE_THEORETICAL, MODE_SIMULATIONAL, "both"):
            raise ValueError(f"unknown mode {self.mode!r}")

    def modes(self) -> list[str]:
        if self.mode == "both":
            return [MODE_THEORETICAL, MODE_SIMULATIONAL]
        return [self.mode]


@dataclass
class CellResult:
    mode: str
    delta: float
    v: float
    seed: int
    coverage_rate: float = math.nan
    ate_mse: float | None = None
    ate_rmse: float | None = None
    radio_accuracy_pct: float = math.nan
    exploration_time_s: float = math.nan
    steps: int = 0
    error: str | None = None
    runtime_s: float = 0.0
    est_tri: np.ndarray | None = None
    est_radio: RadioMap | None = None
    trajectory: list = field(default_factory=list)
    coverage_report: CoverageReport | None = None
    pose_log: list = field(default_factory=list)
    state: object = None

    def key(self) -> str:
        return f"d{self.delta:g}_v{self.v:g}_s{self.seed}_{self.mode}"

    def metrics_row(self) -> dict:
        return {
            "mode": self.mode,
            "delta": self.delta,
            "v": self.v,
            "seed": self.seed,
            "coverage_rate": None if math.isnan(self.coverage_rate) else self.coverage_rate,
            "ate_mse": self.ate_mse,
            "ate_rmse": self.ate_rmse,
            "radio_accuracy_pct": None if math.isnan(self.radio_accuracy_pct) else self.radio_accuracy_pct,
            "exploration_time_s": None if math.isnan(self.exploration_time_s) else self.exploration_time_s,
            "steps": self.steps,
            "error": self.error,
        }


def _relative_pose(frm: np.ndarray, to: np.ndarray) -> tuple[float, float, float]:
    dx_g = to[0] - frm[0]
    dy_g = to[1] - frm[1]
    c, s = math.cos(frm[2]), math.sin(frm[2])
    return (c * dx_g + s * dy_g,
            -s * dx_g + c * dy_g,
            wrap_angle(to[2] - frm[2]))


class _SimulationRunner:
    """Drives the true robot, the LiDAR clock, and the particle filter."""

    def __init__(self, gt: OccupancyGrid, scenario: Scenario, slam: RbpfSlam,
                 v: float, scan_rate_hz: float, seed: int, r_cells: int,
                 border: np.ndarray, start_pose: np.ndarray):
        self.gt = gt
        self.scenario = scenario
        self.slam = slam
        self.v = v
        self.scan_period = 1.0 / scan_rate_hz
        self.seed = seed
        self.r_cells = r_cells
        self.border = border
        self.time = 0.0
        self.scan_index = 0
        self.waypoint = 0
        self.true_pose = start_pose.copy()
        self.last_slam_pose = start_pose.copy()
        self.est_poses: list[np.ndarray] = []
        self.true_poses: list[np.ndarray] = []
        self.submaps: list[SubMap] = []
        self.bumped = np.zeros(gt.shape, dtype=bool)
        self.overlay_occ = np.zeros(gt.shape, dtype=bool)
        self._bootstrap_scan()

    def _rng(self, tag: int, index: int):
        return np.random.default_rng((self.seed, tag, index))

    def _bootstrap_scan(self) -> None:
        scan = simulate_lidar(self.gt, self.true_pose, self.scenario.lidar,
                              self._rng(_TAG_LIDAR, 0), t=0)
        for particle in self.slam.particles:
            particle.grid.integrate_scan(particle.pose, scan, self.scenario.lidar)
        self.est_poses.append(self.true_pose.copy())
        self.true_poses.append(self.true_pose.copy())
        self.scan_index = 1
        self.next_scan = self.scan_period

    def hook(self, state, frm, to) -> bool:
        """Execute one cell transition and every scan that fires during it.

        A move into a truly occupied cell is a bump: the robot stays put,
        the cell is remembered as an obstacle, and the move is vetoed.
        """
        if self.gt.occupied_mask()[to[0] - 1, to[1] - 1]:
            self.bumped[to[0] - 1, to[1] - 1] = True
            return False
        x0, y0 = state.cell_center(frm)
        x1, y1 = state.cell_center(to)
        theta = math.atan2(y1 - y0, x1 - x0)
        self.true_pose[2] = theta  # instant turn at the cell center
        duration = state.delta / self.v
        t_start = self.time
        t_end = t_start + duration
        changed_any = False
        while self.next_scan <= t_end + 1e-12:
            frac = (self.next_scan - t_start) / duration
            self.true_pose[0] = x0 + frac * (x1 - x0)
            self.true_pose[1] = y0 + frac * (y1 - y0)
            odom_true = _relative_pose(self.last_slam_pose, self.true_pose)
            noise = self.scenario.odometry_noise
            rng_o = self._rng(_TAG_ODOM, self.scan_index)
            odom = OdometryReading(
                dx=odom_true[0] + (rng_o.normal(0, noise.sigma_dx) if noise.sigma_dx > 0 else 0.0),
                dy=odom_true[1] + (rng_o.normal(0, noise.sigma_dy) if noise.sigma_dy > 0 else 0.0),
                dtheta=odom_true[2] + (rng_o.normal(0, noise.sigma_dtheta) if noise.sigma_dtheta > 0 else 0.0),
            )
            scan = simulate_lidar(self.gt, self.true_pose, self.scenario.lidar,
                                  self._rng(_TAG_LIDAR, self.scan_index),
                                  t=self.scan_index)
            est = self.slam.step(scan, odom)
            self.est_poses.append(est)
            self.true_poses.append(self.true_pose.copy())
            self.last_slam_pose = self.true_pose.copy()
            changed_any = True
            self.scan_index += 1
            self.next_scan += self.scan_period
        self.true_pose[0], self.true_pose[1] = x1, y1
        self.time = t_end

        cells = self.slam.flush_touched()
        if len(cells):
            best = self.slam.best_particle()
            tri = best.grid.tristate().reshape(-1)[cells]
            self.submaps.append(SubMap(index=self.waypoint, cells=cells,
                                       tri=tri, path=[frm, to]))
        self.waypoint += 1

        if changed_any and self.slam.occupancy_dirty:
            # Hysteresis: cells stop counting as obstacles only after their
            # evidence decays well below the occupied threshold, otherwise
            # wall edges flickering around the threshold keep reopening
            # already swept lanes and force needless relocations.
            lo = self.slam.best_particle().grid.log_odds
            self.overlay_occ = (lo > OCC_THRESHOLD) \
                | (self.overlay_occ & (lo > OCC_THRESHOLD / 2.0))
            occ_inf = dilate_occupied(self.overlay_occ.astype(float),
                                      self.r_cells) == 1.0
            visited = state.values == 0.5
            state.values[:] = np.where(
                visited, 0.5,
                np.where(occ_inf | self.border | self.bumped, 1.0, 0.0))
            self.slam.occupancy_dirty = False
        return True

    def estimated_tri(self, shape) -> np.ndarray:
        return merge_submaps(shape, self.submaps)


def run_theoretical_cell(scenario: Scenario, delta: float, v: float,
                         seed: int, epsilon_db: float, r_e: float = 0.0,
                         max_steps: int | None = None,
                         truth: tuple[OccupancyGrid, RadioMap] | None = None) -> CellResult:
    started = time.perf_counter()
    result = CellResult(mode=MODE_THEORETICAL, delta=delta, v=v, seed=seed)
    gt, truth_radio = truth if truth is not None else build_truth(scenario, delta)
    state = init_coverage(gt.tristate(), mse=0.0, delta=delta,
                          x_max=scenario.x_max, y_max=scenario.y_max,
                          r_e=r_e,
                          rng_seed=np.random.default_rng((seed, _TAG_COVERAGE)))
    trajectory, report = run_coverage(state, slam_hook=None, max_steps=max_steps)

    est_grid = OccupancyGrid.from_tristate(state.values, delta,
                                           scenario.x_max, scenario.y_max)
    est_radio = build_radio_map(est_grid, scenario)
    result.est_tri = state.values.copy()
    result.est_radio = est_radio
    result.trajectory = trajectory
    result.coverage_report = report
    result.state = state
    result.coverage_rate = report.coverage_rate
    result.steps = report.steps
    result.exploration_time_s = exploration_time_s(trajectory, v, delta)
    result.radio_accuracy_pct = radio_map_accuracy(
        state.values, est_radio, gt.tristate(), truth_radio, epsilon_db)
    result.runtime_s = time.perf_counter() - started
    return result


def _simulate_exploration(scenario: Scenario, gt: OccupancyGrid, delta: float,
                          v: float, seed: int, particles: int, r_e: float,
                          scan_rate_hz: float, mse: float,
                          max_steps: int | None):
    """Shared core of calibration and full simulational runs."""
    truth_free = gt.tristate() == 0.5
    state = init_coverage(np.zeros(gt.shape), mse=mse, delta=delta,
                          x_max=scenario.x_max, y_max=scenario.y_max,
                          r_e=r_e,
                          rng_seed=np.random.default_rng((seed, _TAG_COVERAGE)),
                          valid_start_mask=truth_free)
    start_pose = np.array([*state.cell_center(state.start), 0.0])
    params = SlamParams(particle_count=particles)
    slam = RbpfSlam(delta, scenario.x_max, scenario.y_max, start_pose,
                    scenario.lidar, scenario.odometry_noise, params, seed)
    runner = _SimulationRunner(gt, scenario, slam, v, scan_rate_hz, seed,
                               disc_radius_cells(r_e, delta), state.border,
                               start_pose)
    trajectory, report = run_coverage(state, slam_hook=runner.hook,
                                      max_steps=max_steps)
    return state, runner, trajectory, report


def calibrate_slam_mse(scenario: Scenario, gt: OccupancyGrid, delta: float,
                       v: float, seed: int, particles: int, r_e: float,
                       scan_rate_hz: float, runs: int = 5,
                       transitions: int = 40) -> float:
    """Mean trajectory mse over short seeded runs; feeds the boundary shrink."""
    if runs <= 0:
        return 0.0
    values = []
    for r in range(runs):
        sub_seed = int(np.random.default_rng((seed, _TAG_CALIBRATION, r))
                       .integers(2 ** 31))
        _, runner, _, _ = _simulate_exploration(
            scenario, gt, delta, v, sub_seed, particles, r_e,
            scan_rate_hz, mse=0.0, max_steps=transitions)
        if len(runner.est_poses) >= 1:
            values.append(compute_ate(runner.est_poses, runner.true_poses).mse)
    return float(np.mean(values)) if values else 0.0


def run_simulational_cell(scenario: Scenario, delta: float, v: float,
                          seed: int, particles: int, epsilon_db: float,
                          r_e: float = 0.05, scan_rate_hz: float = 10.0,
                          calibration_runs: int = 5,
                          calibration_transitions: int = 40,
                          max_steps: int | None = None,
                          truth: tuple[OccupancyGrid, RadioMap] | None = None) -> CellResult:
    started = time.perf_counter()
    result = CellResult(mode=MODE_SIMULATIONAL, delta=delta, v=v, seed=seed)
    gt, truth_radio = truth if truth is not None else build_truth(scenario, delta)

    mse = calibrate_slam_mse(scenario, gt, delta, v, seed, particles, r_e,
                             scan_rate_hz, runs=calibration_runs,
                             transitions=calibration_transitions)
    state, runner, trajectory, report = _simulate_exploration(
        scenario, gt, delta, v, seed, particles, r_e, scan_rate_hz,
        mse=mse, max_steps=max_steps)

    est_tri = runner.estimated_tri(gt.shape)
    est_grid = OccupancyGrid.from_tristate(est_tri, delta,
                                           scenario.x_max, scenario.y_max)
    est_radio = build_radio_map(est_grid, scenario)
    ate = compute_ate(runner.est_poses, runner.true_poses)

    result.est_tri = est_tri
    result.est_radio = est_radio
    result.trajectory = trajectory
    result.coverage_report = report
    result.state = state
    result.pose_log = list(zip(runner.est_poses, runner.true_poses))
    result.coverage_rate = report.coverage_rate
    result.steps = report.steps
    result.exploration_time_s = exploration_time_s(trajectory, v, delta)
    result.ate_mse = ate.mse
    result.ate_rmse = ate.rmse
    result.radio_accuracy_pct = radio_map_accuracy(
        est_tri, est_radio, gt.tristate(), truth_radio, epsilon_db)
    result.runtime_s = time.perf_counter() - started
    return result


def build_truth(scenario: Scenario, delta: float) -> tuple[OccupancyGrid, RadioMap]:
    gt = rasterize_ground_truth(scenario, delta)
    return gt, build_radio_map(gt, scenario)


def _run_cell_task(args) -> CellResult:
    (mode, scenario, delta, v, seed, cfg_dict, truth) = args
    try:
        if mode == MODE_THEORETICAL:
            return run_theoretical_cell(
                scenario, delta, v, seed, cfg_dict["epsilon_db"],
                r_e=cfg_dict["expansion_radius_theoretical"],
                max_steps=cfg_dict["max_steps"], truth=truth)
        return run_simulational_cell(
            scenario, delta, v, seed, cfg_dict["particles"],
            cfg_dict["epsilon_db"], r_e=cfg_dict["expansion_radius"],
            scan_rate_hz=cfg_dict["scan_rate_hz"],
            calibration_runs=cfg_dict["calibration_runs"],
            calibration_transitions=cfg_dict["calibration_transitions"],
            max_steps=cfg_dict["max_steps"], truth=truth)
    except Exception as exc:  # recorded per cell; the sweep continues
        return CellResult(mode=mode, delta=delta, v=v, seed=seed,
                          error=f"{type(exc).__name__}: {exc}")


def run_experiment(cfg: ExperimentConfig) -> tuple[list[CellResult], int]:
    """Run the sweep, export artifacts, and return (results, error count)."""
    scenario = load_scenario_file(cfg.scenario_path)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    truths: dict[float, tuple[OccupancyGrid, RadioMap]] = {}
    truth_errors: dict[float, str] = {}
    for delta in cfg.resolutions:
        try:
            truths[delta] = build_truth(scenario, delta)
        except Exception as exc:
            truth_errors[delta] = f"{type(exc).__name__}: {exc}"

    cfg_dict = {
        "epsilon_db": cfg.epsilon_db,
        "particles": cfg.particles,
        "expansion_radius": cfg.expansion_radius,
        "expansion_radius_theoretical": cfg.expansion_radius_theoretical,
        "scan_rate_hz": cfg.scan_rate_hz,
        "calibration_runs": cfg.calibration_runs,
        "calibration_transitions": cfg.calibration_transitions,
        "max_steps": cfg.max_steps,
    }
    tasks = []
    failed: list[CellResult] = []
    for mode in cfg.modes():
        for delta in cfg.resolutions:
            for v in cfg.speeds:
                for seed in cfg.seeds:
                    if delta in truth_errors:
                        failed.append(CellResult(
                            mode=mode, delta=delta, v=v, seed=seed,
                            error=truth_errors[delta]))
                        continue
                    tasks.append((mode, scenario, delta, v, seed, cfg_dict,
                                  truths[delta]))

    if cfg.jobs > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            results = list(pool.map(_run_cell_task, tasks))
    else:
        results = [_run_cell_task(t) for t in tasks]
    results.extend(failed)
    results.sort(key=lambda r: (r.mode, r.delta, r.v, r.seed))

    export_artifacts(results, truths, out_dir, cfg)
    errors = sum(1 for r in results if r.error is not None)
    return results, errors


def export_artifacts(results: list[CellResult],
                     truths: dict[float, tuple[OccupancyGrid, RadioMap]],
                     out_dir, cfg: ExperimentConfig) -> None:
    """Write every map, radio CSV, trajectory, and the metrics tables.

    File contents are a pure function of (config, seed); wall-clock runtimes
    go to a separate diagnostics file so re-runs stay byte-identical.
    """
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc

    for delta, (gt, truth_radio) in sorted(truths.items()):
        gt.to_pgm(out_dir / f"truth_d{delta:g}_occupancy.pgm")
        write_radio_csv(truth_radio, out_dir / f"truth_d{delta:g}_radio.csv")
        write_radio_matrix_csv(truth_radio,
                               out_dir / f"truth_d{delta:g}_radio_matrix.csv")

    for res in results:
        if res.error is not None or res.est_radio is None:
            continue
        prefix = res.key()
        grid = OccupancyGrid.from_tristate(
            res.est_tri, res.delta,
            res.est_radio.x_max, res.est_radio.y_max)
        grid.to_pgm(out_dir / f"{prefix}_occupancy.pgm")
        write_radio_csv(res.est_radio, out_dir / f"{prefix}_radio.csv")
        write_radio_matrix_csv(res.est_radio,
                               out_dir / f"{prefix}_radio_matrix.csv")
        write_trajectory_csv(res.state, res.trajectory,
                             out_dir / f"{prefix}_trajectory.csv")
        with open(out_dir / f"{prefix}_report.json", "w") as fh:
            json.dump(res.coverage_report.to_dict(), fh, indent=2,
                      sort_keys=True)
            fh.write("\n")
        if res.mode == MODE_SIMULATIONAL:
            with open(out_dir / f"{prefix}_poses.csv", "w") as fh:
                fh.write("t,est_x,est_y,est_theta,true_x,true_y,true_theta\n")
                for t, (est, tru) in enumerate(res.pose_log):
                    fh.write(f"{t},{est[0]:.6f},{est[1]:.6f},{est[2]:.6f},"
                             f"{tru[0]:.6f},{tru[1]:.6f},{tru[2]:.6f}\n")

    rows = [r.metrics_row() for r in results]
    payload = {
        "config": {
            "scenario": str(cfg.scenario_path),
            "resolutions": cfg.resolutions,
            "speeds": cfg.speeds,
            "seeds": cfg.seeds,
            "particles": cfg.particles,
            "epsilon_db": cfg.epsilon_db,
            "mode": cfg.mode,
            "scan_rate_hz": cfg.scan_rate_hz,
            "expansion_radius": cfg.expansion_radius,
        },
        "rows": rows,
    }
    with open(out_dir / "metrics.json", "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")

    columns = ["mode", "delta", "v", "seed", "coverage_rate", "ate_mse",
               "ate_rmse", "radio_accuracy_pct", "exploration_time_s",
               "steps", "error"]
    with open(out_dir / "metrics.csv", "w") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join("" if row[c] is None else str(row[c])
                              for c in columns) + "\n")

    runtimes = {r.key(): round(r.runtime_s, 3) for r in results}
    with open(out_dir / "runtimes.json", "w") as fh:
        json.dump(runtimes, fh, indent=2, sort_keys=True)
        fh.write("\n")
