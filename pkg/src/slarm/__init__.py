"""Joint occupancy-grid SLAM and indoor radio-map simulation."""

from .coverage import CoverageState, astar, ggmr_step, init_coverage, run_coverage
from .grid import OccupancyGrid, SubMap, bresenham_trace, merge_submaps
from .metrics import exploration_time_s, radio_map_accuracy
from .radio import (RadioMap, RicianParams, build_radio_map, expected_gain_db,
                    los_blocked, path_loss_db, sample_channel)
from .slam import (AteReport, Particle, ProposalStats, RbpfSlam, SlamParams,
                   compute_ate, effective_sample_size, estimate_pose,
                   measurement_likelihood, sample_proposal, scan_match,
                   selective_resample)
from .world import (Box, LidarSpec, OdometryNoise, OdometryReading, RobotState,
                    Scan, Scenario, ScenarioError, load_scenario,
                    load_scenario_file, rasterize_ground_truth, simulate_lidar,
                    step_motion)

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
