"""Rao-Blackwellized particle filter for grid SLAM.

Each particle carries a full trajectory, a weight, and its own occupancy
grid. A step refines the odometry-propagated pose by scan matching, fits a
Gaussian proposal to likelihood-weighted samples near the optimum, draws the
new pose from it, reweights by the sample-sum normalizer, folds the scan into
the particle's map, and resamples only when the effective sample size drops.

Weights are tracked in log space; the public likelihood stays a plain
nonnegative real.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .grid import OccupancyGrid
from .world import (LidarSpec, OdometryNoise, OdometryReading, compose_pose,
                    wrap_angle, wrap_angles)

LOG_TWO_PI = math.log(2.0 * math.pi)
# Weight multiplier assigned to particles whose proposal collapsed and fell
# back to raw odometry, relative to the worst healthy particle.
FALLBACK_LOG_PENALTY = 50.0


@dataclass(frozen=True)
class SlamParams:
    """Filter tuning. None fields are resolved against the grid resolution
    and odometry noise: sigma_hit tracks the cell size but is capped so
    coarse grids keep a discriminative likelihood, and the proposal sampling
    box stays a few odometry sigmas wide so the importance weights do not
    collapse onto a single sample.
    """

    particle_count: int = 30
    z_samples: int = 20
    sigma_hit_m: float | None = None      # None: max(2 range noise, delta / 2)
    sigma_hit_cap_m: float = 0.15
    likelihood_floor: float = 1e-6
    beam_subsample: int = 10
    window_xy_m: float | None = None      # None: 3 sigma_odom
    window_theta: float | None = None     # None: 3 sigma_dtheta
    match_step_xy_cells: float = 1.0      # initial scan-match step, cells
    match_step_theta: float = math.radians(1.0)
    match_tol_xy_cells: float = 0.25      # stop when the step falls below
    match_tol_theta: float = math.radians(0.25)
    resample_threshold: float = 0.5

    def resolve(self, delta: float, noise: OdometryNoise,
                range_sigma: float = 0.0) -> "SlamParams":
        from dataclasses import replace
        sigma_hit = self.sigma_hit_m if self.sigma_hit_m is not None \
            else min(max(2.0 * range_sigma, delta / 2.0), self.sigma_hit_cap_m)
        w_xy = self.window_xy_m if self.window_xy_m is not None \
            else max(3.0 * max(noise.sigma_dx, noise.sigma_dy), 1e-4)
        w_t = self.window_theta if self.window_theta is not None \
            else max(3.0 * noise.sigma_dtheta, 1e-4)
        return replace(self, sigma_hit_m=sigma_hit, window_xy_m=w_xy,
                       window_theta=w_t)


@dataclass
class Particle:
    pose: np.ndarray
    grid: OccupancyGrid
    log_weight: float = 0.0
    trajectory: list = field(default_factory=list)
    touched: np.ndarray | None = None     # cells updated since last flush
    fallback: bool = False

    def copy(self) -> "Particle":
        return Particle(pose=self.pose.copy(), grid=self.grid.copy(),
                        log_weight=self.log_weight,
                        trajectory=list(self.trajectory),
                        touched=None if self.touched is None else self.touched.copy(),
                        fallback=self.fallback)


@dataclass
class ProposalStats:
    """Sampled poses, their log weights, and the fitted Gaussian."""

    samples: np.ndarray
    log_weights: np.ndarray
    mu: np.ndarray
    sigma: np.ndarray
    eta: float
    log_eta: float
    fallback: bool = False


@dataclass(frozen=True)
class AteReport:
    q0: int
    mse: float
    rmse: float


def _scan_endpoint_offsets(scan, spec: LidarSpec, subsample: int):
    """Robot-frame endpoints of returning beams, subsampled."""
    hit = np.isfinite(scan.ranges)
    idx = np.flatnonzero(hit)[::max(1, subsample)]
    if len(idx) == 0:
        return None
    offsets = spec.beam_offsets()[idx]
    r = scan.ranges[idx]
    return r * np.cos(offsets), r * np.sin(offsets)


def _field_bilinear(dist: np.ndarray, grid: OccupancyGrid,
                    ex: np.ndarray, ey: np.ndarray) -> np.ndarray:
    """Sample the cell-center distance field at metric points.

    Bilinear interpolation keeps the likelihood continuous in the pose, so
    the matcher can refine below the cell size.
    """
    if grid.nx < 2 or grid.ny < 2:
        i, j = grid._point_ij(ex, ey)
        return dist[i, j]
    gx = np.clip((ex + grid.x_max) / grid.delta - 0.5, 0.0, grid.nx - 1.0)
    gy = np.clip((ey + grid.y_max) / grid.delta - 0.5, 0.0, grid.ny - 1.0)
    i0 = np.minimum(gx.astype(np.int64), grid.nx - 2)
    j0 = np.minimum(gy.astype(np.int64), grid.ny - 2)
    fx = gx - i0
    fy = gy - j0
    return ((1 - fx) * (1 - fy) * dist[i0, j0]
            + fx * (1 - fy) * dist[i0 + 1, j0]
            + (1 - fx) * fy * dist[i0, j0 + 1]
            + fx * fy * dist[i0 + 1, j0 + 1])


def _log_lik_from_ends(grid: OccupancyGrid, pose, ends,
                       params: SlamParams) -> float:
    """Likelihood-field log score given precomputed robot-frame endpoints."""
    px, py, theta = float(pose[0]), float(pose[1]), float(pose[2])
    c, s = math.cos(theta), math.sin(theta)
    ex = px + c * ends[0] - s * ends[1]
    ey = py + s * ends[0] + c * ends[1]
    # Range returns land on occupied-cell faces, which is exactly the zero
    # set of the signed surface distance; penalizing |distance| symmetrically
    # keeps the matcher from dragging endpoints past the surface.
    import os
    _mode = os.environ.get("SLARM_FIELD", "signed")
    if _mode == "signed":
        d = np.abs(_field_bilinear(grid.surface_distance_m(), grid, ex, ey))
    elif _mode == "plateau":
        d = _field_bilinear(grid.nearest_occupied_m(), grid, ex, ey)
        d = np.maximum(d - grid.delta / 2.0, 0.0)
    else:
        d = _field_bilinear(grid.nearest_occupied_m(), grid, ex, ey)
    sigma = params.sigma_hit_m if params.sigma_hit_m is not None \
        else min(grid.delta / 2.0, params.sigma_hit_cap_m)
    p = np.exp(-0.5 * (d / sigma) ** 2) + params.likelihood_floor
    return float(np.log(p).sum())


def log_measurement_likelihood(grid: OccupancyGrid, pose, scan,
                               spec: LidarSpec, params: SlamParams) -> float:
    """Log likelihood-field score of a scan at a pose.

    Product over subsampled returning beams of exp(-d^2 / 2 sigma^2) + floor,
    d being the distance from the beam endpoint to the nearest occupied cell.
    Uniform (log 1 = 0) when the map has no occupied cell or the scan no
    returns.
    """
    if not grid.occupied_mask().any():
        return 0.0
    ends = _scan_endpoint_offsets(scan, spec, params.beam_subsample)
    if ends is None:
        return 0.0
    return _log_lik_from_ends(grid, pose, ends, params)


def measurement_likelihood(grid: OccupancyGrid, pose, scan, spec: LidarSpec,
                           params: SlamParams) -> float:
    """Plain likelihood-field score (may underflow far from the optimum)."""
    return math.exp(log_measurement_likelihood(grid, pose, scan, spec, params))


def scan_match(grid: OccupancyGrid, scan, spec: LidarSpec, init_pose,
               params: SlamParams) -> tuple[np.ndarray, float]:
    """Greedy hill climb over (+-x, +-y, +-theta) with step halving.

    Never returns a pose scoring below the initial one; on a flat likelihood
    it returns init_pose unchanged.
    """
    pose = np.asarray(init_pose, dtype=float).copy()
    flat = not grid.occupied_mask().any()
    ends = _scan_endpoint_offsets(scan, spec, params.beam_subsample)
    if flat or ends is None:
        return pose, 1.0
    best = _log_lik_from_ends(grid, pose, ends, params)
    step_xy = params.match_step_xy_cells * grid.delta
    step_t = params.match_step_theta
    tol_xy = params.match_tol_xy_cells * grid.delta
    moves = 0
    while step_xy >= tol_xy or step_t >= params.match_tol_theta:
        improved = False
        for delta in ((step_xy, 0, 0), (-step_xy, 0, 0),
                      (0, step_xy, 0), (0, -step_xy, 0),
                      (0, 0, step_t), (0, 0, -step_t)):
            cand = pose + delta
            score = _log_lik_from_ends(grid, cand, ends, params)
            if score > best:
                pose, best = cand, score
                improved = True
        if not improved:
            step_xy /= 2.0
            step_t /= 2.0
        moves += 1
        if moves > 200:
            break
    pose[2] = wrap_angle(pose[2])
    return pose, math.exp(best)


def _log_motion_prior(samples: np.ndarray, center: np.ndarray,
                      noise: OdometryNoise) -> np.ndarray:
    """Independent Gaussian log-density of samples around the odometry pose."""
    out = np.zeros(len(samples))
    for k, sigma in enumerate((noise.sigma_dx, noise.sigma_dy, noise.sigma_dtheta)):
        d = samples[:, k] - center[k]
        if k == 2:
            d = wrap_angles(d)
        sig = max(sigma, 1e-12)
        out += -0.5 * (d / sig) ** 2 - math.log(sig) - 0.5 * LOG_TWO_PI
    return out


def sample_proposal(particle: Particle, scan, odom: OdometryReading,
                    spec: LidarSpec, noise: OdometryNoise,
                    params: SlamParams, rng_seed) -> tuple[np.ndarray, ProposalStats]:
    """Draw the particle's next pose from the refined Gaussian proposal.

    Scan-matches from the odometry-propagated pose, samples z poses uniformly
    in a small box around the optimum, weights each by measurement likelihood
    times motion prior, and fits mean/covariance from those weights. If every
    sample carries no weight (or odometry is noiseless), falls back to the raw
    odometry pose and flags the particle.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    propagated = compose_pose(particle.pose, odom)

    zero_noise = (noise.sigma_dx == 0 and noise.sigma_dy == 0
                  and noise.sigma_dtheta == 0)
    if zero_noise:
        stats = ProposalStats(samples=propagated[None, :],
                              log_weights=np.zeros(1),
                              mu=propagated.copy(),
                              sigma=np.zeros((3, 3)),
                              eta=0.0, log_eta=-math.inf, fallback=True)
        return propagated.copy(), stats

    params = params.resolve(particle.grid.delta, noise)
    matched, _ = scan_match(particle.grid, scan, spec, propagated, params)
    window = np.array([params.window_xy_m, params.window_xy_m,
                       params.window_theta])
    # The matcher can slide along weakly constrained directions (for example
    # a featureless corridor axis); clamp its correction into the odometry
    # trust region so the sampled box stays where the motion prior has mass.
    correction = matched - propagated
    correction[2] = wrap_angle(correction[2])
    matched = propagated + np.clip(correction, -window, window)
    samples = matched + rng.uniform(-1.0, 1.0, size=(params.z_samples, 3)) * window

    ends = _scan_endpoint_offsets(scan, spec, params.beam_subsample)
    if ends is None or not particle.grid.occupied_mask().any():
        log_meas = np.zeros(len(samples))
    else:
        log_meas = np.array([
            _log_lik_from_ends(particle.grid, smp, ends, params)
            for smp in samples])
    log_prior = _log_motion_prior(samples, propagated, noise)
    log_w = log_meas + log_prior

    m = float(log_w.max())
    if not np.isfinite(m) or m < -700.0:
        stats = ProposalStats(samples=samples, log_weights=log_w,
                              mu=propagated.copy(), sigma=np.zeros((3, 3)),
                              eta=0.0, log_eta=-math.inf, fallback=True)
        draw = propagated + rng.normal(
            0.0, [noise.sigma_dx, noise.sigma_dy, noise.sigma_dtheta])
        draw[2] = wrap_angle(draw[2])
        return draw, stats

    scaled = np.exp(log_w - m)
    total = float(scaled.sum())
    weights = scaled / total
    log_eta = m + math.log(total)

    # Average headings unwrapped around the matched pose to dodge the seam.
    unwrapped = samples.copy()
    unwrapped[:, 2] = matched[2] + wrap_angles(samples[:, 2] - matched[2])
    mu = (weights[:, None] * unwrapped).sum(axis=0)
    centered = unwrapped - mu
    sigma = (weights[:, None, None]
             * centered[:, :, None] * centered[:, None, :]).sum(axis=0)
    sigma = 0.5 * (sigma + sigma.T)

    draw = rng.multivariate_normal(mu, sigma, check_valid="ignore", method="svd")
    draw[2] = wrap_angle(draw[2])
    mu_out = mu.copy()
    mu_out[2] = wrap_angle(mu_out[2])
    stats = ProposalStats(samples=unwrapped, log_weights=log_w, mu=mu_out,
                          sigma=sigma, eta=math.exp(min(log_eta, 700.0)),
                          log_eta=log_eta)
    return draw, stats


def update_weight(particle: Particle, log_eta: float) -> None:
    """Multiply the particle weight by its proposal normalizer (log space)."""
    particle.log_weight += log_eta


def normalized_weights(particles: list[Particle]) -> np.ndarray:
    """Linear weights summing to 1; uniform reset if everything underflowed."""
    logs = np.array([p.log_weight for p in particles])
    m = logs.max()
    if not np.isfinite(m):
        return np.full(len(particles), 1.0 / len(particles))
    w = np.exp(logs - m)
    return w / w.sum()


def effective_sample_size(weights: np.ndarray) -> float:
    return 1.0 / float((weights ** 2).sum())


def selective_resample(particles: list[Particle], threshold: float,
                       rng_seed) -> tuple[list[Particle], bool]:
    """Low-variance resampling, only when N_eff < threshold * I.

    Survivors are deep copies (own maps) with uniform weights.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    count = len(particles)
    weights = normalized_weights(particles)
    if effective_sample_size(weights) >= threshold * count:
        return particles, False
    u = rng.uniform(0.0, 1.0 / count)
    points = u + np.arange(count) / count
    cum = np.cumsum(weights)
    idx = np.searchsorted(cum, points, side="left")
    idx = np.clip(idx, 0, count - 1)
    survivors = [particles[i].copy() for i in idx]
    for p in survivors:
        p.log_weight = -math.log(count)
    return survivors, True


def estimate_pose(particles: list[Particle]) -> np.ndarray:
    """Unweighted particle mean; heading via circular mean."""
    poses = np.array([p.pose for p in particles])
    x = poses[:, 0].mean()
    y = poses[:, 1].mean()
    theta = math.atan2(np.sin(poses[:, 2]).mean(), np.cos(poses[:, 2]).mean())
    return np.array([x, y, theta])


def estimate_cell(particles: list[Particle], idx: tuple[int, int]) -> np.ndarray:
    """Mean metric coordinate the particles assign to cell (a, b)."""
    centers = np.array([p.grid.grid_center(*idx) for p in particles])
    return centers.mean(axis=0)


def compute_ate(observed, truth) -> AteReport:
    """Mean squared positional error between paired pose sequences.

    Per pose the x and y errors pool into one squared Euclidean term; the
    report carries both the mean square and its root.
    """
    obs = np.asarray(observed, dtype=float)
    tru = np.asarray(truth, dtype=float)
    if len(obs) != len(tru):
        raise ValueError(f"length mismatch: {len(obs)} observed vs {len(tru)} true")
    if len(obs) == 0:
        raise ValueError("need at least one pose pair")
    d = obs[:, :2] - tru[:, :2]
    mse = float((d ** 2).sum(axis=1).mean())
    return AteReport(q0=len(obs), mse=mse, rmse=math.sqrt(mse))


class RbpfSlam:
    """Particle set plus the per-step pipeline, deterministic given a seed.

    Per-particle RNG streams derive from (seed, step, particle index), so a
    parallel schedule over particles would reproduce the serial results.
    """

    def __init__(self, delta: float, x_max: float, y_max: float,
                 start_pose, spec: LidarSpec, noise: OdometryNoise,
                 params: SlamParams, seed: int):
        self.spec = spec
        self.noise = noise
        self.params = params.resolve(delta, noise, spec.range_noise_sigma)
        self.seed = seed
        start = np.asarray(start_pose, dtype=float)
        self.particles = [
            Particle(pose=start.copy(),
                     grid=OccupancyGrid(delta, x_max, y_max),
                     log_weight=-math.log(params.particle_count),
                     trajectory=[start.copy()],
                     touched=np.zeros(0, dtype=np.int64))
            for _ in range(params.particle_count)]
        self.t = 0
        self.occupancy_dirty = True

    def best_particle(self) -> Particle:
        weights = normalized_weights(self.particles)
        return self.particles[int(np.argmax(weights))]

    def step(self, scan, odom: OdometryReading) -> np.ndarray:
        """One filter update; returns the pose estimate."""
        self.t += 1
        log_etas = np.zeros(len(self.particles))
        fallbacks = np.zeros(len(self.particles), dtype=bool)
        for i, particle in enumerate(self.particles):
            rng = np.random.default_rng((self.seed, 3, self.t, i))
            pose, stats = sample_proposal(particle, scan, odom, self.spec,
                                          self.noise, self.params, rng)
            particle.pose = pose
            particle.trajectory.append(pose.copy())
            particle.fallback = stats.fallback
            log_etas[i] = stats.log_eta
            fallbacks[i] = stats.fallback

        # Rank collapsed proposals just below the worst healthy one instead
        # of letting raw -inf wipe the set.
        if fallbacks.any():
            healthy = log_etas[~fallbacks]
            floor = (healthy.min() - FALLBACK_LOG_PENALTY) if len(healthy) else 0.0
            log_etas[fallbacks] = floor

        for particle, log_eta in zip(self.particles, log_etas):
            update_weight(particle, log_eta)

        # Keep log weights anchored so long runs cannot drift to -inf.
        weights = normalized_weights(self.particles)
        for particle, w in zip(self.particles, weights):
            particle.log_weight = math.log(max(w, 1e-300))

        for particle in self.particles:
            touched, changed = particle.grid.integrate_scan(
                particle.pose, scan, self.spec)
            if changed:
                self.occupancy_dirty = True
            particle.touched = np.union1d(particle.touched, touched) \
                if particle.touched is not None and len(particle.touched) else touched

        rng_resample = np.random.default_rng((self.seed, 4, self.t))
        self.particles, resampled = selective_resample(
            self.particles, self.params.resample_threshold, rng_resample)
        if resampled:
            self.occupancy_dirty = True
        return estimate_pose(self.particles)

    def flush_touched(self) -> np.ndarray:
        """Best particle's cells updated since the previous flush; resets all."""
        best = self.best_particle()
        cells = best.touched if best.touched is not None else np.zeros(0, np.int64)
        for particle in self.particles:
            particle.touched = np.zeros(0, dtype=np.int64)
        return cells
