"""Ground-truth world: room geometry, scenario config, and simulated sensors.

The mobile space is the rectangle [-x_max, x_max] x [-y_max, y_max] on the
floor plane. Walls and obstacles are axis-aligned 3D boxes standing on the
floor. Everything outside the mobile space is void: rays that leave it get
no return, and the robot is kept inside.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

TWO_PI = 2.0 * math.pi

# Defaults for quantities the scenario file may omit.
DEFAULT_AP_HEIGHT = 2.5
DEFAULT_ROBOT_ANTENNA_HEIGHT = 0.3
DEFAULT_CARRIER_GHZ = 3.5
DEFAULT_NOISE_POWER_DBM = -94.0


class ScenarioError(ValueError):
    """Raised when a scenario config is missing keys or geometrically invalid."""


def wrap_angle(theta: float) -> float:
    """Normalize an angle to (-pi, pi]."""
    t = math.remainder(theta, TWO_PI)
    if t <= -math.pi:
        t += TWO_PI
    return t


def wrap_angles(theta: np.ndarray) -> np.ndarray:
    """Vectorized wrap to [-pi, pi); the seam choice is immaterial here."""
    return np.remainder(np.asarray(theta) + math.pi, TWO_PI) - math.pi


@dataclass(frozen=True)
class Box:
    """Axis-aligned 3D box, min/max corners in meters."""

    x_min: float
    x_max: float
    y_min: float
    y_max: float
    z_min: float
    z_max: float

    @classmethod
    def from_center_size(cls, cx: float, cy: float, lx: float, ly: float,
                         lz: float, z_min: float = 0.0) -> "Box":
        return cls(cx - lx / 2.0, cx + lx / 2.0,
                   cy - ly / 2.0, cy + ly / 2.0,
                   z_min, z_min + lz)

    def footprint_contains(self, x, y):
        """Closed 2D containment test; accepts scalars or arrays."""
        return (self.x_min <= x) & (x <= self.x_max) & \
               (self.y_min <= y) & (y <= self.y_max)

    def extents(self) -> tuple[float, float, float]:
        return (self.x_max - self.x_min,
                self.y_max - self.y_min,
                self.z_max - self.z_min)


@dataclass(frozen=True)
class LidarSpec:
    """Planar range sensor: evenly spaced beams over an angular span."""

    beam_count: int = 360
    max_range: float = 8.0
    range_noise_sigma: float = 0.01
    angular_span: float = TWO_PI

    def __post_init__(self):
        if self.beam_count < 1:
            raise ScenarioError("lidar beam_count must be >= 1")
        if self.max_range <= 0:
            raise ScenarioError("lidar max_range must be > 0")
        if self.range_noise_sigma < 0:
            raise ScenarioError("lidar range_noise_sigma must be >= 0")

    def beam_offsets(self) -> np.ndarray:
        """Beam angles relative to the robot heading.

        A full circle excludes the duplicate endpoint; a sector includes both
        ends. A single beam points straight ahead.
        """
        n = self.beam_count
        if n == 1:
            return np.zeros(1)
        if self.angular_span >= TWO_PI - 1e-12:
            return -math.pi + TWO_PI * np.arange(n) / n
        return np.linspace(-self.angular_span / 2.0, self.angular_span / 2.0, n)


@dataclass(frozen=True)
class OdometryNoise:
    """Per-reading additive Gaussian stds on the relative pose delta."""

    sigma_dx: float = 0.005
    sigma_dy: float = 0.005
    sigma_dtheta: float = 0.0035


@dataclass
class RobotState:
    x: float
    y: float
    theta: float
    v: float = 0.0

    def __post_init__(self):
        self.theta = wrap_angle(self.theta)

    @property
    def pose(self) -> np.ndarray:
        return np.array([self.x, self.y, self.theta])


@dataclass(frozen=True)
class Scan:
    """One LiDAR sweep. No-return beams carry inf."""

    ranges: np.ndarray
    t: int = 0

    def hit_mask(self) -> np.ndarray:
        return np.isfinite(self.ranges)


@dataclass(frozen=True)
class OdometryReading:
    """Measured pose delta in the frame of the starting pose."""

    dx: float
    dy: float
    dtheta: float
    collided: bool = False

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dtheta])


@dataclass(frozen=True)
class Scenario:
    """Ground-truth environment plus channel and sensor parameters."""

    x_max: float
    y_max: float
    ceiling_height: float
    ap_position: tuple[float, float, float]
    h_m: float
    fc_ghz: float
    obstacles: tuple[Box, ...]
    walls: tuple[Box, ...]
    noise_power_dbm: float = DEFAULT_NOISE_POWER_DBM
    lidar: LidarSpec = field(default_factory=LidarSpec)
    odometry_noise: OdometryNoise = field(default_factory=OdometryNoise)

    def all_boxes(self) -> tuple[Box, ...]:
        return self.walls + self.obstacles

    def contains(self, x: float, y: float) -> bool:
        return -self.x_max <= x <= self.x_max and -self.y_max <= y <= self.y_max


def _parse_box(entry: dict, label: str) -> Box:
    try:
        cx, cy = (float(v) for v in entry["center"])
        lx, ly, lz = (float(v) for v in entry["size"])
    except (KeyError, TypeError, ValueError) as exc:
        raise ScenarioError(f"{label}: expected 'center': [x, y] and "
                            f"'size': [lx, ly, lz] ({exc})") from exc
    z_min = float(entry.get("z_min", 0.0))
    return Box.from_center_size(cx, cy, lx, ly, lz, z_min=z_min)


def _validate_box(box: Box, x_max: float, y_max: float, label: str) -> None:
    lx, ly, lz = box.extents()
    if lx <= 0 or ly <= 0 or lz <= 0:
        raise ScenarioError(f"{label} has nonpositive extent: {(lx, ly, lz)}")
    if box.x_min < -x_max - 1e-9 or box.x_max > x_max + 1e-9 \
            or box.y_min < -y_max - 1e-9 or box.y_max > y_max + 1e-9:
        raise ScenarioError(
            f"{label} lies outside the mobile space "
            f"[{-x_max}, {x_max}] x [{-y_max}, {y_max}]")


def load_scenario(config: dict) -> Scenario:
    """Build and validate a Scenario from a parsed config tree."""
    if "room" not in config:
        raise ScenarioError("missing required key 'room'")
    room = config["room"]
    for key in ("x_max", "y_max", "height"):
        if key not in room:
            raise ScenarioError(f"missing required key 'room.{key}'")
    x_max = float(room["x_max"])
    y_max = float(room["y_max"])
    ceiling = float(room["height"])
    if x_max <= 0 or y_max <= 0 or ceiling <= 0:
        raise ScenarioError("room extents must be positive")

    ap_cfg = config.get("ap")
    if ap_cfg is None:
        ap = (0.0, y_max, DEFAULT_AP_HEIGHT)
    else:
        try:
            ap = (float(ap_cfg["x"]), float(ap_cfg["y"]), float(ap_cfg["z"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"ap: expected keys x, y, z ({exc})") from exc

    fc = float(config.get("fc_ghz", DEFAULT_CARRIER_GHZ))
    if fc <= 0:
        raise ScenarioError("fc_ghz must be > 0")
    h_m = float(config.get("h_m", DEFAULT_ROBOT_ANTENNA_HEIGHT))

    obstacles = tuple(_parse_box(e, f"obstacles[{i}]")
                      for i, e in enumerate(config.get("obstacles", [])))
    walls = tuple(_parse_box(e, f"walls[{i}]")
                  for i, e in enumerate(config.get("walls", [])))
    for i, box in enumerate(obstacles):
        _validate_box(box, x_max, y_max, f"obstacles[{i}]")
    for i, box in enumerate(walls):
        _validate_box(box, x_max, y_max, f"walls[{i}]")

    lidar = LidarSpec(**config.get("lidar", {}))
    odo = OdometryNoise(**config.get("odometry_noise", {}))

    return Scenario(
        x_max=x_max,
        y_max=y_max,
        ceiling_height=ceiling,
        ap_position=ap,
        h_m=h_m,
        fc_ghz=fc,
        obstacles=obstacles,
        walls=walls,
        noise_power_dbm=float(config.get("noise_power_dbm",
                                         DEFAULT_NOISE_POWER_DBM)),
        lidar=lidar,
        odometry_noise=odo,
    )


def load_scenario_file(path: str | Path) -> Scenario:
    with open(path) as fh:
        return load_scenario(json.load(fh))


def rasterize_ground_truth(scenario: Scenario, delta: float):
    """Rasterize the true geometry into an occupancy grid at resolution delta.

    A cell is occupied iff its center lies inside any wall or obstacle
    footprint; every other cell is explored-free.
    """
    from .grid import OccupancyGrid

    grid = OccupancyGrid(delta, scenario.x_max, scenario.y_max)
    xs, ys = grid.center_mesh()
    occupied = np.zeros(grid.shape, dtype=bool)
    for box in scenario.all_boxes():
        occupied |= box.footprint_contains(xs, ys)
    tri = np.where(occupied, 1.0, 0.5)
    return OccupancyGrid.from_tristate(tri, delta, scenario.x_max, scenario.y_max)


def _as_rng(seed) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)


def simulate_lidar(gt, pose, spec: LidarSpec, rng_seed, t: int = 0) -> Scan:
    """Simulate one sweep against a ground-truth occupancy grid.

    Beam ranges are the distance to the first occupied cell (located by
    marching at half-cell steps and bisecting onto the free/occupied
    boundary) plus Gaussian noise. Beams that reach max_range or leave the
    grid report no return.
    """
    rng = _as_rng(rng_seed)
    if isinstance(pose, RobotState):
        px, py, theta = pose.x, pose.y, pose.theta
    else:
        px, py, theta = float(pose[0]), float(pose[1]), float(pose[2])
    if gt.occupied_at(px, py):
        raise ValueError(f"lidar pose ({px}, {py}) is inside an occupied cell")

    angles = theta + spec.beam_offsets()
    dx = np.cos(angles)
    dy = np.sin(angles)

    step = gt.delta / 2.0
    n_steps = int(math.ceil(spec.max_range / step))
    dists = step * np.arange(1, n_steps + 1)
    dists[-1] = min(dists[-1], spec.max_range)

    # occ[k, i]: sample k along beam i lands in an occupied cell.
    occ = gt.occupied_at(px + np.outer(dists, dx), py + np.outer(dists, dy))
    hit_any = occ.any(axis=0)
    first = np.argmax(occ, axis=0)

    ranges = np.full(spec.beam_count, np.inf)
    if hit_any.any():
        idx = np.flatnonzero(hit_any)
        lo = dists[first[idx]] - step  # last sample known free (or origin)
        hi = dists[first[idx]]
        bdx, bdy = dx[idx], dy[idx]
        for _ in range(20):
            mid = 0.5 * (lo + hi)
            inside = gt.occupied_at(px + mid * bdx, py + mid * bdy)
            hi = np.where(inside, mid, hi)
            lo = np.where(inside, lo, mid)
        dist = 0.5 * (lo + hi)
        keep = dist < spec.max_range
        ranges[idx[keep]] = dist[keep]

    hit = np.isfinite(ranges)
    if spec.range_noise_sigma > 0 and hit.any():
        noise = rng.normal(0.0, spec.range_noise_sigma, size=int(hit.sum()))
        ranges[hit] = np.clip(ranges[hit] + noise, 1e-6, spec.max_range)
    return Scan(ranges=ranges, t=t)


def step_motion(state: RobotState, command: tuple[float, float, float],
                noise: OdometryNoise, rng_seed,
                gt=None) -> tuple[RobotState, OdometryReading]:
    """Advance the unicycle one step and produce a noisy odometry reading.

    command is (v, omega, dt). If a ground-truth grid is given, motion along
    the chord is stopped at the first occupied cell and the reading is
    flagged. Actuation itself is exact; only the reading carries noise.
    """
    v, omega, dt = command
    if dt <= 0:
        raise ValueError("dt must be > 0")
    rng = _as_rng(rng_seed)

    if abs(omega) < 1e-12:
        nx = state.x + v * dt * math.cos(state.theta)
        ny = state.y + v * dt * math.sin(state.theta)
        ntheta = state.theta
    else:
        ntheta = state.theta + omega * dt
        nx = state.x + v / omega * (math.sin(ntheta) - math.sin(state.theta))
        ny = state.y - v / omega * (math.cos(ntheta) - math.cos(state.theta))

    collided = False
    if gt is not None and (nx != state.x or ny != state.y):
        # Sample the chord at quarter-cell spacing and stop before contact.
        seg = math.hypot(nx - state.x, ny - state.y)
        n = max(2, int(math.ceil(seg / (gt.delta / 4.0))) + 1)
        ts = np.linspace(0.0, 1.0, n)
        sx = state.x + ts * (nx - state.x)
        sy = state.y + ts * (ny - state.y)
        blocked = gt.occupied_at(sx, sy) | ~gt.inside(sx, sy)
        if blocked.any():
            stop = int(np.argmax(blocked))
            frac = ts[max(stop - 1, 0)]
            nx = state.x + frac * (nx - state.x)
            ny = state.y + frac * (ny - state.y)
            collided = True

    new_state = RobotState(nx, ny, wrap_angle(ntheta), v=v)

    # True delta expressed in the starting pose frame.
    gx, gy = nx - state.x, ny - state.y
    c, s = math.cos(state.theta), math.sin(state.theta)
    true_dx = c * gx + s * gy
    true_dy = -s * gx + c * gy
    true_dtheta = wrap_angle(ntheta - state.theta)

    moved = abs(true_dx) + abs(true_dy) + abs(true_dtheta) > 0
    odom = OdometryReading(
        dx=true_dx + (rng.normal(0, noise.sigma_dx) if moved and noise.sigma_dx > 0 else 0.0),
        dy=true_dy + (rng.normal(0, noise.sigma_dy) if moved and noise.sigma_dy > 0 else 0.0),
        dtheta=true_dtheta + (rng.normal(0, noise.sigma_dtheta) if moved and noise.sigma_dtheta > 0 else 0.0),
        collided=collided,
    )
    return new_state, odom


def compose_pose(pose: np.ndarray, odom: OdometryReading) -> np.ndarray:
    """Apply a relative odometry delta to a pose (both in world frame)."""
    x, y, theta = pose
    c, s = math.cos(theta), math.sin(theta)
    return np.array([
        x + c * odom.dx - s * odom.dy,
        y + s * odom.dx + c * odom.dy,
        wrap_angle(theta + odom.dtheta),
    ])
