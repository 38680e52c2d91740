"""Channel model and radio-map construction.

The radio map holds, per explored-free cell, the expected channel power gain
between the fixed AP and a receiver at that cell center. Because both fading
components have unit power, the expectation collapses onto the deterministic
path loss, partitioned into LoS and NLoS by 3D blockage of the AP-receiver
segment (indoor-factory sparse-clutter high-antenna coefficients).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import OccupancyGrid, digital_lines_flat
from .world import Box, Scenario

EPS_DENOM = 1e-12


@dataclass(frozen=True)
class RicianParams:
    """Fading mix: alpha_bar is the linear Rician factor of an unblocked link."""

    alpha_bar: float = 10.0

    def __post_init__(self):
        if self.alpha_bar < 0:
            raise ValueError("alpha_bar must be >= 0")


@dataclass(frozen=True)
class ChannelSample:
    h: complex
    power: float


def path_loss_db(d_m, fc_ghz, los: bool):
    """Path loss in dB at 3D distance d_m (meters) and carrier fc_ghz (GHz).

    NLoS is lower-bounded by the LoS loss. Accepts scalars or arrays.
    """
    d = np.asarray(d_m, dtype=float)
    if np.any(d <= 0):
        raise ValueError("distance must be > 0")
    if fc_ghz <= 0:
        raise ValueError("carrier frequency must be > 0")
    l_los = 31.84 + 21.5 * np.log10(d) + 19.0 * np.log10(fc_ghz)
    if los:
        out = l_los
    else:
        out = np.maximum(l_los, 32.4 + 23.0 * np.log10(d) + 20.0 * np.log10(fc_ghz))
    return float(out) if np.isscalar(d_m) else out


def segment_intersects_box(p0, p1, box: Box) -> bool:
    """Slab test: does the open segment p0->p1 touch the closed box?

    Touching a face mid-segment counts; touching only at an endpoint does not.
    """
    lo, hi = -math.inf, math.inf
    bounds = ((box.x_min, box.x_max), (box.y_min, box.y_max),
              (box.z_min, box.z_max))
    for axis in range(3):
        d = p1[axis] - p0[axis]
        b_lo, b_hi = bounds[axis]
        if d == 0.0:
            if not (b_lo <= p0[axis] <= b_hi):
                return False
            continue
        ta = (b_lo - p0[axis]) / d
        tb = (b_hi - p0[axis]) / d
        lo = max(lo, min(ta, tb))
        hi = min(hi, max(ta, tb))
    return lo <= hi and hi > 0.0 and lo < 1.0


def los_blocked(scenario: Scenario, ap, receiver) -> bool:
    """True iff any wall or obstacle box blocks the AP-receiver segment."""
    for box in scenario.all_boxes():
        if segment_intersects_box(ap, receiver, box):
            return True
    return False


def expected_gain_db(scenario: Scenario, cell_center) -> float:
    """Expected channel power gain (dB) at a cell center, receiver at h_m."""
    x, y = float(cell_center[0]), float(cell_center[1])
    if not scenario.contains(x, y):
        raise ValueError(f"cell center ({x}, {y}) outside the mobile space")
    rx = (x, y, scenario.h_m)
    ax, ay, az = scenario.ap_position
    d = math.sqrt((ax - x) ** 2 + (ay - y) ** 2 + (az - scenario.h_m) ** 2)
    los = not los_blocked(scenario, scenario.ap_position, rx)
    return -path_loss_db(d, scenario.fc_ghz, los)


def sample_channel(params: RicianParams, blocked: bool, rng_seed,
                   size: int | None = None):
    """Draw fading realizations: fixed unit phasor plus CN(0, 1) scatter.

    A blocked link degenerates to pure Rayleigh. Returns one ChannelSample,
    or an array of complex gains when size is given.
    """
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)
    alpha = 0.0 if blocked else params.alpha_bar
    n = 1 if size is None else size
    scatter = (rng.standard_normal(n) + 1j * rng.standard_normal(n)) / math.sqrt(2.0)
    h = math.sqrt(alpha / (alpha + 1.0)) + math.sqrt(1.0 / (alpha + 1.0)) * scatter
    if size is None:
        h0 = complex(h[0])
        return ChannelSample(h=h0, power=abs(h0) ** 2)
    return h


@dataclass
class RadioMap:
    """Per-cell expected gain over the same lattice as the paired grid.

    gain_db stores -path_loss_db; cells never evaluated hold NaN, and their
    los flag is -1.
    """

    delta: float
    x_max: float
    y_max: float
    fc_ghz: float
    gain_db: np.ndarray
    path_loss_db: np.ndarray
    los: np.ndarray

    @property
    def shape(self) -> tuple[int, int]:
        return self.gain_db.shape

    @property
    def origin(self) -> tuple[float, float]:
        return (-self.x_max + self.delta / 2.0, -self.y_max + self.delta / 2.0)

    def no_data(self) -> np.ndarray:
        return ~np.isfinite(self.gain_db)


def extrusion_heights(grid: OccupancyGrid, scenario: Scenario) -> np.ndarray:
    """Height each occupied cell is extruded to for blockage testing.

    A cell within one cell of a configured wall footprint takes that wall's
    height; otherwise the tallest matching obstacle's height; cells matching
    no configured box (mapping burrs) fall back to the tallest obstacle, or
    wall, configured.
    """
    occ = grid.occupied_mask()
    heights = np.zeros(grid.shape)
    if not occ.any():
        return heights
    xs, ys = grid.center_mesh()
    pad = grid.delta
    if scenario.obstacles:
        fallback = max(box.z_max for box in scenario.obstacles)
    elif scenario.walls:
        fallback = max(box.z_max for box in scenario.walls)
    else:
        fallback = scenario.ceiling_height
    heights[occ] = fallback
    for box in scenario.obstacles:
        near = (box.x_min - pad <= xs) & (xs <= box.x_max + pad) & \
               (box.y_min - pad <= ys) & (ys <= box.y_max + pad) & occ
        heights[near] = np.maximum(heights[near], box.z_max)
    for box in scenario.walls:
        near = (box.x_min - pad <= xs) & (xs <= box.x_max + pad) & \
               (box.y_min - pad <= ys) & (ys <= box.y_max + pad) & occ
        heights[near] = np.maximum(heights[near], box.z_max)
    return heights


def build_radio_map(grid: OccupancyGrid, scenario: Scenario,
                    chunk: int = 4096) -> RadioMap:
    """Radio map implied by an occupancy grid (estimated or ground truth).

    Blockage is evaluated against the grid itself: occupied cells extruded to
    their configured heights, the AP-to-cell segment walked across the cell
    lattice with its height profile compared against the extrusions. The AP
    and target cells themselves never block. Pure function of the grid and
    scenario, so identical grids give identical maps.
    """
    tri = grid.tristate()
    heights = extrusion_heights(grid, scenario)
    ax, ay, az = scenario.ap_position
    h_m = scenario.h_m

    ap_a, ap_b = grid.world_to_grid(
        min(max(ax, -grid.x_max), grid.x_max),
        min(max(ay, -grid.y_max), grid.y_max))
    ap_i, ap_j = ap_a - 1, ap_b - 1

    free_i, free_j = np.nonzero(tri == 0.5)
    blocked = np.zeros(free_i.shape, dtype=bool)
    for s in range(0, len(free_i), chunk):
        ti = free_i[s:s + chunk]
        tj = free_j[s:s + chunk]
        i0 = np.full(ti.shape, ap_i)
        j0 = np.full(tj.shape, ap_j)
        ca, cb, seg = digital_lines_flat(i0, j0, ti, tj)
        counts = np.bincount(seg, minlength=len(ti))
        starts = np.cumsum(counts) - counts
        k = np.arange(len(seg)) - starts[seg]
        n = counts[seg]
        # Endpoint cells are transparent: the AP cell hosts the antenna and
        # the target cell is free by construction.
        interior = (k > 0) & (k < n - 1)
        denom = np.maximum(n - 1, 1).astype(float)
        t_lo = np.clip((k - 0.5) / denom, 0.0, 1.0)
        t_hi = np.clip((k + 0.5) / denom, 0.0, 1.0)
        z_lo = np.minimum(az + t_lo * (h_m - az), az + t_hi * (h_m - az))
        cell_h = heights[ca, cb]
        hits = interior & (cell_h > 0) & (z_lo <= cell_h)
        blocked[s:s + chunk] = np.bincount(
            seg, weights=hits, minlength=len(ti)) > 0

    xs, ys = grid.center_mesh()
    cx = xs[free_i, free_j]
    cy = ys[free_i, free_j]
    d = np.sqrt((ax - cx) ** 2 + (ay - cy) ** 2 + (az - h_m) ** 2)
    d = np.maximum(d, 1e-9)
    loss = np.where(blocked,
                    path_loss_db(d, scenario.fc_ghz, los=False),
                    path_loss_db(d, scenario.fc_ghz, los=True))

    gain = np.full(grid.shape, np.nan)
    pl = np.full(grid.shape, np.nan)
    los = np.full(grid.shape, -1, dtype=np.int8)
    gain[free_i, free_j] = -loss
    pl[free_i, free_j] = loss
    los[free_i, free_j] = (~blocked).astype(np.int8)
    return RadioMap(delta=grid.delta, x_max=grid.x_max, y_max=grid.y_max,
                    fc_ghz=scenario.fc_ghz, gain_db=gain, path_loss_db=pl,
                    los=los)


def write_radio_csv(radio: RadioMap, path) -> None:
    """Row-per-cell export; no-data cells omitted."""
    nx, ny = radio.shape
    ox, oy = radio.origin
    with open(path, "w") as fh:
        fh.write("a,b,x_m,y_m,los,path_loss_db,gain_db\n")
        for i in range(nx):
            for j in range(ny):
                if not np.isfinite(radio.gain_db[i, j]):
                    continue
                x = ox + i * radio.delta
                y = oy + j * radio.delta
                fh.write(f"{i + 1},{j + 1},{x:.6f},{y:.6f},"
                         f"{int(radio.los[i, j])},"
                         f"{radio.path_loss_db[i, j]:.6f},"
                         f"{radio.gain_db[i, j]:.6f}\n")


def write_radio_matrix_csv(radio: RadioMap, path) -> None:
    """Grid-shaped gain export for heatmap tooling (row 1 = highest y)."""
    nx, ny = radio.shape
    with open(path, "w") as fh:
        for j in range(ny - 1, -1, -1):
            row = (f"{radio.gain_db[i, j]:.6f}"
                   if np.isfinite(radio.gain_db[i, j]) else "nan"
                   for i in range(nx))
            fh.write(",".join(row) + "\n")
