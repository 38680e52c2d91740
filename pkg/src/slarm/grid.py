"""Occupancy grid with log-odds cells, digital-line ray tracing, and sub-maps.

Cells are addressed by 1-based indices (a, b) with a along x and b along y.
The center of cell (a, b) is origin + ((a-1) * delta, (b-1) * delta), where
origin is the center of cell (1, 1), i.e. (-x_max + delta/2, -y_max + delta/2).
Internally cells live in a (nx, ny) array indexed [a-1, b-1].

Export view is tri-state: 0 unexplored, 0.5 explored-free, 1 occupied,
derived from log-odds by two thresholds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

L_FREE = -0.4
L_OCC = 0.9
L_CLAMP = 10.0
FREE_THRESHOLD = -2.0
OCC_THRESHOLD = 2.0

# PGM gray levels, the common occupancy-map convention.
PGM_UNKNOWN = 205
PGM_FREE = 254
PGM_OCCUPIED = 0


class GridError(ValueError):
    pass


def _cell_counts(delta: float, x_max: float, y_max: float) -> tuple[int, int]:
    """Cell counts (nx, ny); delta must tile both extents."""
    if delta <= 0:
        raise GridError("delta must be > 0")
    counts = []
    for extent, name in ((2.0 * x_max, "x"), (2.0 * y_max, "y")):
        n = extent / delta
        if abs(n - round(n)) > 1e-6 * max(1.0, n):
            lo = extent / math.ceil(n)
            hi = extent / max(1, math.floor(n))
            raise GridError(
                f"delta {delta} does not divide the {name} extent {extent}; "
                f"nearest valid values: {lo:.6g} or {hi:.6g}")
        counts.append(int(round(n)))
    return counts[0], counts[1]


class OccupancyGrid:
    """Log-odds occupancy grid over the mobile space."""

    def __init__(self, delta: float, x_max: float, y_max: float):
        self.delta = float(delta)
        self.x_max = float(x_max)
        self.y_max = float(y_max)
        self.nx, self.ny = _cell_counts(delta, x_max, y_max)
        self.log_odds = np.zeros((self.nx, self.ny))
        self.version = 0        # bumps on every mutation
        self.occ_version = 0    # bumps only when a cell changes occupancy class
        self._edt_cache: tuple[int, np.ndarray] | None = None
        self._sdf_cache: tuple[int, np.ndarray] | None = None
        self._occ_cache: tuple[int, np.ndarray] | None = None

    # -- construction ------------------------------------------------------

    @classmethod
    def from_tristate(cls, tri: np.ndarray, delta: float, x_max: float,
                      y_max: float) -> "OccupancyGrid":
        grid = cls(delta, x_max, y_max)
        if tri.shape != grid.shape:
            raise GridError(f"tri-state shape {tri.shape} != grid {grid.shape}")
        grid.log_odds = np.where(tri == 1.0, L_CLAMP,
                                 np.where(tri == 0.5, -L_CLAMP, 0.0))
        return grid

    def copy(self) -> "OccupancyGrid":
        out = OccupancyGrid.__new__(OccupancyGrid)
        out.delta, out.x_max, out.y_max = self.delta, self.x_max, self.y_max
        out.nx, out.ny = self.nx, self.ny
        out.log_odds = self.log_odds.copy()
        out.version = self.version
        out.occ_version = self.occ_version
        out._edt_cache = self._edt_cache
        out._sdf_cache = self._sdf_cache
        out._occ_cache = self._occ_cache
        return out

    # -- geometry ----------------------------------------------------------

    @property
    def shape(self) -> tuple[int, int]:
        return (self.nx, self.ny)

    @property
    def origin(self) -> tuple[float, float]:
        """Metric center of cell (1, 1)."""
        return (-self.x_max + self.delta / 2.0, -self.y_max + self.delta / 2.0)

    def grid_center(self, a: int, b: int) -> tuple[float, float]:
        """Metric center of cell (a, b); raises on out-of-bounds indices."""
        if not (1 <= a <= self.nx and 1 <= b <= self.ny):
            raise GridError(f"index ({a}, {b}) outside grid {self.shape}")
        ox, oy = self.origin
        return (ox + (a - 1) * self.delta, oy + (b - 1) * self.delta)

    def center_mesh(self) -> tuple[np.ndarray, np.ndarray]:
        """(nx, ny) meshes of cell-center coordinates."""
        ox, oy = self.origin
        xs = ox + self.delta * np.arange(self.nx)
        ys = oy + self.delta * np.arange(self.ny)
        return np.meshgrid(xs, ys, indexing="ij")

    def world_to_grid(self, x: float, y: float) -> tuple[int, int]:
        """Nearest cell index for a point inside the mobile space.

        Boundary points between two centers round toward the larger index.
        Inverse of grid_center on every cell center.
        """
        if not (-self.x_max <= x <= self.x_max and -self.y_max <= y <= self.y_max):
            raise GridError(f"point ({x}, {y}) outside the mobile space")
        a = int(math.floor((x + self.x_max) / self.delta)) + 1
        b = int(math.floor((y + self.y_max) / self.delta)) + 1
        return (min(a, self.nx), min(b, self.ny))

    def inside(self, x, y):
        return (-self.x_max <= x) & (x <= self.x_max) & \
               (-self.y_max <= y) & (y <= self.y_max)

    def _point_ij(self, x, y):
        """0-based cell indices of points; callers must bounds-check."""
        i = np.floor((np.asarray(x) + self.x_max) / self.delta).astype(np.int64)
        j = np.floor((np.asarray(y) + self.y_max) / self.delta).astype(np.int64)
        return np.clip(i, 0, self.nx - 1), np.clip(j, 0, self.ny - 1)

    # -- state views -------------------------------------------------------

    def tristate(self) -> np.ndarray:
        out = np.full(self.shape, 0.0)
        out[self.log_odds < FREE_THRESHOLD] = 0.5
        out[self.log_odds > OCC_THRESHOLD] = 1.0
        return out

    def occupied_mask(self) -> np.ndarray:
        if self._occ_cache is None or self._occ_cache[0] != self.occ_version:
            self._occ_cache = (self.occ_version, self.log_odds > OCC_THRESHOLD)
        return self._occ_cache[1]

    def free_mask(self) -> np.ndarray:
        return self.log_odds < FREE_THRESHOLD

    def occupied_at(self, x, y):
        """Occupancy at metric points; anything outside the grid is free."""
        i, j = self._point_ij(x, y)
        return self.occupied_mask()[i, j] & self.inside(x, y)

    def nearest_occupied_m(self) -> np.ndarray:
        """Per-cell distance (m) to the nearest occupied cell, cached."""
        if self._edt_cache is None or self._edt_cache[0] != self.occ_version:
            occ = self.occupied_mask()
            if occ.any():
                dist = ndimage.distance_transform_edt(~occ) * self.delta
            else:
                dist = np.full(self.shape, np.inf)
            self._edt_cache = (self.occ_version, dist)
        return self._edt_cache[1]

    def surface_distance_m(self) -> np.ndarray:
        """Signed distance (m) to the occupied-region boundary, cached.

        Positive in free space, negative inside occupied cells; interpolating
        between adjacent cell centers puts the zero crossing on the cell
        face, which is where range returns actually land.
        """
        if self._sdf_cache is None or self._sdf_cache[0] != self.occ_version:
            occ = self.occupied_mask()
            if occ.any():
                out = ndimage.distance_transform_edt(~occ)
                inner = ndimage.distance_transform_edt(occ)
                sdf = (out - inner) * self.delta
            else:
                sdf = np.full(self.shape, np.inf)
            self._sdf_cache = (self.occ_version, sdf)
        return self._sdf_cache[1]

    # -- scan integration ---------------------------------------------------

    def integrate_scan(self, pose, scan, spec) -> tuple[np.ndarray, bool]:
        """Fold one scan into the grid from the given pose.

        Cells along each beam get the free decrement; the endpoint cell of a
        returning beam gets the occupied increment. Returns (touched flat
        indices, whether any cell changed occupancy class).
        """
        px, py, theta = float(pose[0]), float(pose[1]), float(pose[2])
        ranges = scan.ranges
        hit = np.isfinite(ranges)
        reach = np.where(hit, ranges, spec.max_range)
        angles = theta + spec.beam_offsets()
        ex = px + reach * np.cos(angles)
        ey = py + reach * np.sin(angles)
        # Clamp endpoints into the mobile space; the trace stops at the edge.
        ex = np.clip(ex, -self.x_max, self.x_max)
        ey = np.clip(ey, -self.y_max, self.y_max)

        i0, j0 = self._point_ij(px, py)
        i1, j1 = self._point_ij(ex, ey)
        i0 = np.full(i1.shape, int(i0))
        j0 = np.full(j1.shape, int(j0))

        cells_i, cells_j, seg = digital_lines_flat(i0, j0, i1, j1)
        end_i = i1[seg]
        end_j = j1[seg]
        is_end = (cells_i == end_i) & (cells_j == end_j) & hit[seg]

        flat = cells_i * self.ny + cells_j
        size = self.nx * self.ny
        increment = (np.bincount(flat[~is_end], minlength=size) * L_FREE
                     + np.bincount(flat[is_end], minlength=size) * L_OCC)
        touched = np.unique(flat)
        ti, tj = touched // self.ny, touched % self.ny

        before = self.log_odds[ti, tj]
        lo = self.log_odds.reshape(-1)
        lo += increment
        np.clip(lo, -L_CLAMP, L_CLAMP, out=lo)
        self.version += 1

        after = self.log_odds[ti, tj]
        changed = bool(
            ((after > OCC_THRESHOLD) != (before > OCC_THRESHOLD)).any()
            or ((after < FREE_THRESHOLD) != (before < FREE_THRESHOLD)).any())
        if changed:
            self.occ_version += 1
        return touched, changed

    # -- inflation ----------------------------------------------------------

    def inflate(self, r_e: float) -> "OccupancyGrid":
        """Dilate occupied cells by a disc of radius r_e (meters).

        Only explored-free cells can flip to occupied; unexplored cells are
        left untouched.
        """
        if r_e < 0:
            raise GridError("expansion radius must be >= 0")
        out = self.copy()
        r_cells = disc_radius_cells(r_e, self.delta)
        if r_cells == 0:
            return out
        dilated = ndimage.binary_dilation(self.occupied_mask(),
                                          structure=disc_structure(r_cells))
        flip = dilated & self.free_mask()
        out.log_odds[flip] = L_CLAMP
        out.version += 1
        out.occ_version += 1
        out._edt_cache = None
        out._sdf_cache = None
        out._occ_cache = None
        return out

    # -- PGM I/O -------------------------------------------------------------

    def to_pgm(self, path) -> None:
        """Write the tri-state view as ASCII PGM (row 1 = highest y)."""
        tri = self.tristate()
        levels = np.full(self.shape, PGM_UNKNOWN, dtype=int)
        levels[tri == 0.5] = PGM_FREE
        levels[tri == 1.0] = PGM_OCCUPIED
        ox, oy = self.origin
        lines = ["P2",
                 f"# delta {self.delta!r} origin {ox!r} {oy!r}",
                 f"{self.nx} {self.ny}",
                 "255"]
        for j in range(self.ny - 1, -1, -1):
            lines.append(" ".join(str(v) for v in levels[:, j]))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_pgm(cls, path) -> "OccupancyGrid":
        with open(path) as fh:
            tokens = []
            delta = origin = None
            for line in fh:
                if line.startswith("#"):
                    parts = line.split()
                    if "delta" in parts:
                        delta = float(parts[parts.index("delta") + 1])
                    if "origin" in parts:
                        k = parts.index("origin")
                        origin = (float(parts[k + 1]), float(parts[k + 2]))
                    continue
                tokens.extend(line.split())
        if tokens[0] != "P2":
            raise GridError(f"{path}: not an ASCII PGM")
        if delta is None or origin is None:
            raise GridError(f"{path}: missing delta/origin header comment")
        nx, ny = int(tokens[1]), int(tokens[2])
        values = np.array(tokens[4:4 + nx * ny], dtype=int)
        levels = values.reshape(ny, nx)[::-1].T  # undo row-major top-down
        tri = np.zeros((nx, ny))
        tri[levels == PGM_FREE] = 0.5
        tri[levels == PGM_OCCUPIED] = 1.0
        x_max = delta / 2.0 - origin[0]
        y_max = delta / 2.0 - origin[1]
        return cls.from_tristate(tri, delta, x_max, y_max)


# -- digital lines -----------------------------------------------------------


def _round_half_down(p: np.ndarray, q: np.ndarray) -> np.ndarray:
    """round(p / q) for nonnegative ints, ties toward zero."""
    return (2 * p + q - 1) // (2 * q)


def bresenham_trace(start: tuple[int, int], end: tuple[int, int]) -> list[tuple[int, int]]:
    """Integer-error digital line between two cells, inclusive of both.

    The traversal direction is normalized along the major axis, so swapping
    the endpoints yields the same cell set in reverse order.
    """
    a0, b0 = start
    a1, b1 = end
    steep = abs(b1 - b0) > abs(a1 - a0)
    if steep:
        a0, b0, a1, b1 = b0, a0, b1, a1
    flipped = a0 > a1
    if flipped:
        a0, b0, a1, b1 = a1, b1, a0, b0
    d_major = a1 - a0
    d_minor = abs(b1 - b0)
    sign = 1 if b1 >= b0 else -1
    k = np.arange(d_major + 1)
    if d_major == 0:
        minor = np.array([b0])
    else:
        minor = b0 + sign * _round_half_down(k * d_minor, np.int64(d_major))
    major = a0 + k
    if steep:
        major, minor = minor, major
    cells = list(zip(major.tolist(), minor.tolist()))
    if flipped:
        cells.reverse()
    return cells


def digital_lines_flat(a0, b0, a1, b1):
    """Vectorized digital lines for a batch of segments.

    Returns flat (cells_a, cells_b, segment_id) arrays covering every segment
    inclusively, one entry per traced cell, with the same cell sets as
    bresenham_trace.
    """
    a0 = np.asarray(a0, dtype=np.int64)
    b0 = np.asarray(b0, dtype=np.int64)
    a1 = np.asarray(a1, dtype=np.int64)
    b1 = np.asarray(b1, dtype=np.int64)

    da = np.abs(a1 - a0)
    db = np.abs(b1 - b0)
    steep = db > da
    # Work in (major, minor); normalize so the major coordinate increases.
    m0 = np.where(steep, b0, a0)
    m1 = np.where(steep, b1, a1)
    n0 = np.where(steep, a0, b0)
    n1 = np.where(steep, a1, b1)
    rev = m0 > m1
    m0, m1 = np.where(rev, m1, m0), np.where(rev, m0, m1)
    n0, n1 = np.where(rev, n1, n0), np.where(rev, n0, n1)

    d_major = m1 - m0
    d_minor = np.abs(n1 - n0)
    sign = np.where(n1 >= n0, 1, -1)

    counts = d_major + 1
    total = int(counts.sum())
    seg = np.repeat(np.arange(len(counts)), counts)
    starts = np.cumsum(counts) - counts
    k = np.arange(total) - starts[seg]

    dmj = d_major[seg]
    off = np.zeros(total, dtype=np.int64)
    nz = dmj > 0
    off[nz] = _round_half_down(k[nz] * d_minor[seg][nz], dmj[nz])
    major = m0[seg] + k
    minor = n0[seg] + sign[seg] * off

    cells_a = np.where(steep[seg], minor, major)
    cells_b = np.where(steep[seg], major, minor)
    return cells_a, cells_b, seg


# -- inflation helpers --------------------------------------------------------


def disc_radius_cells(r_e: float, delta: float) -> int:
    return int(math.ceil(r_e / delta - 1e-9)) if r_e > 0 else 0


def disc_structure(r_cells: int) -> np.ndarray:
    """Boolean disc: offsets with di^2 + dj^2 <= r^2."""
    di, dj = np.meshgrid(np.arange(-r_cells, r_cells + 1),
                         np.arange(-r_cells, r_cells + 1), indexing="ij")
    return di * di + dj * dj <= r_cells * r_cells


def dilate_occupied(values: np.ndarray, r_cells: int) -> np.ndarray:
    """Dilate value-1 cells of a tri-state array; visited marks survive."""
    if r_cells == 0:
        return values.copy()
    occ = values == 1.0
    dilated = ndimage.binary_dilation(occ, structure=disc_structure(r_cells))
    out = values.copy()
    out[dilated & (values != 0.5)] = 1.0
    return out


# -- sub-maps ------------------------------------------------------------------


@dataclass
class SubMap:
    """Map fragment produced while traversing one trajectory segment.

    cells holds flat indices into the (nx, ny) grid; tri the tri-state value
    observed at each. index orders fragments for the latest-wins merge.
    """

    index: int
    cells: np.ndarray
    tri: np.ndarray
    path: list[tuple[int, int]]


def merge_submaps(shape: tuple[int, int], submaps) -> np.ndarray:
    """Cell-wise latest-wins merge of sub-map fragments into one tri-state map."""
    out = np.zeros(shape)
    flat = out.reshape(-1)
    for sub in sorted(submaps, key=lambda s: s.index):
        flat[sub.cells] = sub.tri
    return out
