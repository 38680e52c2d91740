"""Full-coverage grid exploration with lane sweeps and A* relocation.

Cell values: 0 unexplored, 0.5 visited-free, 1 obstacle. The robot sweeps
along x, advancing lanes in +y with 90/180 degree turns only; when neither a
forward move nor a lane advance can reach unexplored space it relocates to
the nearest reachable unexplored cell along an A* path. Unreachable pockets
end the run and are reported, since the visit-everything condition cannot be
met on them.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np

from .grid import dilate_occupied, disc_radius_cells

MOVE_DIRECTIONS = ((1, 0), (-1, 0), (0, 1), (0, -1))

ACTION_FORWARD = "forward"
ACTION_TURN = "turn"
ACTION_RELOCATE = "relocate"


class CoverageError(ValueError):
    pass


@dataclass
class CoverageState:
    values: np.ndarray
    delta: float
    x_max: float
    y_max: float
    current: tuple[int, int]
    heading: tuple[int, int]
    sweep_sign: int
    start: tuple[int, int]
    final: tuple[int, int]
    trajectory: list = field(default_factory=list)
    expansion_radius: float = 0.0
    border: np.ndarray | None = None   # cells outside the shrunken workspace

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def value(self, cell: tuple[int, int]) -> float:
        return float(self.values[cell[0] - 1, cell[1] - 1])

    def in_bounds(self, cell: tuple[int, int]) -> bool:
        return 1 <= cell[0] <= self.shape[0] and 1 <= cell[1] <= self.shape[1]

    def cell_center(self, cell: tuple[int, int]) -> tuple[float, float]:
        return (-self.x_max + (cell[0] - 0.5) * self.delta,
                -self.y_max + (cell[1] - 0.5) * self.delta)


def init_coverage(estimate: np.ndarray, mse: float, delta: float,
                  x_max: float, y_max: float, r_e: float, rng_seed,
                  start: tuple[int, int] | None = None,
                  valid_start_mask: np.ndarray | None = None) -> CoverageState:
    """Set up exploration over a known or estimated tri-state map.

    The workspace is shrunk by the SLAM mse on each axis (cells with centers
    outside become impassable), known obstacles are inflated by r_e, and the
    start/final cells are drawn uniformly from the unexplored cells unless a
    start is supplied. valid_start_mask further restricts the draw (the
    harness passes truly-free cells so the robot never spawns inside an
    obstacle it does not know about yet).
    """
    if mse < 0:
        raise CoverageError("mse must be >= 0")
    if 2 * x_max - mse <= 0 or 2 * y_max - mse <= 0:
        raise CoverageError("mse shrinks the workspace to nothing")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) \
        else np.random.default_rng(rng_seed)

    nx, ny = estimate.shape
    values = np.where(estimate == 1.0, 1.0, 0.0)
    values = dilate_occupied(values, disc_radius_cells(r_e, delta))

    xs = -x_max + (np.arange(nx) + 0.5) * delta
    ys = -y_max + (np.arange(ny) + 0.5) * delta
    half_x = x_max - mse / 2.0
    half_y = y_max - mse / 2.0
    border = (np.abs(xs)[:, None] > half_x + 1e-12) | \
             (np.abs(ys)[None, :] > half_y + 1e-12)
    values[border] = 1.0

    startable = values == 0.0
    if valid_start_mask is not None:
        startable &= valid_start_mask
    open_cells = np.flatnonzero(startable)
    if len(open_cells) == 0:
        raise CoverageError("no unexplored cell to start from")
    if start is None:
        pick = open_cells[rng.integers(len(open_cells))]
        start = (int(pick) // ny + 1, int(pick) % ny + 1)
    pick_f = open_cells[rng.integers(len(open_cells))]
    final = (int(pick_f) // ny + 1, int(pick_f) % ny + 1)

    state = CoverageState(values=values, delta=delta, x_max=x_max,
                          y_max=y_max, current=start, heading=(1, 0),
                          sweep_sign=1, start=start, final=final,
                          expansion_radius=r_e, border=border)
    state.values[start[0] - 1, start[1] - 1] = 0.5
    state.trajectory.append(start)
    return state


def _move(state: CoverageState, cell: tuple[int, int]) -> None:
    da = cell[0] - state.current[0]
    db = cell[1] - state.current[1]
    state.heading = (da, db)
    state.current = cell
    if state.values[cell[0] - 1, cell[1] - 1] == 0.0:
        state.values[cell[0] - 1, cell[1] - 1] = 0.5
    state.trajectory.append(cell)


def ggmr_step(state: CoverageState) -> tuple[CoverageState, str]:
    """One sweep decision: forward, lane advance (turn), or relocate request.

    Forward follows the current sweep direction into unexplored space. When
    that is blocked, the three +y lane cells (straight up and both diagonals)
    are inspected: any unexplored one triggers a 90-degree advance through
    the up cell and the sweep direction flips. Otherwise the robot asks to be
    relocated.
    """
    a, b = state.current
    ahead = (a + state.sweep_sign, b)
    if state.in_bounds(ahead) and state.value(ahead) == 0.0:
        _move(state, ahead)
        return state, ACTION_FORWARD

    up = (a, b + 1)
    lane = [up, (a - 1, b + 1), (a + 1, b + 1)]
    any_zero = any(state.in_bounds(c) and state.value(c) == 0.0 for c in lane)
    if any_zero and state.in_bounds(up) and state.value(up) != 1.0:
        _move(state, up)
        state.sweep_sign = -state.sweep_sign
        return state, ACTION_TURN
    return state, ACTION_RELOCATE


def astar(values: np.ndarray, start: tuple[int, int],
          goal: tuple[int, int]) -> list[tuple[int, int]]:
    """4-connected shortest path avoiding obstacle cells.

    Manhattan heuristic, expansion ties broken by smaller (a, b). Returns []
    when the goal is unreachable.
    """
    nx, ny = values.shape
    for name, cell in (("start", start), ("goal", goal)):
        if not (1 <= cell[0] <= nx and 1 <= cell[1] <= ny):
            raise CoverageError(f"{name} {cell} out of bounds")
        if values[cell[0] - 1, cell[1] - 1] == 1.0:
            raise CoverageError(f"{name} {cell} is an obstacle cell")
    if start == goal:
        return [start]

    def h(cell):
        return abs(cell[0] - goal[0]) + abs(cell[1] - goal[1])

    open_heap = [(h(start), start[0], start[1])]
    g_score = {start: 0}
    parent = {}
    closed = set()
    while open_heap:
        _, ca, cb = heapq.heappop(open_heap)
        cell = (ca, cb)
        if cell in closed:
            continue
        if cell == goal:
            path = [cell]
            while cell in parent:
                cell = parent[cell]
                path.append(cell)
            path.reverse()
            return path
        closed.add(cell)
        g = g_score[cell]
        for da, db in MOVE_DIRECTIONS:
            nb = (ca + da, cb + db)
            if not (1 <= nb[0] <= nx and 1 <= nb[1] <= ny):
                continue
            if values[nb[0] - 1, nb[1] - 1] == 1.0 or nb in closed:
                continue
            tentative = g + 1
            if tentative < g_score.get(nb, math.inf):
                g_score[nb] = tentative
                parent[nb] = cell
                heapq.heappush(open_heap, (tentative + h(nb), nb[0], nb[1]))
    return []


def select_new_start(state: CoverageState) -> tuple[int, int] | None:
    """Nearest reachable unexplored cell by path cost; ties smallest (a, b).

    Level-synchronous flood from the current cell over passable cells; the
    first level containing unexplored cells decides. None when nothing is
    reachable.
    """
    nx, ny = state.shape
    passable = state.values != 1.0
    zero = state.values == 0.0
    reached = np.zeros((nx, ny), dtype=bool)
    frontier = np.zeros((nx, ny), dtype=bool)
    frontier[state.current[0] - 1, state.current[1] - 1] = True
    reached |= frontier
    while frontier.any():
        hits = frontier & zero
        if hits.any():
            flat = np.flatnonzero(hits)
            best = flat.min()  # row-major == (a, b) lexicographic
            return (int(best) // ny + 1, int(best) % ny + 1)
        spread = np.zeros((nx, ny), dtype=bool)
        spread[1:, :] |= frontier[:-1, :]
        spread[:-1, :] |= frontier[1:, :]
        spread[:, 1:] |= frontier[:, :-1]
        spread[:, :-1] |= frontier[:, 1:]
        frontier = spread & passable & ~reached
        reached |= frontier
    return None


def flood_reachable(values: np.ndarray, start: tuple[int, int]) -> np.ndarray:
    """Mask of cells 4-connected to start through passable cells."""
    passable = values != 1.0
    labels, _ = _label4(passable)
    return labels == labels[start[0] - 1, start[1] - 1]


def _label4(mask: np.ndarray):
    from scipy import ndimage
    structure = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]])
    return ndimage.label(mask, structure=structure)


@dataclass
class CoverageReport:
    covered_cells: int
    reachable_cells: int
    coverage_rate: float
    steps: int
    path_length_m: float
    relocations: int
    unreachable_free_cells: int
    completed: bool
    start: tuple[int, int]
    final: tuple[int, int]

    def to_dict(self) -> dict:
        return {
            "covered_cells": self.covered_cells,
            "reachable_cells": self.reachable_cells,
            "coverage_rate": self.coverage_rate,
            "steps": self.steps,
            "path_length_m": self.path_length_m,
            "relocations": self.relocations,
            "unreachable_free_cells": self.unreachable_free_cells,
            "completed": self.completed,
            "start": list(self.start),
            "final": list(self.final),
        }


def run_coverage(state: CoverageState, slam_hook=None,
                 max_steps: int | None = None) -> tuple[list, CoverageReport]:
    """Drive the sweep until no reachable unexplored cell remains.

    slam_hook(state, from_cell, to_cell) runs on every cell transition; it
    may update state.values with newly sensed obstacles (visited marks and
    the current cell must stay passable) and may veto the move by returning
    False, in which case the robot stays put and the target cell is recorded
    as an obstacle. Relocation paths blocked mid-walk are replanned.
    """
    if max_steps is None:
        max_steps = 50 * state.values.size
    if max_steps <= 0:
        raise CoverageError("max_steps must be > 0")

    steps = 0
    relocations = 0
    completed = True

    def attempt(frm, heading0, sweep0) -> bool:
        """Confirm the move just made into state.current, or roll it back."""
        nonlocal steps
        to = state.current
        ok = True if slam_hook is None else slam_hook(state, frm, to)
        if ok is not False:
            steps += 1
            return True
        state.current = frm
        state.heading = heading0
        state.sweep_sign = sweep0
        state.trajectory.pop()
        state.values[to[0] - 1, to[1] - 1] = 1.0
        return False

    while True:
        if steps >= max_steps:
            completed = False
            break
        frm = state.current
        heading0, sweep0 = state.heading, state.sweep_sign
        state, action = ggmr_step(state)
        if action != ACTION_RELOCATE:
            attempt(frm, heading0, sweep0)
            continue
        target = select_new_start(state)
        if target is None:
            break
        relocations += 1
        path = astar(state.values, state.current, target)
        if not path:
            break
        for cell in path[1:]:
            if state.values[cell[0] - 1, cell[1] - 1] == 1.0:
                break  # sensed obstacle mid-walk; replan on the next pass
            frm = state.current
            heading0, sweep0 = state.heading, state.sweep_sign
            _move(state, cell)
            if not attempt(frm, heading0, sweep0):
                break
            if steps >= max_steps:
                completed = False
                break
        if not completed:
            break

    reach = flood_reachable(state.values, state.start)
    covered = int((state.values == 0.5).sum())
    reachable = int((reach & (state.values != 1.0)).sum())
    unreachable_free = int(((state.values == 0.0) & ~reach).sum())
    rate = covered / reachable if reachable else 0.0
    report = CoverageReport(
        covered_cells=covered,
        reachable_cells=reachable,
        coverage_rate=rate,
        steps=steps,
        path_length_m=steps * state.delta,
        relocations=relocations,
        unreachable_free_cells=unreachable_free,
        completed=completed,
        start=state.start,
        final=state.final,
    )
    return state.trajectory, report


def write_trajectory_csv(state: CoverageState, trajectory,
                         path) -> None:
    """CSV export of the visited cell sequence with metric centers."""
    with open(path, "w") as fh:
        fh.write("step,a,b,x_m,y_m,action\n")
        prev = None
        for k, cell in enumerate(trajectory):
            x, y = state.cell_center(cell)
            if k == 0:
                action = "start"
            elif prev is not None and abs(cell[0] - prev[0]) + abs(cell[1] - prev[1]) == 1:
                action = "move"
            else:
                action = "jump"
            fh.write(f"{k},{cell[0]},{cell[1]},{x:.6f},{y:.6f},{action}\n")
            prev = cell
