"""Occupancy-grid worlds, expert demonstrations and distance transforms.

Coordinates: a point ``(x, y)`` in meters lies in cell ``(row, col) =
(floor(y / res), floor(x / res))``. Cell centers sit at half-integer
multiples of the resolution. ``cells[row, col]`` is 1 when occupied.
"""

from __future__ import annotations

import enum
import heapq
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

DEFAULT_RESOLUTION = 0.1
MAX_GENERATION_ATTEMPTS = 25

_SQRT2 = math.sqrt(2.0)
# (drow, dcol, step length in cells)
_MOVES = [(-1, 0, 1.0), (1, 0, 1.0), (0, -1, 1.0), (0, 1, 1.0),
          (-1, -1, _SQRT2), (-1, 1, _SQRT2), (1, -1, _SQRT2), (1, 1, _SQRT2)]


class ScenarioGenerationError(RuntimeError):
    pass


class NoPathError(RuntimeError):
    pass


class ScenarioKind(str, enum.Enum):
    TJUNCTION = "TJunction"
    CORRIDOR = "Corridor"
    CLUTTER = "Clutter"
    OPEN = "Open"

    @classmethod
    def parse(cls, value) -> "ScenarioKind":
        if isinstance(value, cls):
            return value
        for kind in cls:
            if kind.value.lower() == str(value).lower():
                return kind
        raise ValueError(f"unknown scenario kind {value!r}")


@dataclass(frozen=True, eq=False)
class OccupancyGrid:
    cells: np.ndarray
    resolution: float = DEFAULT_RESOLUTION
    closed: bool = True

    def __post_init__(self):
        c = np.array(self.cells, dtype=np.uint8, copy=True)
        if c.ndim != 2:
            raise ValueError("cells must be a 2-D array")
        if c.shape[0] < 8 or c.shape[1] < 8:
            raise ValueError(f"grid must be at least 8x8, got {c.shape}")
        if not np.isin(c, (0, 1)).all():
            raise ValueError("cell values must be 0 or 1")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if self.closed and not (c[0].all() and c[-1].all() and c[:, 0].all() and c[:, -1].all()):
            raise ValueError("closed grid requires occupied border cells")
        c.setflags(write=False)
        object.__setattr__(self, "cells", c)

    def __eq__(self, other):
        return (isinstance(other, OccupancyGrid) and self.resolution == other.resolution
                and self.closed == other.closed and np.array_equal(self.cells, other.cells))

    @property
    def height(self) -> int:
        return self.cells.shape[0]

    @property
    def width(self) -> int:
        return self.cells.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.cells.shape

    @property
    def free(self) -> np.ndarray:
        return self.cells == 0

    @property
    def extent(self) -> tuple[float, float]:
        """World size (x extent, y extent) in meters."""
        return self.width * self.resolution, self.height * self.resolution

    def in_bounds(self, p) -> bool:
        x, y = p
        w, h = self.extent
        return 0.0 <= x <= w and 0.0 <= y <= h

    def cell_of(self, p) -> tuple[int, int]:
        x, y = p
        row = min(max(int(math.floor(y / self.resolution)), 0), self.height - 1)
        col = min(max(int(math.floor(x / self.resolution)), 0), self.width - 1)
        return row, col

    def center(self, cell) -> np.ndarray:
        row, col = cell
        return np.array([(col + 0.5) * self.resolution, (row + 0.5) * self.resolution])

    def is_free_point(self, p) -> bool:
        return self.in_bounds(p) and self.cells[self.cell_of(p)] == 0


@dataclass(frozen=True, eq=False)
class Scenario:
    grid: OccupancyGrid
    start: np.ndarray
    goal: np.ndarray
    seed: int
    kind: ScenarioKind
    # TJunction only: half-open row range in which the two routes are
    # separated by the central block.
    corridor_band: tuple[int, int] | None = None

    def __post_init__(self):
        object.__setattr__(self, "start", np.array(self.start, dtype=float))
        object.__setattr__(self, "goal", np.array(self.goal, dtype=float))
        object.__setattr__(self, "kind", ScenarioKind.parse(self.kind))
        for name in ("start", "goal"):
            p = getattr(self, name)
            p.setflags(write=False)
            if not self.grid.is_free_point(p):
                raise ValueError(f"{name} {tuple(p)} is not in a free cell")
        if not cells_connected(self.grid.free, self.grid.cell_of(self.start), self.grid.cell_of(self.goal)):
            raise ValueError("start and goal are not connected through free space")

    def __eq__(self, other):
        return (isinstance(other, Scenario) and self.grid == other.grid and self.seed == other.seed
                and self.kind == other.kind and self.corridor_band == other.corridor_band
                and np.array_equal(self.start, other.start) and np.array_equal(self.goal, other.goal))

    @property
    def start_cell(self) -> tuple[int, int]:
        return self.grid.cell_of(self.start)

    @property
    def goal_cell(self) -> tuple[int, int]:
        return self.grid.cell_of(self.goal)


@dataclass(frozen=True, eq=False)
class LabelField:
    """Per-cell labels y in [0, 1]; keeps the demonstration paths that made it."""

    values: np.ndarray
    demonstrations: tuple = field(default=(), repr=False)

    def __post_init__(self):
        v = np.clip(np.array(self.values, dtype=float, copy=True), 0.0, 1.0)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def shape(self):
        return self.values.shape


# ---------------------------------------------------------------------------
# Flood fill
# ---------------------------------------------------------------------------

def free_components(free: np.ndarray) -> np.ndarray:
    """8-connected component labels of free cells (0 on occupied cells)."""
    labels, _ = ndimage.label(free, structure=np.ones((3, 3), dtype=int))
    return labels


def cells_connected(free: np.ndarray, a, b) -> bool:
    """4-connected reachability, matching motion that may not cut obstacle corners."""
    if not (free[a] and free[b]):
        return False
    labels, _ = ndimage.label(free)
    return labels[a] == labels[b]


def corridor_components(scenario: Scenario) -> np.ndarray:
    """Label the separated route passages of a TJunction scenario.

    Flood fill is restricted to the corridor band, where the central block
    splits free space. Returns an int array over the grid, zero outside the band.
    """
    if scenario.corridor_band is None:
        raise ValueError("scenario has no corridor band")
    r0, r1 = scenario.corridor_band
    band = np.zeros(scenario.grid.shape, dtype=bool)
    band[r0:r1] = scenario.grid.free[r0:r1]
    labels, _ = ndimage.label(band, structure=np.ones((3, 3), dtype=int))
    return labels


def corridor_class(scenario: Scenario, points: np.ndarray) -> int:
    """Passage id traversed by a polyline (first band cell it touches), 0 if none."""
    labels = corridor_components(scenario)
    pts = densify(np.asarray(points, float), scenario.grid.resolution * 0.25)
    for p in pts:
        lab = labels[scenario.grid.cell_of(p)]
        if lab:
            return int(lab)
    return 0


def densify(points: np.ndarray, max_step: float) -> np.ndarray:
    out = [points[:1]]
    for a, b in zip(points[:-1], points[1:]):
        n = max(1, int(math.ceil(np.linalg.norm(b - a) / max_step)))
        s = np.arange(1, n + 1)[:, None] / n
        out.append(a + s * (b - a))
    return np.concatenate(out)


# ---------------------------------------------------------------------------
# Scenario generation
# ---------------------------------------------------------------------------

_KIND_CODES = {ScenarioKind.TJUNCTION: 1, ScenarioKind.CORRIDOR: 2, ScenarioKind.CLUTTER: 3, ScenarioKind.OPEN: 4}


def _normalize_size(size) -> tuple[int, int]:
    if isinstance(size, (int, np.integer)):
        h = w = int(size)
    else:
        h, w = (int(s) for s in size)
    if not (8 <= h <= 512 and 8 <= w <= 512):
        raise ValueError(f"grid size must be within [8, 512] per axis, got {(h, w)}")
    return h, w


def generate_scenario(kind, seed: int, size=64, resolution: float = DEFAULT_RESOLUTION) -> Scenario:
    """Build a closed-world scenario; a pure function of its arguments.

    ``size`` is an int (square) or ``(height, width)`` in cells.
    """
    kind = ScenarioKind.parse(kind)
    h, w = _normalize_size(size)
    builder = {
        ScenarioKind.OPEN: _build_open,
        ScenarioKind.TJUNCTION: _build_tjunction,
        ScenarioKind.CORRIDOR: _build_corridor,
        ScenarioKind.CLUTTER: _build_clutter,
    }[kind]
    last_error = None
    for attempt in range(MAX_GENERATION_ATTEMPTS):
        rng = np.random.default_rng([int(seed) & 0xFFFFFFFFFFFFFFFF, _KIND_CODES[kind], h, w, attempt])
        try:
            cells, start, goal, band = builder(rng, h, w)
        except _Retry as exc:
            last_error = str(exc)
            continue
        cells[0, :] = cells[-1, :] = 1
        cells[:, 0] = cells[:, -1] = 1
        grid = OccupancyGrid(cells, resolution)
        start_p, goal_p = grid.center(start), grid.center(goal)
        free = grid.free
        if not (free[start] and free[goal]) or start == goal:
            last_error = "start/goal blocked"
            continue
        if not cells_connected(free, start, goal):
            last_error = "start and goal disconnected"
            continue
        scenario = Scenario(grid, start_p, goal_p, int(seed), kind, band)
        if kind is ScenarioKind.TJUNCTION and not _has_two_routes(scenario):
            last_error = "T-junction lacks two separated routes"
            continue
        return scenario
    raise ScenarioGenerationError(
        f"could not generate {kind.value} scenario (seed={seed}, size={(h, w)}): {last_error}")


class _Retry(Exception):
    pass


def _build_open(rng, h, w):
    cells = np.zeros((h, w), dtype=np.uint8)
    return cells, (1, 1), (h - 2, w - 2), None


def _build_tjunction(rng, h, w):
    """Stem from the start into a rectangular loop, stem out to the goal.

    The layout is mirror-symmetric about the start/goal column, so the two
    sides of the loop are equally short.
    """
    if h < 20 or w < 16:
        raise _Retry("grid too small for a T-junction")
    cells = np.ones((h, w), dtype=np.uint8)
    a = w // 2
    hw = 1
    x_max = min(a - 2, w - 3 - a) - hw
    x_min = hw + 3
    if x_max < x_min:
        raise _Retry("grid too narrow")
    span = int(rng.integers(x_min, x_max + 1))
    rs = int(rng.integers(2, 4))
    rg = h - 1 - int(rng.integers(2, 4))
    lo, hi = rs + hw + 3, rg - hw - 3
    if hi - lo < 2 * hw + 5:
        raise _Retry("grid too short")
    third = (hi - lo) / 3.0
    rc = int(rng.integers(lo, max(lo + 1, int(lo + third))))
    rt = int(rng.integers(max(rc + 2 * hw + 4, int(hi - third)), hi + 1))
    if rt - rc < 2 * hw + 4:
        raise _Retry("loop too short")

    def carve(r0, r1, c0, c1):
        cells[max(r0, 1):min(r1, h - 1) + 1, max(c0, 1):min(c1, w - 1) + 1] = 0

    carve(rs, rc, a - hw, a + hw)                          # entry stem
    carve(rc - hw, rc + hw, a - span - hw, a + span + hw)  # lower bar
    carve(rt - hw, rt + hw, a - span - hw, a + span + hw)  # upper bar
    carve(rc, rt, a - span - hw, a - span + hw)            # left arm
    carve(rc, rt, a + span - hw, a + span + hw)            # right arm
    carve(rt, rg, a - hw, a + hw)                          # exit stem
    band = (rc + hw + 1, rt - hw)
    _chamfer(cells, 1)
    return cells, (rs, a), (rg, a), band


def _chamfer(cells: np.ndarray, passes: int) -> None:
    """Clear convex wall corners in place (border cells are kept).

    A wall cell with a free vertical and a free horizontal neighbor is a
    corner; clearing those repeatedly bevels turns so that a coarse polyline
    through the corridor center does not clip them.
    """
    for _ in range(passes):
        free = cells == 0
        vert = np.zeros_like(free)
        horz = np.zeros_like(free)
        vert[1:-1, :] = free[:-2, :] | free[2:, :]
        horz[:, 1:-1] = free[:, :-2] | free[:, 2:]
        corner = ~free & vert & horz
        corner[[0, -1], :] = False
        corner[:, [0, -1]] = False
        cells[corner] = 0


def _has_two_routes(scenario: Scenario) -> bool:
    labels = corridor_components(scenario)
    ids = [i for i in np.unique(labels) if i]
    if len(ids) < 2:
        return False
    # each passage must link start and goal once the other is blocked
    for i in ids:
        free = scenario.grid.free.copy()
        for j in ids:
            if j != i:
                free[labels == j] = False
        if not cells_connected(free, scenario.start_cell, scenario.goal_cell):
            return False
    return True


def _build_corridor(rng, h, w):
    """Serpentine corridor: horizontal lanes joined at alternating ends."""
    if h < 14 or w < 14:
        raise _Retry("grid too small for a corridor")
    cells = np.ones((h, w), dtype=np.uint8)
    lanes = int(rng.integers(2, 4)) if h >= 56 else 2
    while lanes > 2 and (h - 2) // lanes < 10:
        lanes -= 1
    pitch = (h - 2) / lanes
    top_width = max(3, min(7, int(pitch) - 3))
    rows = []
    for i in range(lanes):
        width = int(rng.integers(min(5, top_width), top_width + 1))
        top = 1 + int(round(i * pitch)) + int(rng.integers(0, max(1, int(pitch) - width - 1)))
        rows.append((top, top + width - 1))
    c_lo = 1 + int(rng.integers(1, 3))
    c_hi = w - 2 - int(rng.integers(1, 3))
    for r0, r1 in rows:
        cells[r0:r1 + 1, c_lo:c_hi + 1] = 0
    for i in range(lanes - 1):
        width = int(rng.integers(5, 8)) if w >= 32 else 3
        right = i % 2 == 0
        c0 = c_hi - width + 1 if right else c_lo
        cells[rows[i][0]:rows[i + 1][1] + 1, c0:c0 + width] = 0
    start = ((rows[0][0] + rows[0][1]) // 2, c_lo + 1)
    last = rows[-1]
    goal_col = c_lo + 1 if lanes % 2 == 0 else c_hi - 1
    goal = ((last[0] + last[1]) // 2, goal_col)
    return cells, start, goal, None


def _build_clutter(rng, h, w):
    cells = np.zeros((h, w), dtype=np.uint8)
    rr, cc = np.mgrid[0:h, 0:w]
    start = (int(rng.integers(2, 5)), int(rng.integers(2, 5)))
    goal = (h - 1 - int(rng.integers(2, 5)), w - 1 - int(rng.integers(2, 5)))
    area = (h - 2) * (w - 2)
    n_obs = int(rng.integers(max(2, area // 220), max(3, area // 120) + 1))
    big = max(2, min(h, w) // 7)
    for _ in range(n_obs):
        r, c = int(rng.integers(2, h - 2)), int(rng.integers(2, w - 2))
        if rng.random() < 0.5:
            hh, ww = int(rng.integers(1, big + 1)), int(rng.integers(1, big + 1))
            cells[max(r - hh, 1):r + hh, max(c - ww, 1):c + ww] = 1
        else:
            rad = float(rng.uniform(1.0, big))
            cells[(rr - r) ** 2 + (cc - c) ** 2 <= rad * rad] = 1
    keep = 5.0
    for r, c in (start, goal):
        cells[(rr - r) ** 2 + (cc - c) ** 2 <= keep * keep] = 0
    return cells, start, goal, None


# ---------------------------------------------------------------------------
# Distance transform and planning
# ---------------------------------------------------------------------------

def distance_transform(grid: OccupancyGrid) -> np.ndarray:
    """Euclidean distance (meters) from each cell center to the nearest occupied center."""
    occ = grid.cells.astype(bool)
    if not occ.any():
        raise ValueError("distance transform needs at least one occupied cell")
    return ndimage.distance_transform_edt(~occ) * grid.resolution


def astar(free: np.ndarray, start, goal, cell_cost: np.ndarray | None = None) -> list[tuple[int, int]] | None:
    """8-connected A* over free cells; diagonal moves may not cut obstacle corners.

    Step cost is the step length (cells) times the mean ``cell_cost`` of its
    endpoints (cost defaults to 1 and must be >= 1 for the octile heuristic
    to stay admissible). Ties go to the lexicographically smaller cell.
    """
    start, goal = tuple(start), tuple(goal)
    if not (free[start] and free[goal]):
        return None
    h, w = free.shape
    cost = np.ones(free.shape) if cell_cost is None else cell_cost
    gr, gc = goal

    def heur(r, c):
        dr, dc = abs(r - gr), abs(c - gc)
        return (dr + dc) + (_SQRT2 - 2.0) * min(dr, dc)

    g = {start: 0.0}
    parent = {start: None}
    heap = [(heur(*start), 0.0, start)]
    closed = set()
    while heap:
        _, gcur, cur = heapq.heappop(heap)
        if cur in closed:
            continue
        if cur == goal:
            break
        closed.add(cur)
        r, c = cur
        for dr, dc, step in _MOVES:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < h and 0 <= nc < w) or not free[nr, nc]:
                continue
            if dr and dc and not (free[r + dr, c] and free[r, c + dc]):
                continue
            nxt = (nr, nc)
            ng = gcur + step * 0.5 * (cost[r, c] + cost[nr, nc])
            if ng < g.get(nxt, math.inf) - 1e-12:
                g[nxt] = ng
                parent[nxt] = cur
                heapq.heappush(heap, (ng + heur(nr, nc), ng, nxt))
    if goal not in parent:
        return None
    path = [goal]
    while path[-1] != start:
        path.append(parent[path[-1]])
    return path[::-1]


def cell_path_length(path, resolution: float) -> float:
    arr = np.asarray(path, dtype=float)
    return float(np.linalg.norm(np.diff(arr, axis=0), axis=1).sum() * resolution)


def shortest_path_length(scenario: Scenario) -> float:
    """Grid A* free-space path length (meters) between the start and goal points."""
    path = astar(scenario.grid.free, scenario.start_cell, scenario.goal_cell)
    if path is None:
        raise NoPathError("no free-space path between start and goal")
    pts = np.array([scenario.grid.center(c) for c in path])
    pts[0], pts[-1] = scenario.start, scenario.goal
    return float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum())


def clearance_cost(grid: OccupancyGrid, radius: float = 0.3, weight: float = 2.0) -> np.ndarray:
    """Cell cost multiplier >= 1 that grows as cells approach obstacles."""
    d = distance_transform(grid)
    return 1.0 + weight * np.clip((radius - d) / radius, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Demonstrations
# ---------------------------------------------------------------------------

def _nearest_free_cell(grid: OccupancyGrid, p) -> tuple[int, int]:
    _, idx = ndimage.distance_transform_edt(grid.cells.astype(bool), return_indices=True)
    cell = grid.cell_of(p)
    return int(idx[0][cell]), int(idx[1][cell])


def _climb(clearance: np.ndarray, cell) -> tuple[int, int]:
    """Steepest ascent on the clearance map; experts pass through corridor centers."""
    h, w = clearance.shape
    while True:
        r, c = cell
        best = cell
        for dr, dc, _ in _MOVES:
            nr, nc = r + dr, c + dc
            if 0 <= nr < h and 0 <= nc < w and clearance[nr, nc] > clearance[best] + 1e-12:
                best = (nr, nc)
        if best == cell:
            return cell
        cell = best


def demonstration_paths(scenario: Scenario, n_demos: int, noise: float, seed: int | None = None,
                        clearance_radius: float = 0.4, clearance_weight: float = 3.0) -> list[list[tuple[int, int]]]:
    """Expert cell paths: A* via one jittered waypoint on the start-goal segment."""
    if n_demos < 1:
        raise ValueError("n_demos must be >= 1")
    grid = scenario.grid
    rng = np.random.default_rng([scenario.seed & 0xFFFFFFFFFFFFFFFF, 0xDE30, 0 if seed is None else int(seed)])
    cost = clearance_cost(grid, clearance_radius, clearance_weight)
    # waypoints are confined to the cells A* can reach from the start (4-connected)
    comp, _ = ndimage.label(grid.free)
    reach = comp == comp[scenario.start_cell]
    clearance = np.where(reach, distance_transform(grid), -np.inf)
    _, nearest = ndimage.distance_transform_edt(~reach, return_indices=True)
    w, h = grid.extent
    paths = []
    for _ in range(n_demos):
        frac = rng.uniform(0.25, 0.75)
        p = scenario.start + frac * (scenario.goal - scenario.start) + rng.normal(0.0, 1.0, 2) * noise
        p = np.clip(p, 0.0, [w - 1e-9, h - 1e-9])
        cell = grid.cell_of(p)
        wp = _climb(clearance, (int(nearest[0][cell]), int(nearest[1][cell])))
        first = astar(grid.free, scenario.start_cell, wp, cost)
        second = astar(grid.free, wp, scenario.goal_cell, cost)
        if first is None or second is None:
            raise NoPathError("no feasible demonstration path")
        paths.append(first + second[1:])
    return paths


def rasterize_paths(shape, paths, radius: int = 1) -> np.ndarray:
    mask = np.zeros(shape, dtype=bool)
    for path in paths:
        for r, c in path:
            mask[r, c] = True
    if radius > 0:
        mask = ndimage.binary_dilation(mask, structure=np.ones((2 * radius + 1,) * 2, dtype=bool))
    return mask


def synthesize_demonstrations(scenario: Scenario, n_demos: int, noise: float, seed: int | None = None,
                              dilation: int = 1) -> LabelField:
    """Binary labels: 1 on dilated demonstration cells, 0 elsewhere and on obstacles."""
    paths = demonstration_paths(scenario, n_demos, noise, seed)
    mask = rasterize_paths(scenario.grid.shape, paths, dilation) & scenario.grid.free
    return LabelField(mask.astype(float), tuple(tuple(p) for p in paths))


def path_to_points(grid: OccupancyGrid, path, start=None, goal=None) -> np.ndarray:
    pts = np.array([grid.center(c) for c in path])
    if start is not None:
        pts[0] = start
    if goal is not None:
        pts[-1] = goal
    return pts


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def scenario_to_dict(s: Scenario) -> dict:
    return {
        "kind": s.kind.value,
        "seed": s.seed,
        "size": [s.grid.height, s.grid.width],
        "resolution": s.grid.resolution,
        "start": [float(v) for v in s.start],
        "goal": [float(v) for v in s.goal],
    }


def scenario_from_dict(d: dict) -> Scenario:
    """Regenerate from (kind, seed, size, resolution); start/goal entries override."""
    missing = {"kind", "seed", "size"} - set(d)
    if missing:
        raise ValueError(f"scenario config missing keys: {sorted(missing)}")
    s = generate_scenario(d["kind"], int(d["seed"]), d["size"], float(d.get("resolution", DEFAULT_RESOLUTION)))
    start = d.get("start")
    goal = d.get("goal")
    if start is None and goal is None:
        return s
    return Scenario(s.grid, start if start is not None else s.start, goal if goal is not None else s.goal,
                    s.seed, s.kind, s.corridor_band)


def write_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2, sort_keys=True) + "\n")


def read_scenario(path) -> Scenario:
    return scenario_from_dict(json.loads(Path(path).read_text()))


def write_grid_pgm(grid: OccupancyGrid, path, binary: bool = True) -> None:
    """Greymap with free=255, occupied=0; row 0 of the file is grid row 0."""
    img = np.where(grid.cells == 1, 0, 255).astype(np.uint8)
    header = f"{'P5' if binary else 'P2'}\n# resolution {grid.resolution!r}\n{grid.width} {grid.height}\n255\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        if binary:
            fh.write(img.tobytes())
        else:
            fh.write("\n".join(" ".join(str(v) for v in row) for row in img).encode("ascii") + b"\n")


def read_pgm(path) -> tuple[np.ndarray, int, dict]:
    """Return (pixels, maxval, comments) for P2/P5 files, 8- or 16-bit."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    comments: dict[str, str] = {}
    pos = 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            parts = data[pos + 1:end].decode("ascii").split(None, 1)
            if len(parts) == 2:
                comments[parts[0]] = parts[1].strip()
            pos = end + 1
            continue
        end = pos
        while end < len(data) and not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic == b"P5":
        pos += 1
        dtype = np.dtype(">u2") if maxval > 255 else np.dtype(np.uint8)
        pix = np.frombuffer(data[pos:pos + width * height * dtype.itemsize], dtype=dtype)
    elif magic == b"P2":
        pix = np.array(data[pos:].split(), dtype=np.int64)[: width * height]
    else:
        raise ValueError(f"unsupported greymap type {magic!r}")
    return pix.reshape(height, width).astype(np.int64), maxval, comments


def read_grid_pgm(path, resolution: float | None = None) -> OccupancyGrid:
    pix, maxval, comments = read_pgm(path)
    if resolution is None:
        resolution = float(comments.get("resolution", DEFAULT_RESOLUTION))
    return OccupancyGrid((pix < (maxval + 1) // 2).astype(np.uint8), resolution)


def write_grid_csv(grid: OccupancyGrid, path) -> None:
    lines = ["width,height,resolution", f"{grid.width},{grid.height},{grid.resolution!r}"]
    lines += [",".join(str(int(v)) for v in row) for row in grid.cells]
    Path(path).write_text("\n".join(lines) + "\n")


def read_grid_csv(path) -> OccupancyGrid:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if lines[0].replace(" ", "") != "width,height,resolution":
        raise ValueError("grid csv must start with header 'width,height,resolution'")
    w, h, res = lines[1].split(",")
    cells = np.array([[int(v) for v in ln.split(",")] for ln in lines[2:]], dtype=np.uint8)
    if cells.shape != (int(h), int(w)):
        raise ValueError(f"grid csv body has shape {cells.shape}, header says {(int(h), int(w))}")
    return OccupancyGrid(cells, float(res))
