"""Park gridworld: animal-density maps and distance/rank utilities.

Cells are ``(row, col)`` tuples with row 0 at the top. Movement everywhere in
the game is 4-connected plus "stay", so all distances here are Manhattan.
Density maps come in two flavours: i.i.d. random, and spatially structured
from the distance ranks of a river, a road and the park boundary.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

Cell = tuple[int, int]

# Two-stage weighted average behind the spatial density maps: geographic
# feature ranks are first blended into an animal rank, then blended again
# with the raw feature ranks.
ANIMAL_RANK_WEIGHTS = {"boundary": 0.1, "road": 0.1, "river": 0.8}
DENSITY_WEIGHTS = {"animal": 0.7, "river": 0.05, "road": 0.15, "boundary": 0.1}


class GridConfigError(ValueError):
    """Raised for invalid grid dimensions or malformed feature geometry."""


@dataclass(frozen=True)
class GridWorld:
    """Immutable park grid with per-cell animal density in [0, 1]."""

    width: int
    height: int
    density: np.ndarray
    river_cells: frozenset[Cell] = field(default_factory=frozenset)
    road_cells: frozenset[Cell] = field(default_factory=frozenset)

    def __post_init__(self):
        if self.density.shape != (self.height, self.width):
            raise GridConfigError(
                f"density shape {self.density.shape} does not match "
                f"{self.height}x{self.width}"
            )
        if np.any(self.density < 0.0) or np.any(self.density > 1.0):
            raise GridConfigError("density values must lie in [0, 1]")
        for cell in list(self.river_cells) + list(self.road_cells):
            if not self.contains(cell):
                raise GridConfigError(f"feature cell {cell} outside grid")
        self.density.setflags(write=False)

    @property
    def n_cells(self) -> int:
        return self.width * self.height

    def contains(self, cell: Cell) -> bool:
        r, c = cell
        return 0 <= r < self.height and 0 <= c < self.width

    def cell_index(self, cell: Cell) -> int:
        """Row-major flat index of a cell."""
        return cell[0] * self.width + cell[1]

    def index_cell(self, index: int) -> Cell:
        return (index // self.width, index % self.width)

    def all_cells(self) -> list[Cell]:
        return [(r, c) for r in range(self.height) for c in range(self.width)]

    def density_at(self, cell: Cell) -> float:
        return float(self.density[cell[0], cell[1]])

    def density_csv(self) -> str:
        """Density map as CSV text, row-major, 6 decimal places."""
        lines = [
            ",".join(f"{v:.6f}" for v in row) for row in self.density
        ]
        return "\n".join(lines) + "\n"


def neighbors(grid: GridWorld, cell: Cell) -> list[Cell]:
    """In-grid 4-neighborhood of a cell, plus the cell itself (stay)."""
    r, c = cell
    if not grid.contains(cell):
        raise GridConfigError(f"cell {cell} outside grid")
    out = []
    for dr, dc in ((-1, 0), (1, 0), (0, -1), (0, 1)):
        cand = (r + dr, c + dc)
        if grid.contains(cand):
            out.append(cand)
    out.append(cell)
    return out


def manhattan(a: Cell, b: Cell) -> int:
    return abs(a[0] - b[0]) + abs(a[1] - b[1])


def min_distance_map(grid: GridWorld, cells: set[Cell] | frozenset[Cell]) -> np.ndarray:
    """Per-cell minimum Manhattan distance to any cell of the given set."""
    if not cells:
        raise GridConfigError("feature cell set is empty")
    rows = np.arange(grid.height)[:, None, None]
    cols = np.arange(grid.width)[None, :, None]
    feats = np.array(sorted(cells))  # (n, 2)
    dist = np.abs(rows - feats[:, 0]) + np.abs(cols - feats[:, 1])
    return dist.min(axis=2)


def normalize_rank(values: np.ndarray) -> np.ndarray:
    """Min-max normalize to [0, 1]; a constant map normalizes to all zeros."""
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values, dtype=np.float64)
    return (values - lo) / (hi - lo)


def feature_rank(grid: GridWorld, feature_cells: set[Cell] | frozenset[Cell]) -> np.ndarray:
    """Rank every cell by its Manhattan distance to the nearest feature cell.

    Ranks are min-max normalized to [0, 1]: 0 at the cells touching the
    feature, 1 at the farthest cells. If every cell is equidistant the map
    degenerates to all zeros.
    """
    return normalize_rank(min_distance_map(grid, feature_cells).astype(np.float64))


def boundary_cells(width: int, height: int) -> frozenset[Cell]:
    """All edge cells of a width x height grid."""
    cells = set()
    for r in range(height):
        for c in range(width):
            if r in (0, height - 1) or c in (0, width - 1):
                cells.add((r, c))
    return frozenset(cells)


def default_river(width: int, height: int) -> frozenset[Cell]:
    """Full-height river column at col floor(W/3)."""
    col = width // 3
    return frozenset((r, col) for r in range(height))


def default_road(width: int, height: int) -> frozenset[Cell]:
    """Full-width road row at row floor(2H/3)."""
    row = (2 * height) // 3
    return frozenset((row, c) for c in range(width))


def _check_dims(width: int, height: int):
    if width < 3 or height < 3:
        raise GridConfigError(f"grid must be at least 3x3, got {width}x{height}")


def _crosses_grid(cells: frozenset[Cell], width: int, height: int) -> bool:
    rows = {r for r, _ in cells}
    cols = {c for _, c in cells}
    spans_vertical = 0 in rows and (height - 1) in rows
    spans_horizontal = 0 in cols and (width - 1) in cols
    return spans_vertical or spans_horizontal


def _is_connected(cells: frozenset[Cell]) -> bool:
    if not cells:
        return False
    todo = [next(iter(cells))]
    seen = {todo[0]}
    while todo:
        r, c = todo.pop()
        for cand in ((r - 1, c), (r + 1, c), (r, c - 1), (r, c + 1)):
            if cand in cells and cand not in seen:
                seen.add(cand)
                todo.append(cand)
    return seen == cells


def random_density(width: int, height: int, seed: int) -> GridWorld:
    """Grid with i.i.d. uniform [0, 1] densities, reproducible from seed."""
    _check_dims(width, height)
    rng = np.random.default_rng(seed)
    density = rng.uniform(0.0, 1.0, size=(height, width))
    return GridWorld(width=width, height=height, density=density)


def combine_feature_ranks(
    boundary_rank: np.ndarray, road_rank: np.ndarray, river_rank: np.ndarray
) -> np.ndarray:
    """Two-stage weighted average of feature ranks, min-max normalized.

    First blends the feature ranks into an animal rank, then blends the
    animal rank back with the raw feature ranks. Each stage's weights sum
    to 1, so four identical input maps pass through unchanged.
    """
    aw, dw = ANIMAL_RANK_WEIGHTS, DENSITY_WEIGHTS
    animal_rank = (
        aw["boundary"] * boundary_rank
        + aw["road"] * road_rank
        + aw["river"] * river_rank
    )
    density = (
        dw["animal"] * animal_rank
        + dw["river"] * river_rank
        + dw["road"] * road_rank
        + dw["boundary"] * boundary_rank
    )
    return normalize_rank(density)


def spatial_density(
    width: int,
    height: int,
    river_cells: frozenset[Cell] | None = None,
    road_cells: frozenset[Cell] | None = None,
) -> GridWorld:
    """Grid whose density derives from river, road and boundary distances.

    The river and road default to a full-height column and a full-width row
    but can be overridden with any connected path that crosses the grid.
    """
    _check_dims(width, height)
    river = default_river(width, height) if river_cells is None else frozenset(river_cells)
    road = default_road(width, height) if road_cells is None else frozenset(road_cells)
    for name, cells in (("river", river), ("road", road)):
        if not cells:
            raise GridConfigError(f"{name} path is empty")
        if not _is_connected(cells):
            raise GridConfigError(f"{name} path is disconnected")
        if not _crosses_grid(cells, width, height):
            raise GridConfigError(f"{name} path does not cross the grid")

    probe = GridWorld(width=width, height=height, density=np.zeros((height, width)))
    density = combine_feature_ranks(
        boundary_rank=feature_rank(probe, boundary_cells(width, height)),
        road_rank=feature_rank(probe, road),
        river_rank=feature_rank(probe, river),
    )
    return GridWorld(
        width=width, height=height, density=density,
        river_cells=river, road_cells=road,
    )
