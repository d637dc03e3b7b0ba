"""Room attribute extraction: the four feature sets behind the node matrix.

Set 1  basic room information: one-hot type + door/window/opening counts.
Set 2  distance-based: perimeter, area, sorted bounding-box extents, and
       the area : bounding-box-area ratio.
Set 3  shape descriptor: a 4-connected boundary chain code, made rotation
       and start invariant by mod-4 differencing plus the minimum circular
       shift, padded to a fixed length of 100 with -1.
Set 4  externally supplied per-room embedding (e.g. from an image model);
       this module only concatenates it.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .floorplan import (
    Floorplan,
    FloorplanError,
    Room,
    ROOM_TYPES,
    bounding_box,
    interior_y_intervals,
    perimeter,
    signed_area,
)

CHAIN_CODE_LENGTH = 100
CHAIN_CODE_PAD = -1
DEFAULT_GRID_RESOLUTION = 0.5  # meters per raster cell

SET1_WIDTH = len(ROOM_TYPES) + 3
SET2_WIDTH = 5
SET3_WIDTH = CHAIN_CODE_LENGTH

_TYPE_INDEX = {name: i for i, name in enumerate(ROOM_TYPES)}

# Direction encoding for boundary steps: 0=+x, 1=+y, 2=-x, 3=-y.
_STEP = {0: (1, 0), 1: (0, 1), 2: (-1, 0), 3: (0, -1)}


class FeatureError(ValueError):
    """Invalid input to a feature extractor."""


class ChainCodeTruncation(UserWarning):
    """A boundary code exceeded the fixed pad length and was truncated."""


@dataclass(frozen=True)
class FeatureMatrix:
    """Node-attribute matrix with a manifest of which columns came from where."""

    n: int
    f: int
    x: np.ndarray
    layout: tuple  # (("set1", (0, 20)), ...)

    def column_range(self, set_name: str) -> tuple[int, int]:
        for name, rng in self.layout:
            if name == set_name:
                return tuple(rng)
        raise KeyError(f"feature set {set_name!r} not in layout")

    def select_sets(self, sets) -> "FeatureMatrix":
        """Column subset for the requested sets, re-based layout."""
        names = [f"set{s}" for s in sets]
        cols, layout, offset = [], [], 0
        for name in names:
            lo, hi = self.column_range(name)
            cols.append(self.x[:, lo:hi])
            layout.append((name, (offset, offset + hi - lo)))
            offset += hi - lo
        return FeatureMatrix(n=self.n, f=offset, x=np.concatenate(cols, axis=1), layout=tuple(layout))


def feature_matrix_to_dict(fm: FeatureMatrix) -> dict:
    return {
        "n": fm.n,
        "f": fm.f,
        "data": [float(v) for v in fm.x.reshape(-1)],
        "layout": [[name, [int(lo), int(hi)]] for name, (lo, hi) in fm.layout],
    }


def feature_matrix_from_dict(data: dict) -> FeatureMatrix:
    n, f = int(data["n"]), int(data["f"])
    x = np.array(data["data"], dtype=np.float64).reshape(n, f)
    layout = tuple((name, (int(lo), int(hi))) for name, (lo, hi) in data["layout"])
    return FeatureMatrix(n=n, f=f, x=x, layout=layout)


# ----------------------------------------------------------------------
# set 1: basic room information

def basic_features(room: Room) -> np.ndarray:
    if room.room_type not in _TYPE_INDEX:
        raise FeatureError(f"unknown room type {room.room_type!r}")
    vec = np.zeros(SET1_WIDTH)
    vec[_TYPE_INDEX[room.room_type]] = 1.0
    vec[len(ROOM_TYPES) + 0] = float(len(room.door_links))
    vec[len(ROOM_TYPES) + 1] = float(room.window_count)
    vec[len(ROOM_TYPES) + 2] = float(len(room.opening_links))
    return vec


# ----------------------------------------------------------------------
# set 2: distance-based features

def distance_features(room: Room) -> np.ndarray:
    poly = room.polygon
    area = signed_area(poly)
    if area <= 0:
        raise FeatureError(f"room {room.id}: degenerate polygon (area <= 0)")
    minx, miny, maxx, maxy = bounding_box(poly)
    extents = sorted((maxx - minx, maxy - miny), reverse=True)
    bbox_area = extents[0] * extents[1]
    return np.array([perimeter(poly), area, extents[0], extents[1], area / bbox_area])


# ----------------------------------------------------------------------
# set 3: chain-code shape descriptor

def _rasterize(polygon, resolution: float) -> np.ndarray:
    """Occupancy grid of cells whose centers fall inside the polygon.

    The grid is anchored at the polygon's bounding-box minimum so the
    result is translation invariant, and cell size scales with the
    resolution so uniform scaling of both cancels out.
    """
    minx, miny, maxx, maxy = bounding_box(polygon)
    nx = max(1, int(round((maxx - minx) / resolution)))
    ny = max(1, int(round((maxy - miny) / resolution)))
    occ = np.zeros((nx, ny), dtype=bool)
    for ix in range(nx):
        cx = minx + (ix + 0.5) * resolution
        intervals = interior_y_intervals(polygon, cx)
        for iy in range(ny):
            cy = miny + (iy + 0.5) * resolution
            occ[ix, iy] = any(lo < cy < hi for lo, hi in intervals)
    return occ


def _four_connected(occ: np.ndarray) -> bool:
    cells = np.argwhere(occ)
    if len(cells) == 0:
        return False
    seen = {tuple(cells[0])}
    stack = [tuple(cells[0])]
    occ_set = {tuple(c) for c in cells}
    while stack:
        x, y = stack.pop()
        for dx, dy in _STEP.values():
            nxt = (x + dx, y + dy)
            if nxt in occ_set and nxt not in seen:
                seen.add(nxt)
                stack.append(nxt)
    return len(seen) == len(cells)


def _boundary_walk(occ: np.ndarray) -> list[int]:
    """Clockwise crack walk around the occupied region, interior on the right.

    Vertices are integer lattice points (cell corners). The walk starts at
    the topmost boundary vertex, rightmost among ties, which makes the raw
    code deterministic; the first step there is always -y.
    """

    def cell(x, y):
        return 0 <= x < occ.shape[0] and 0 <= y < occ.shape[1] and occ[x, y]

    # cells to the right/left of a step in direction d taken from vertex v
    def right_cell(v, d):
        x, y = v
        return {0: (x, y - 1), 1: (x, y), 2: (x - 1, y), 3: (x - 1, y - 1)}[d]

    def left_cell(v, d):
        x, y = v
        return {0: (x, y), 1: (x - 1, y), 2: (x - 1, y - 1), 3: (x, y - 1)}[d]

    boundary_vertices = set()
    for x in range(occ.shape[0]):
        for y in range(occ.shape[1]):
            if occ[x, y]:
                for vx in (x, x + 1):
                    for vy in (y, y + 1):
                        boundary_vertices.add((vx, vy))
    outline = [
        v
        for v in boundary_vertices
        if sum(cell(v[0] + dx, v[1] + dy) for dx, dy in ((0, 0), (-1, 0), (0, -1), (-1, -1))) < 4
    ]
    start = max(outline, key=lambda v: (v[1], v[0]))

    def walkable(v, d):
        return cell(*right_cell(v, d)) and not cell(*left_cell(v, d))

    code = []
    v = start
    heading = 3  # at the topmost-rightmost vertex only -y is walkable
    if not walkable(v, heading):
        raise FeatureError("chain code: boundary walk failed at start vertex")
    while True:
        code.append(heading)
        dx, dy = _STEP[heading]
        v = (v[0] + dx, v[1] + dy)
        if v == start:
            break
        # prefer right turn, then straight, then left (keeps interior on the right)
        for turn in (-1, 0, 1, 2):
            cand = (heading + turn) % 4
            if walkable(v, cand):
                heading = cand
                break
        else:
            raise FeatureError("chain code: boundary walk stuck (is the region connected?)")
    return code


def chain_code(polygon, grid_resolution: float = DEFAULT_GRID_RESOLUTION) -> list[int]:
    """Raw 4-connected boundary code of the rasterized polygon."""
    if grid_resolution <= 0:
        raise FeatureError(f"grid_resolution must be positive, got {grid_resolution}")
    occ = _rasterize(polygon, grid_resolution)
    if not occ.any():
        raise FeatureError(
            f"polygon rasterizes to an empty region at resolution {grid_resolution}; use a finer resolution"
        )
    if not _four_connected(occ):
        raise FeatureError(
            f"polygon rasterizes to a disconnected region at resolution {grid_resolution}; use a finer resolution"
        )
    return _boundary_walk(occ)


def difference_code(raw) -> list[int]:
    """Cyclic forward differences mod 4; removes global 90-degree rotations."""
    raw = list(raw)
    if not raw:
        raise FeatureError("difference_code: empty code")
    n = len(raw)
    return [(raw[(i + 1) % n] - raw[i]) % 4 for i in range(n)]


def min_rotation(seq) -> list[int]:
    """Circular shift minimizing the sequence as a base-4 integer."""
    seq = list(seq)
    if not seq:
        raise FeatureError("min_rotation: empty code")
    best = min(range(len(seq)), key=lambda s: seq[s:] + seq[:s])
    return seq[best:] + seq[:best]


def normalize_chain_code(raw) -> np.ndarray:
    """Rotation- and start-invariant code, padded to length 100 with -1."""
    normalized = min_rotation(difference_code(raw))
    if len(normalized) > CHAIN_CODE_LENGTH:
        warnings.warn(
            f"chain code of length {len(normalized)} truncated to {CHAIN_CODE_LENGTH}",
            ChainCodeTruncation,
        )
        normalized = normalized[:CHAIN_CODE_LENGTH]
    out = np.full(CHAIN_CODE_LENGTH, float(CHAIN_CODE_PAD))
    out[: len(normalized)] = normalized
    return out


def shape_features(room: Room, grid_resolution: float = DEFAULT_GRID_RESOLUTION) -> np.ndarray:
    return normalize_chain_code(chain_code(room.polygon, grid_resolution))


# ----------------------------------------------------------------------
# assembly and standardization

@dataclass(frozen=True)
class Set2Stats:
    """Training-split mean/std for the distance-based columns."""

    mean: np.ndarray
    std: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std]}

    @classmethod
    def from_dict(cls, data) -> "Set2Stats | None":
        if data is None:
            return None
        return cls(mean=np.array(data["mean"]), std=np.array(data["std"]))


def fit_set2_stats(matrices) -> Set2Stats | None:
    """Column statistics over every room in a training split."""
    rows = []
    for fm in matrices:
        try:
            lo, hi = fm.column_range("set2")
        except KeyError:
            return None
        rows.append(fm.x[:, lo:hi])
    if not rows:
        return None
    stacked = np.concatenate(rows, axis=0)
    std = stacked.std(axis=0)
    return Set2Stats(mean=stacked.mean(axis=0), std=np.maximum(std, 1e-8))


def standardize(fm: FeatureMatrix, stats: Set2Stats | None) -> FeatureMatrix:
    """Z-score the set-2 columns; other columns pass through unchanged."""
    if stats is None:
        return fm
    try:
        lo, hi = fm.column_range("set2")
    except KeyError:
        return fm
    x = fm.x.copy()
    x[:, lo:hi] = (x[:, lo:hi] - stats.mean) / stats.std
    return FeatureMatrix(n=fm.n, f=fm.f, x=x, layout=fm.layout)


def assemble_features(
    fp: Floorplan,
    sets=(1, 2, 3),
    external_set4: np.ndarray | None = None,
    grid_resolution: float = DEFAULT_GRID_RESOLUTION,
) -> FeatureMatrix:
    """Concatenate the enabled attribute sets, in order, for every room."""
    sets = tuple(sorted(set(int(s) for s in sets)))
    if any(s not in (1, 2, 3, 4) for s in sets):
        raise FeatureError(f"unknown feature sets in {sets}; valid sets are 1..4")
    if not sets:
        raise FeatureError("at least one feature set must be enabled")
    if 4 in sets:
        if external_set4 is None:
            raise FeatureError("set 4 enabled but no external feature matrix supplied")
        external_set4 = np.asarray(external_set4, dtype=np.float64)
        if external_set4.shape[0] != fp.n:
            raise FeatureError(
                f"set 4 matrix has {external_set4.shape[0]} rows, floorplan has {fp.n} rooms"
            )

    blocks, layout, offset = [], [], 0
    for s in sets:
        if s == 1:
            block = np.stack([basic_features(r) for r in fp.rooms])
        elif s == 2:
            block = np.stack([distance_features(r) for r in fp.rooms])
        elif s == 3:
            block = np.stack([shape_features(r, grid_resolution) for r in fp.rooms])
        else:
            block = external_set4
        blocks.append(block)
        layout.append((f"set{s}", (offset, offset + block.shape[1])))
        offset += block.shape[1]

    return FeatureMatrix(n=fp.n, f=offset, x=np.concatenate(blocks, axis=1), layout=tuple(layout))
