"""Floorplans and their multi-relational room graphs.

A floorplan is a set of axis-aligned rectilinear rooms. Three relation
channels are derived from it:

* door:    rooms joined by a door or an opening (visual connectivity),
* wall:    rooms sharing a wall segment but with no door between them,
* spatial: the union of the two (plain adjacency).

Door and wall are exclusive by construction, so spatial = door OR wall.
This module also prepares the two task setups used for training: topology
generation (identity initial adjacency) and topology completion (partial
spatial observations with held-out pairs).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

GEOM_TOL = 1e-9
DEFAULT_CONTACT_EPSILON = 0.05  # meters of shared wall needed for adjacency

ROOM_TYPES = (
    "closet",
    "bedroom",
    "bathroom",
    "kitchen",
    "living room",
    "dining room",
    "hallway",
    "garage",
    "laundry",
    "office",
    "stairs",
    "entry",
    "balcony",
    "patio",
    "basement",
    "breakfast nook",
    "other",
)

RELATIONS = ("door", "wall", "spatial")


class FloorplanError(ValueError):
    """Invalid floorplan geometry or links."""


# ----------------------------------------------------------------------
# rectilinear polygon helpers

def polygon_edges(polygon):
    n = len(polygon)
    return [(polygon[i], polygon[(i + 1) % n]) for i in range(n)]


def signed_area(polygon) -> float:
    total = 0.0
    for (x1, y1), (x2, y2) in polygon_edges(polygon):
        total += x1 * y2 - x2 * y1
    return 0.5 * total


def perimeter(polygon) -> float:
    return sum(abs(x2 - x1) + abs(y2 - y1) for (x1, y1), (x2, y2) in polygon_edges(polygon))


def bounding_box(polygon):
    xs = [p[0] for p in polygon]
    ys = [p[1] for p in polygon]
    return min(xs), min(ys), max(xs), max(ys)


def is_rectilinear(polygon) -> bool:
    for (x1, y1), (x2, y2) in polygon_edges(polygon):
        horizontal = abs(y2 - y1) <= GEOM_TOL and abs(x2 - x1) > GEOM_TOL
        vertical = abs(x2 - x1) <= GEOM_TOL and abs(y2 - y1) > GEOM_TOL
        if not (horizontal or vertical):
            return False
    return True


def _segments_overlap_1d(a1, a2, b1, b2) -> float:
    lo = max(min(a1, a2), min(b1, b2))
    hi = min(max(a1, a2), max(b1, b2))
    return max(0.0, hi - lo)


def _segment_intersects(e1, e2) -> bool:
    """Axis-aligned segments sharing more than a single endpoint."""
    (ax1, ay1), (ax2, ay2) = e1
    (bx1, by1), (bx2, by2) = e2
    a_horiz = abs(ay2 - ay1) <= GEOM_TOL
    b_horiz = abs(by2 - by1) <= GEOM_TOL
    if a_horiz and b_horiz:
        if abs(ay1 - by1) > GEOM_TOL:
            return False
        return _segments_overlap_1d(ax1, ax2, bx1, bx2) > GEOM_TOL
    if not a_horiz and not b_horiz:
        if abs(ax1 - bx1) > GEOM_TOL:
            return False
        return _segments_overlap_1d(ay1, ay2, by1, by2) > GEOM_TOL
    if not a_horiz:
        return _segment_intersects(e2, e1)
    # e1 horizontal, e2 vertical: crossing strictly inside either segment
    x, y = bx1, ay1
    on_x = min(ax1, ax2) - GEOM_TOL <= x <= max(ax1, ax2) + GEOM_TOL
    on_y = min(by1, by2) - GEOM_TOL <= y <= max(by1, by2) + GEOM_TOL
    if not (on_x and on_y):
        return False
    interior_x = min(ax1, ax2) + GEOM_TOL < x < max(ax1, ax2) - GEOM_TOL
    interior_y = min(by1, by2) + GEOM_TOL < y < max(by1, by2) - GEOM_TOL
    return interior_x or interior_y


def is_simple_rectilinear(polygon) -> bool:
    edges = polygon_edges(polygon)
    n = len(edges)
    for i in range(n):
        for j in range(i + 1, n):
            adjacent = j == i + 1 or (i == 0 and j == n - 1)
            if adjacent:
                # consecutive edges must meet only at the shared vertex
                if _segments_overlap_1d(*_axis_range(edges[i]), *_axis_range(edges[j])) > GEOM_TOL and _same_line(
                    edges[i], edges[j]
                ):
                    return False
                continue
            if _segment_intersects(edges[i], edges[j]):
                return False
    return True


def _axis_range(edge):
    (x1, y1), (x2, y2) = edge
    if abs(y2 - y1) <= GEOM_TOL:
        return x1, x2
    return y1, y2


def _same_line(e1, e2) -> bool:
    (ax1, ay1), (ax2, ay2) = e1
    (bx1, by1), (bx2, by2) = e2
    a_horiz = abs(ay2 - ay1) <= GEOM_TOL
    b_horiz = abs(by2 - by1) <= GEOM_TOL
    if a_horiz != b_horiz:
        return False
    if a_horiz:
        return abs(ay1 - by1) <= GEOM_TOL
    return abs(ax1 - bx1) <= GEOM_TOL


def interior_y_intervals(polygon, x: float):
    """Interior y-intervals of a simple rectilinear polygon at abscissa x.

    x must not coincide with any vertical edge; callers sample slab
    midpoints, which guarantees that.
    """
    ys = []
    for (x1, y1), (x2, y2) in polygon_edges(polygon):
        if abs(y2 - y1) <= GEOM_TOL and min(x1, x2) < x < max(x1, x2):
            ys.append(y1)
    ys.sort()
    return [(ys[i], ys[i + 1]) for i in range(0, len(ys) - 1, 2)]


def interior_overlap_area(p1, p2) -> float:
    """Exact intersection area of two simple rectilinear polygons."""
    xs = sorted({p[0] for p in p1} | {p[0] for p in p2})
    area = 0.0
    for x0, x1 in zip(xs, xs[1:]):
        if x1 - x0 <= GEOM_TOL:
            continue
        mid = 0.5 * (x0 + x1)
        iv1 = interior_y_intervals(p1, mid)
        iv2 = interior_y_intervals(p2, mid)
        overlap = 0.0
        for a in iv1:
            for b in iv2:
                overlap += _segments_overlap_1d(a[0], a[1], b[0], b[1])
        area += overlap * (x1 - x0)
    return area


def shared_boundary_length(p1, p2) -> float:
    """Total length of collinear boundary overlap between two polygons."""
    total = 0.0
    for e1 in polygon_edges(p1):
        for e2 in polygon_edges(p2):
            if not _same_line(e1, e2):
                continue
            total += _segments_overlap_1d(*_axis_range(e1), *_axis_range(e2))
    return total


# ----------------------------------------------------------------------
# domain types

@dataclass(frozen=True)
class Room:
    id: int
    room_type: str
    polygon: tuple  # ((x, y), ...) counter-clockwise, meters
    door_links: tuple = ()
    opening_links: tuple = ()
    window_count: int = 0

    def validate(self):
        if self.room_type not in ROOM_TYPES:
            raise FloorplanError(f"room {self.id}: unknown room type {self.room_type!r}")
        poly = self.polygon
        if len(poly) < 4:
            raise FloorplanError(f"room {self.id}: polygon needs >= 4 vertices")
        if not is_rectilinear(poly):
            raise FloorplanError(f"room {self.id}: polygon is not axis-aligned rectilinear")
        if signed_area(poly) <= GEOM_TOL:
            raise FloorplanError(f"room {self.id}: polygon must be counter-clockwise with area > 0")
        if not is_simple_rectilinear(poly):
            raise FloorplanError(f"room {self.id}: polygon is self-intersecting")
        if self.window_count < 0:
            raise FloorplanError(f"room {self.id}: negative window count")
        for link in tuple(self.door_links) + tuple(self.opening_links):
            if link == self.id:
                raise FloorplanError(f"room {self.id}: links to itself")


@dataclass(frozen=True)
class Floorplan:
    id: str
    rooms: tuple

    @property
    def n(self) -> int:
        return len(self.rooms)

    def validate(self, check_disjoint: bool = True):
        n = self.n
        if not 2 <= n <= 30:
            raise FloorplanError(f"floorplan {self.id}: room count {n} outside [2, 30]")
        ids = [r.id for r in self.rooms]
        if ids != list(range(n)):
            raise FloorplanError(f"floorplan {self.id}: room ids must be 0..{n - 1} in order, got {ids}")
        for room in self.rooms:
            room.validate()
            for link in tuple(room.door_links) + tuple(room.opening_links):
                if not 0 <= link < n:
                    raise FloorplanError(
                        f"floorplan {self.id}: room {room.id} links to missing room {link}"
                    )
        if check_disjoint:
            for i in range(n):
                for j in range(i + 1, n):
                    if interior_overlap_area(self.rooms[i].polygon, self.rooms[j].polygon) > 1e-6:
                        raise FloorplanError(
                            f"floorplan {self.id}: rooms {i} and {j} have overlapping interiors"
                        )


class MultiAdjacency:
    """Per-relation n x n adjacency over door / wall / spatial channels."""

    __slots__ = ("n", "door", "wall", "spatial")

    def __init__(self, n: int, door: np.ndarray, wall: np.ndarray, spatial: np.ndarray):
        self.n = n
        self.door = np.asarray(door, dtype=np.float64)
        self.wall = np.asarray(wall, dtype=np.float64)
        self.spatial = np.asarray(spatial, dtype=np.float64)
        for name, mat in self.channels().items():
            if mat.shape != (n, n):
                raise FloorplanError(f"adjacency channel {name} has shape {mat.shape}, expected {(n, n)}")

    def channels(self) -> dict[str, np.ndarray]:
        return {"door": self.door, "wall": self.wall, "spatial": self.spatial}

    @classmethod
    def identity(cls, n: int) -> "MultiAdjacency":
        eye = np.eye(n)
        return cls(n, eye.copy(), eye.copy(), eye.copy())

    @classmethod
    def from_edges(cls, n: int, door_edges, wall_edges) -> "MultiAdjacency":
        door = np.zeros((n, n))
        wall = np.zeros((n, n))
        for i, j in door_edges:
            door[i, j] = door[j, i] = 1.0
        for i, j in wall_edges:
            wall[i, j] = wall[j, i] = 1.0
        spatial = np.clip(door + wall, 0.0, 1.0)
        return cls(n, door, wall, spatial)

    def edge_list(self, relation: str):
        mat = self.channels()[relation]
        return [(i, j) for i in range(self.n) for j in range(i + 1, self.n) if mat[i, j] > 0.5]

    def copy(self) -> "MultiAdjacency":
        return MultiAdjacency(self.n, self.door.copy(), self.wall.copy(), self.spatial.copy())

    def equals(self, other: "MultiAdjacency") -> bool:
        return (
            self.n == other.n
            and np.array_equal(self.door, other.door)
            and np.array_equal(self.wall, other.wall)
            and np.array_equal(self.spatial, other.spatial)
        )

    def validate_ground_truth(self):
        for name, mat in self.channels().items():
            if not np.array_equal(mat, mat.T):
                raise FloorplanError(f"ground truth channel {name} is not symmetric")
            if np.any(np.diag(mat) != 0):
                raise FloorplanError(f"ground truth channel {name} has nonzero diagonal")
            if not np.isin(mat, (0.0, 1.0)).all():
                raise FloorplanError(f"ground truth channel {name} has non-binary entries")
        if np.any((self.door > 0.5) & (self.wall > 0.5)):
            raise FloorplanError("door and wall edges must be exclusive")
        union = np.clip(self.door + self.wall, 0.0, 1.0)
        if not np.array_equal(union, self.spatial):
            raise FloorplanError("spatial channel must equal door OR wall")


@dataclass(frozen=True)
class TaskInstance:
    """One training/evaluation item: features plus initial and target topology."""

    floorplan_id: str
    features: object  # features.FeatureMatrix
    a0: MultiAdjacency
    target: MultiAdjacency
    heldout_pairs: tuple  # ((i, j) with i < j, ...)

    def observed_pairs(self) -> tuple:
        """Off-diagonal pairs present in the initial spatial channel."""
        out = []
        for i in range(self.a0.n):
            for j in range(i + 1, self.a0.n):
                if self.a0.spatial[i, j] > 0.5:
                    out.append((i, j))
        return tuple(out)


# ----------------------------------------------------------------------
# graph construction

def build_graph(fp: Floorplan, contact_epsilon: float = DEFAULT_CONTACT_EPSILON) -> MultiAdjacency:
    """Derive the ground-truth multi-relational graph from geometry and links."""
    n = fp.n
    door = np.zeros((n, n))
    for room in fp.rooms:
        for link in tuple(room.door_links) + tuple(room.opening_links):
            if not 0 <= link < n:
                raise FloorplanError(
                    f"floorplan {fp.id}: room {room.id} has dangling link to {link}"
                )
            if link == room.id:
                raise FloorplanError(f"floorplan {fp.id}: room {room.id} links to itself")
            door[room.id, link] = door[link, room.id] = 1.0

    wall = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1, n):
            if door[i, j] > 0:
                continue
            shared = shared_boundary_length(fp.rooms[i].polygon, fp.rooms[j].polygon)
            if shared > contact_epsilon:
                wall[i, j] = wall[j, i] = 1.0

    spatial = np.clip(door + wall, 0.0, 1.0)
    return MultiAdjacency(n, door, wall, spatial)


def make_generation_instance(fp: Floorplan, features, target: MultiAdjacency | None = None) -> TaskInstance:
    """Task setup for generating topology from scratch: A0 is the identity."""
    if target is None:
        target = build_graph(fp)
    n = fp.n
    pairs = tuple((i, j) for i in range(n) for j in range(i + 1, n))
    return TaskInstance(
        floorplan_id=fp.id,
        features=features,
        a0=MultiAdjacency.identity(n),
        target=target,
        heldout_pairs=pairs,
    )


def make_completion_instance(
    fp: Floorplan,
    features,
    observe_fraction: float,
    seed: int,
    target: MultiAdjacency | None = None,
) -> TaskInstance:
    """Task setup for completing a partially observed spatial topology.

    A seeded fraction of the spatial edges is revealed in A0 (copied onto
    all three channels, since the edge type of an observation is unknown).
    Held-out pairs are 20% of the spatial edges drawn from the unobserved
    remainder, plus an equal count of sampled non-edges.
    """
    if not 0.0 <= observe_fraction <= 1.0:
        raise FloorplanError(f"observe_fraction {observe_fraction} outside [0, 1]")
    if target is None:
        target = build_graph(fp)
    edges = target.edge_list("spatial")
    if len(edges) < 2:
        raise FloorplanError(f"floorplan {fp.id}: completion needs >= 2 spatial edges")
    rng = np.random.default_rng(seed)

    n_obs = int(round(observe_fraction * len(edges)))
    obs_idx = rng.choice(len(edges), size=n_obs, replace=False) if n_obs else np.empty(0, dtype=int)
    observed = sorted(edges[i] for i in obs_idx)
    remainder = sorted(set(edges) - set(observed))

    n_held = min(int(round(0.2 * len(edges))), len(remainder))
    held_idx = rng.choice(len(remainder), size=n_held, replace=False) if n_held else np.empty(0, dtype=int)
    held_pos = sorted(remainder[i] for i in held_idx)

    n = fp.n
    non_edges = [
        (i, j)
        for i in range(n)
        for j in range(i + 1, n)
        if target.spatial[i, j] < 0.5
    ]
    n_neg = min(len(held_pos), len(non_edges))
    neg_idx = rng.choice(len(non_edges), size=n_neg, replace=False) if n_neg else np.empty(0, dtype=int)
    held_neg = sorted(non_edges[i] for i in neg_idx)

    observed_mat = np.eye(n)
    for i, j in observed:
        observed_mat[i, j] = observed_mat[j, i] = 1.0
    a0 = MultiAdjacency(n, observed_mat.copy(), observed_mat.copy(), observed_mat.copy())

    return TaskInstance(
        floorplan_id=fp.id,
        features=features,
        a0=a0,
        target=target,
        heldout_pairs=tuple(held_pos) + tuple(held_neg),
    )


def knn_graph(features, k: int) -> MultiAdjacency:
    """Symmetric k-nearest-neighbor graph over Euclidean feature distance.

    The same matrix is placed on all three relation channels; nearest
    neighbors carry no edge-type information. Distance ties break toward
    the lower node index.
    """
    x = np.asarray(features.x if hasattr(features, "x") else features, dtype=np.float64)
    n = x.shape[0]
    if not 1 <= k < n:
        raise FloorplanError(f"knn_graph: k={k} must satisfy 1 <= k < n={n}")
    diff = x[:, None, :] - x[None, :, :]
    dist = np.sqrt((diff * diff).sum(axis=2))
    adj = np.zeros((n, n))
    for i in range(n):
        order = sorted((dist[i, j], j) for j in range(n) if j != i)
        for _, j in order[:k]:
            adj[i, j] = adj[j, i] = 1.0
    return MultiAdjacency(n, adj.copy(), adj.copy(), adj.copy())


# ----------------------------------------------------------------------
# serialization

def floorplan_to_dict(fp: Floorplan) -> dict:
    return {
        "id": fp.id,
        "rooms": [
            {
                "id": r.id,
                "type": r.room_type,
                "polygon": [[float(x), float(y)] for x, y in r.polygon],
                "door_links": list(r.door_links),
                "opening_links": list(r.opening_links),
                "window_count": r.window_count,
            }
            for r in fp.rooms
        ],
    }


def _expect(cond: bool, path: str, msg: str):
    if not cond:
        raise FloorplanError(f"{path}: {msg}")


def floorplan_from_dict(data: dict) -> Floorplan:
    _expect(isinstance(data, dict), "$", "expected an object")
    _expect(isinstance(data.get("id"), str), "$.id", "expected a string")
    _expect(isinstance(data.get("rooms"), list), "$.rooms", "expected a list")
    rooms = []
    for idx, rd in enumerate(data["rooms"]):
        path = f"$.rooms[{idx}]"
        _expect(isinstance(rd, dict), path, "expected an object")
        _expect(isinstance(rd.get("id"), int), f"{path}.id", "expected an integer")
        _expect(isinstance(rd.get("type"), str), f"{path}.type", "expected a string")
        poly = rd.get("polygon")
        _expect(isinstance(poly, list) and len(poly) >= 4, f"{path}.polygon", "expected >= 4 vertices")
        for vi, vert in enumerate(poly):
            _expect(
                isinstance(vert, (list, tuple)) and len(vert) == 2,
                f"{path}.polygon[{vi}]",
                "expected [x, y]",
            )
        for key in ("door_links", "opening_links"):
            links = rd.get(key, [])
            _expect(isinstance(links, list), f"{path}.{key}", "expected a list")
            _expect(all(isinstance(v, int) for v in links), f"{path}.{key}", "expected integers")
        wc = rd.get("window_count", 0)
        _expect(isinstance(wc, int) and wc >= 0, f"{path}.window_count", "expected a nonnegative integer")
        rooms.append(
            Room(
                id=rd["id"],
                room_type=rd["type"],
                polygon=tuple((float(x), float(y)) for x, y in poly),
                door_links=tuple(rd.get("door_links", [])),
                opening_links=tuple(rd.get("opening_links", [])),
                window_count=wc,
            )
        )
    fp = Floorplan(id=data["id"], rooms=tuple(rooms))
    fp.validate()
    return fp


def load_floorplan(path) -> Floorplan:
    with open(path, "r", encoding="utf-8") as fh:
        return floorplan_from_dict(json.load(fh))


def graph_to_dict(adj: MultiAdjacency) -> dict:
    return {
        "n": adj.n,
        "door": [list(e) for e in adj.edge_list("door")],
        "wall": [list(e) for e in adj.edge_list("wall")],
        "spatial": [list(e) for e in adj.edge_list("spatial")],
    }


def graph_from_dict(data: dict) -> MultiAdjacency:
    _expect(isinstance(data.get("n"), int) and data["n"] >= 1, "$.n", "expected a positive integer")
    n = data["n"]
    mats = {}
    for rel in RELATIONS:
        edges = data.get(rel, [])
        _expect(isinstance(edges, list), f"$.{rel}", "expected a list of [i, j]")
        mat = np.zeros((n, n))
        for ei, e in enumerate(edges):
            _expect(
                isinstance(e, (list, tuple)) and len(e) == 2,
                f"$.{rel}[{ei}]",
                "expected [i, j]",
            )
            i, j = e
            _expect(0 <= i < j < n, f"$.{rel}[{ei}]", f"expected 0 <= i < j < {n}")
            mat[i, j] = mat[j, i] = 1.0
        mats[rel] = mat
    return MultiAdjacency(n, mats["door"], mats["wall"], mats["spatial"])


def graph_to_dot(adj: MultiAdjacency, room_types=None, name: str = "floorplan") -> str:
    """Undirected DOT graph with rel=door|wall edge attributes."""
    lines = [f"graph {name} {{"]
    for i in range(adj.n):
        label = room_types[i] if room_types is not None else str(i)
        lines.append(f'  {i} [label="{label}"];')
    for rel in ("door", "wall"):
        for i, j in adj.edge_list(rel):
            lines.append(f"  {i} -- {j} [rel={rel}];")
    lines.append("}")
    return "\n".join(lines) + "\n"


def instance_to_dict(inst: TaskInstance) -> dict:
    from . import features as feat  # local import to avoid a cycle

    return {
        "floorplan_id": inst.floorplan_id,
        "features": feat.feature_matrix_to_dict(inst.features),
        "a0": {rel: mat.tolist() for rel, mat in inst.a0.channels().items()},
        "target": graph_to_dict(inst.target),
        "heldout_pairs": [list(p) for p in inst.heldout_pairs],
    }


def instance_from_dict(data: dict) -> TaskInstance:
    from . import features as feat

    a0 = MultiAdjacency(
        n=len(data["a0"]["door"]),
        door=np.array(data["a0"]["door"]),
        wall=np.array(data["a0"]["wall"]),
        spatial=np.array(data["a0"]["spatial"]),
    )
    return TaskInstance(
        floorplan_id=data["floorplan_id"],
        features=feat.feature_matrix_from_dict(data["features"]),
        a0=a0,
        target=graph_from_dict(data["target"]),
        heldout_pairs=tuple(tuple(p) for p in data["heldout_pairs"]),
    )
