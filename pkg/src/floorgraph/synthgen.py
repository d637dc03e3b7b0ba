"""Procedural rectilinear floorplans with ground-truth topology.

Plans are produced by recursive binary slicing of a bounding rectangle on
an integer grid (1 cell = 1 meter). A slice step either cuts a rectangle
straight, or carves a corner out of it, which yields one L-shaped room.
Rooms tile the rectangle exactly, so interiors are disjoint by
construction. Doors are placed on a uniform (Wilson) spanning tree of the
wall-adjacency graph, which guarantees every room is reachable through
doors, plus extra doors on a fraction of the remaining adjacent pairs.

Corpus statistics note: with rooms tiling a rectangle the spatial graph
is planar (at most 3N-6 edges) while door connectivity needs at least
N-1 doors, so the spatial:door edge ratio is bounded below 3. The
generator maximizes wall adjacency within that bound; achieved statistics
are recorded in the corpus manifest.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import features as feat
from .floorplan import (
    Floorplan,
    FloorplanError,
    MultiAdjacency,
    Room,
    ROOM_TYPES,
    build_graph,
    floorplan_from_dict,
    floorplan_to_dict,
    graph_from_dict,
    graph_to_dict,
    shared_boundary_length,
)

SPLIT_RATIOS = (700, 200, 317)  # train : val : test proportions
MIN_SIDE = 2  # cells; keeps every room at least 2 m wide

# Relative room-type frequencies (kitchen handled separately: one per plan).
DEFAULT_TYPE_WEIGHTS = {
    "closet": 0.18,
    "bedroom": 0.16,
    "bathroom": 0.13,
    "hallway": 0.10,
    "living room": 0.08,
    "kitchen": 0.06,
    "office": 0.05,
    "laundry": 0.04,
    "stairs": 0.04,
    "entry": 0.04,
    "garage": 0.03,
    "balcony": 0.025,
    "patio": 0.02,
    "dining room": 0.015,
    "breakfast nook": 0.01,
    "basement": 0.01,
    "other": 0.01,
}

SET4_DIM = 16
_SET4_CENTER_SEED = 900973

# Types favored for small / large rooms; mild weighting keeps the sampled
# distribution close to the configured one while correlating type with size.
_SMALL_ROOM_TYPES = ("closet", "bathroom", "laundry", "entry", "breakfast nook")
_LARGE_ROOM_TYPES = ("living room", "garage", "bedroom", "basement")

# Which room types tend to be joined by a door. Used to bias the door
# spanning tree the way real homes are wired: hallways act as hubs,
# closets hang off bedrooms, kitchens open onto living space.
_DOOR_AFFINITY = {
    frozenset(("closet", "bedroom")): 4.0,
    frozenset(("kitchen", "living room")): 3.0,
    frozenset(("kitchen", "dining room")): 3.0,
    frozenset(("kitchen", "breakfast nook")): 3.0,
    frozenset(("living room", "dining room")): 2.5,
    frozenset(("living room", "entry")): 2.5,
    frozenset(("bathroom", "bedroom")): 2.5,
    frozenset(("bathroom", "hallway")): 2.5,
    frozenset(("garage", "entry")): 2.0,
    frozenset(("garage", "laundry")): 2.0,
    frozenset(("closet", "hallway")): 1.5,
    frozenset(("closet", "closet")): 0.2,
    frozenset(("closet", "bathroom")): 0.3,
    frozenset(("closet", "kitchen")): 0.3,
    frozenset(("bathroom", "bathroom")): 0.2,
}
_HUB_TYPES = ("hallway", "entry", "living room")

# type pairs whose connection is usually an open passage, not a door
_OPEN_PLAN_TYPES = ("living room", "dining room", "kitchen", "breakfast nook", "hallway", "entry")


def door_affinity(type_a: str, type_b: str) -> float:
    if type_a in _HUB_TYPES or type_b in _HUB_TYPES:
        return 3.0
    return _DOOR_AFFINITY.get(frozenset((type_a, type_b)), 1.0)


class GenerationError(ValueError):
    """Requested parameters cannot produce a valid floorplan."""


@dataclass
class GenParams:
    min_rooms: int = 4
    max_rooms: int = 16
    grid_w: int = 12
    grid_h: int = 10
    extra_door_prob: float = 0.10
    opening_prob: float = 0.15
    l_split_prob: float = 0.18
    window_density: float = 0.45
    door_policy: str = "affinity"  # "affinity" or "uniform" spanning tree
    type_distribution: dict = field(default_factory=lambda: dict(DEFAULT_TYPE_WEIGHTS))

    def validate(self):
        if not 2 <= self.min_rooms <= self.max_rooms <= 30:
            raise GenerationError(
                f"room bounds must satisfy 2 <= min <= max <= 30, got [{self.min_rooms}, {self.max_rooms}]"
            )
        if self.grid_w < 2 * MIN_SIDE or self.grid_h < 2 * MIN_SIDE:
            raise GenerationError(f"grid {self.grid_w}x{self.grid_h} too small to split")
        for p in (self.extra_door_prob, self.opening_prob, self.l_split_prob, self.window_density):
            if not 0.0 <= p <= 1.0:
                raise GenerationError(f"probability {p} outside [0, 1]")
        if self.door_policy not in ("affinity", "uniform"):
            raise GenerationError(f"unknown door_policy {self.door_policy!r}")
        unknown = set(self.type_distribution) - set(ROOM_TYPES)
        if unknown:
            raise GenerationError(f"unknown room types in distribution: {sorted(unknown)}")
        total = sum(self.type_distribution.values())
        if not np.isclose(total, 1.0, atol=1e-6):
            raise GenerationError(f"type distribution must sum to 1, got {total}")

    def capacity(self) -> int:
        return (self.grid_w // MIN_SIDE) * (self.grid_h // MIN_SIDE)


@dataclass
class Record:
    """One corpus entry: geometry, raw features (all four sets), ground truth."""

    floorplan: Floorplan
    features: feat.FeatureMatrix
    graph: MultiAdjacency

    def to_dict(self) -> dict:
        return {
            "floorplan": floorplan_to_dict(self.floorplan),
            "features": feat.feature_matrix_to_dict(self.features),
            "graph": graph_to_dict(self.graph),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Record":
        return cls(
            floorplan=floorplan_from_dict(data["floorplan"]),
            features=feat.feature_matrix_from_dict(data["features"]),
            graph=graph_from_dict(data["graph"]),
        )


@dataclass
class Corpus:
    train: list
    val: list
    test: list
    manifest: dict

    def splits(self) -> dict[str, list]:
        return {"train": self.train, "val": self.val, "test": self.test}

    def all_records(self) -> list:
        return self.train + self.val + self.test


# ----------------------------------------------------------------------
# slicing

def _rect_polygon(x, y, w, h):
    return ((x, y), (x + w, y), (x + w, y + h), (x, y + h))


def _l_polygon(x, y, w, h, corner, cw, ch):
    """Rectangle minus one corner cut of size cw x ch, counter-clockwise."""
    if corner == "ne":
        return ((x, y), (x + w, y), (x + w, y + h - ch), (x + w - cw, y + h - ch), (x + w - cw, y + h), (x, y + h))
    if corner == "nw":
        return ((x, y), (x + w, y), (x + w, y + h), (x + cw, y + h), (x + cw, y + h - ch), (x, y + h - ch))
    if corner == "se":
        return ((x, y), (x + w - cw, y), (x + w - cw, y + ch), (x + w, y + ch), (x + w, y + h), (x, y + h))
    # sw
    return ((x + cw, y), (x + w, y), (x + w, y + h), (x, y + h), (x, y + ch), (x + cw, y + ch))


def _corner_rect(x, y, w, h, corner, cw, ch):
    if corner == "ne":
        return (x + w - cw, y + h - ch, cw, ch)
    if corner == "nw":
        return (x, y + h - ch, cw, ch)
    if corner == "se":
        return (x + w - cw, y, cw, ch)
    return (x, y, cw, ch)


def _slice_rooms(rng: np.random.Generator, params: GenParams, room_count: int):
    """Split the bounding rectangle into room_count polygons."""
    rects = [(0, 0, params.grid_w, params.grid_h)]
    l_polys = []
    while len(rects) + len(l_polys) < room_count:
        splittable = [r for r in rects if max(r[2], r[3]) >= 2 * MIN_SIDE]
        if not splittable:
            raise GenerationError("slicing jammed before reaching the requested room count")
        areas = np.array([r[2] * r[3] for r in splittable], dtype=float)
        rect = splittable[rng.choice(len(splittable), p=areas / areas.sum())]
        rects.remove(rect)
        x, y, w, h = rect

        can_l = w >= 2 * MIN_SIDE and h >= 2 * MIN_SIDE
        if can_l and rng.random() < params.l_split_prob:
            corner = ("ne", "nw", "se", "sw")[rng.integers(4)]
            cw = int(rng.integers(MIN_SIDE, w - MIN_SIDE + 1))
            ch = int(rng.integers(MIN_SIDE, h - MIN_SIDE + 1))
            l_polys.append(_l_polygon(x, y, w, h, corner, cw, ch))
            rects.append(_corner_rect(x, y, w, h, corner, cw, ch))
            continue

        vertical = w > h or (w == h and rng.random() < 0.5)
        if vertical and w < 2 * MIN_SIDE:
            vertical = False
        if not vertical and h < 2 * MIN_SIDE:
            vertical = True
        if vertical:
            cut = int(rng.integers(MIN_SIDE, w - MIN_SIDE + 1))
            rects.append((x, y, cut, h))
            rects.append((x + cut, y, w - cut, h))
        else:
            cut = int(rng.integers(MIN_SIDE, h - MIN_SIDE + 1))
            rects.append((x, y, w, cut))
            rects.append((x, y + cut, w, h - cut))

    polys = [_rect_polygon(*r) for r in rects] + l_polys
    order = rng.permutation(len(polys))
    return [tuple((float(px), float(py)) for px, py in polys[i]) for i in order]


# ----------------------------------------------------------------------
# doors, windows, types

def _wilson_spanning_tree(rng: np.random.Generator, adjacency: list[list[int]]) -> list[tuple[int, int]]:
    """Uniform spanning tree via loop-erased random walks."""
    n = len(adjacency)
    in_tree = [False] * n
    parent = [-1] * n
    root = 0
    in_tree[root] = True
    for start in range(1, n):
        if in_tree[start]:
            continue
        node = start
        path = {}
        while not in_tree[node]:
            nxt = adjacency[node][rng.integers(len(adjacency[node]))]
            path[node] = nxt
            node = nxt
        node = start
        while not in_tree[node]:
            in_tree[node] = True
            parent[node] = path[node]
            node = path[node]
    return [(i, parent[i]) for i in range(n) if parent[i] >= 0]


def _affinity_spanning_tree(
    rng: np.random.Generator, pairs: list[tuple[int, int]], types: list[str], n: int
) -> list[tuple[int, int]]:
    """Random spanning tree biased toward high-affinity type pairs.

    Exponential edge weights divided by the pair affinity, then a minimum
    spanning tree (Kruskal): still random and always connected, but doors
    preferentially land where real homes put them.
    """
    weighted = []
    for i, j in pairs:
        w = rng.exponential(1.0) / door_affinity(types[i], types[j])
        weighted.append((w, i, j))
    weighted.sort()
    parent = list(range(n))

    def find(a):
        while parent[a] != a:
            parent[a] = parent[parent[a]]
            a = parent[a]
        return a

    tree = []
    for _, i, j in weighted:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[ri] = rj
            tree.append((i, j))
    return tree


_WING_TYPES = ("bedroom", "living room", "dining room", "kitchen", "entry", "garage")


def _sample_types(
    rng: np.random.Generator, params: GenParams, areas: list[float], adjacency: list[list[int]]
) -> list[str]:
    """Sample room types from the configured distribution, conditioned on
    where a room sits in the plan: the best-connected room tends to be the
    hallway, rooms off the hub tend to be primary rooms, small peripheral
    rooms tend to be closets and bathrooms."""
    n = len(areas)
    base = dict(params.type_distribution)
    base.pop("kitchen", None)
    names = sorted(base)
    order = np.argsort(areas)
    rank = np.empty(n)
    rank[order] = np.arange(n) / max(1, n - 1)
    deg = [len(adjacency[i]) for i in range(n)]

    types: list[str | None] = [None] * n
    hub = max(range(n), key=lambda i: (deg[i], areas[i]))
    if n >= 4 and rng.random() < 0.85:
        types[hub] = "hallway"
    hub_neighbors = set(adjacency[hub]) if types[hub] == "hallway" else set()

    for i in range(n):
        if types[i] is not None:
            continue
        weights = np.array([base[t] for t in names])
        if rank[i] <= 0.33:
            weights *= np.array([3.0 if t in _SMALL_ROOM_TYPES else 1.0 for t in names])
        elif rank[i] >= 0.67:
            weights *= np.array([2.5 if t in _LARGE_ROOM_TYPES else 1.0 for t in names])
        if i in hub_neighbors and rank[i] > 0.33:
            weights *= np.array([2.5 if t in _WING_TYPES else 1.0 for t in names])
        elif types[hub] == "hallway" and i not in hub_neighbors:
            weights *= np.array([2.5 if t in _SMALL_ROOM_TYPES else 1.0 for t in names])
        types[i] = names[rng.choice(len(names), p=weights / weights.sum())]

    # exactly one kitchen, placed on a mid-to-large room (hub-adjacent if possible)
    candidates = [i for i in sorted(hub_neighbors) if rank[i] >= 0.4 and types[i] != "hallway"]
    if not candidates:
        candidates = [i for i in range(n) if rank[i] >= 0.4 and types[i] != "hallway"]
    if not candidates:
        candidates = [i for i in range(n) if types[i] != "hallway"] or list(range(n))
    types[candidates[rng.integers(len(candidates))]] = "kitchen"
    if n >= 4 and "bathroom" not in types:
        free = [i for i in range(n) if types[i] not in ("kitchen", "hallway")]
        if not free:
            free = [i for i in range(n) if types[i] != "kitchen"]
        types[free[rng.integers(len(free))]] = "bathroom"
    return types


def _exterior_length(polygon, grid_w: int, grid_h: int) -> float:
    frame = ((0.0, 0.0), (float(grid_w), 0.0), (float(grid_w), float(grid_h)), (0.0, float(grid_h)))
    return shared_boundary_length(polygon, frame)


_TYPE_CENTERS = np.random.default_rng(_SET4_CENTER_SEED).normal(0.0, 1.0, (len(ROOM_TYPES), SET4_DIM))


def _set4_embedding(rng: np.random.Generator, room_type: str) -> np.ndarray:
    """Type-conditioned Gaussian stand-in for an image-feature vector."""
    center = _TYPE_CENTERS[ROOM_TYPES.index(room_type)]
    return center + 0.4 * rng.normal(size=SET4_DIM)


# ----------------------------------------------------------------------
# plan and corpus generation

def generate_floorplan(params: GenParams, seed: int, plan_id: str | None = None) -> Floorplan:
    params.validate()
    rng = np.random.default_rng(seed)
    room_count = int(rng.integers(params.min_rooms, params.max_rooms + 1))
    if room_count > params.capacity():
        raise GenerationError(
            f"{room_count} rooms do not fit a {params.grid_w}x{params.grid_h} grid with {MIN_SIDE}-cell sides"
        )

    polys = None
    for _ in range(20):  # rare slicing jams: retry with the same stream
        try:
            polys = _slice_rooms(rng, params, room_count)
            break
        except GenerationError:
            continue
    if polys is None:
        raise GenerationError(f"could not slice {room_count} rooms on a {params.grid_w}x{params.grid_h} grid")

    n = len(polys)
    areas = [abs(sum(px * qy - qx * py for (px, py), (qx, qy) in zip(p, p[1:] + p[:1]))) / 2 for p in polys]

    adjacency = [[] for _ in range(n)]
    adjacent_pairs = []
    for i in range(n):
        for j in range(i + 1, n):
            if shared_boundary_length(polys[i], polys[j]) > 0.5:
                adjacency[i].append(j)
                adjacency[j].append(i)
                adjacent_pairs.append((i, j))

    types = _sample_types(rng, params, areas, adjacency)

    if params.door_policy == "uniform":
        tree = _wilson_spanning_tree(rng, adjacency)
    else:
        tree = _affinity_spanning_tree(rng, adjacent_pairs, types, n)
    tree_set = {(min(e), max(e)) for e in tree}
    connected = sorted(tree_set)
    for i, j in adjacent_pairs:
        if (i, j) in tree_set:
            continue
        p_extra = params.extra_door_prob
        if params.door_policy == "affinity":
            p_extra = min(1.0, p_extra * door_affinity(types[i], types[j]))
        if rng.random() < p_extra:
            connected.append((i, j))

    door_links = [[] for _ in range(n)]
    opening_links = [[] for _ in range(n)]
    for i, j in sorted(connected):
        p_open = params.opening_prob
        if types[i] in _OPEN_PLAN_TYPES and types[j] in _OPEN_PLAN_TYPES:
            p_open = min(1.0, 2.5 * p_open)
        target = opening_links if rng.random() < p_open else door_links
        target[i].append(j)
        target[j].append(i)

    rooms = []
    for i in range(n):
        ext = _exterior_length(polys[i], params.grid_w, params.grid_h)
        slots = int(ext // 2)
        windows = int(rng.binomial(slots, params.window_density)) if slots else 0
        rooms.append(
            Room(
                id=i,
                room_type=types[i],
                polygon=polys[i],
                door_links=tuple(sorted(door_links[i])),
                opening_links=tuple(sorted(opening_links[i])),
                window_count=windows,
            )
        )
    fp = Floorplan(id=plan_id or f"plan-{seed:08d}", rooms=tuple(rooms))
    fp.validate()
    return fp


def generate_record(params: GenParams, seed: int, plan_id: str | None = None) -> Record:
    fp = generate_floorplan(params, seed, plan_id)
    rng4 = np.random.default_rng([seed, 4])
    set4 = np.stack([_set4_embedding(rng4, room.room_type) for room in fp.rooms])
    fm = feat.assemble_features(fp, sets=(1, 2, 3, 4), external_set4=set4)
    return Record(floorplan=fp, features=fm, graph=build_graph(fp))


def split_sizes(n_graphs: int) -> tuple[int, int, int]:
    """Proportional 700:200:317 split; train/val floor, test takes the rest."""
    total = sum(SPLIT_RATIOS)
    n_train = int(n_graphs * SPLIT_RATIOS[0] / total)
    n_val = int(n_graphs * SPLIT_RATIOS[1] / total)
    return n_train, n_val, n_graphs - n_train - n_val


def corpus_statistics(records) -> dict:
    nodes = [r.floorplan.n for r in records]
    spatial = [len(r.graph.edge_list("spatial")) for r in records]
    door = [len(r.graph.edge_list("door")) for r in records]
    wall = [len(r.graph.edge_list("wall")) for r in records]
    mean_door = float(np.mean(door))
    return {
        "graphs": len(records),
        "mean_nodes": float(np.mean(nodes)),
        "node_range": [int(min(nodes)), int(max(nodes))],
        "mean_spatial_edges": float(np.mean(spatial)),
        "mean_door_edges": mean_door,
        "mean_wall_edges": float(np.mean(wall)),
        "spatial_to_door_ratio": float(np.mean(spatial) / mean_door) if mean_door else float("nan"),
    }


def _record_task(args) -> Record:
    params, seed, plan_id = args
    return generate_record(params, seed, plan_id)


def generate_corpus(n_graphs: int, params: GenParams, seed: int, threads: int = 1) -> Corpus:
    """Generate a split corpus; identical output for any thread count.

    Each plan derives its own seed from the corpus seed, so generation is
    embarrassingly parallel: threads > 1 fans plans out over processes.
    """
    if n_graphs < 10:
        raise GenerationError(f"corpus needs at least 10 graphs, got {n_graphs}")
    params.validate()
    child_seeds = np.random.SeedSequence(seed).generate_state(n_graphs, dtype=np.uint32)
    tasks = [(params, int(child_seeds[i]), f"fp-{i:05d}") for i in range(n_graphs)]
    if threads > 1:
        import multiprocessing

        with multiprocessing.Pool(threads) as pool:
            records = pool.map(_record_task, tasks, chunksize=32)
    else:
        records = [_record_task(t) for t in tasks]
    n_train, n_val, n_test = split_sizes(n_graphs)
    corpus = Corpus(
        train=records[:n_train],
        val=records[n_train:n_train + n_val],
        test=records[n_train + n_val:],
        manifest={
            "format_version": 1,
            "seed": seed,
            "n_graphs": n_graphs,
            "params": asdict(params),
            "splits": {"train": n_train, "val": n_val, "test": n_test},
            "achieved": corpus_statistics(records),
        },
    )
    return corpus


# ----------------------------------------------------------------------
# persistence

def save_corpus(corpus: Corpus, out_dir) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for name, records in corpus.splits().items():
        payload = {"records": [r.to_dict() for r in records]}
        (out / f"{name}.json").write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")
    (out / "manifest.json").write_text(json.dumps(corpus.manifest, indent=2, sort_keys=True), encoding="utf-8")


def load_corpus(in_dir) -> Corpus:
    src = Path(in_dir)
    manifest_path = src / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {src}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    splits = {}
    for name in ("train", "val", "test"):
        data = json.loads((src / f"{name}.json").read_text(encoding="utf-8"))
        splits[name] = [Record.from_dict(rd) for rd in data["records"]]
    return Corpus(train=splits["train"], val=splits["val"], test=splits["test"], manifest=manifest)
