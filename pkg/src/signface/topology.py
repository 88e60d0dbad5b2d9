"""Face graph and the multi-scale graph pyramid used by the decoder.

The finest level has 69 vertices: the 68 standard detector landmarks plus
their centroid (vertex 68), which also serves as the root of the pyramid.
Coarser levels are nested farthest-point subsets of the template.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidParameterError, VersionMismatchError

NUM_LANDMARKS = 69
ROOT_VERTEX = 68
DEFAULT_LEVEL_SIZES = (1, 7, 16, 43, 69)
DEFAULT_K = 3
DEFAULT_MAX_GEODESIC = 2
TOPOLOGY_SCHEMA = "v1"

JAW = tuple(range(0, 17))
LEFT_BROW = tuple(range(17, 22))
RIGHT_BROW = tuple(range(22, 27))
NOSE = tuple(range(27, 36))
LEFT_EYE = tuple(range(36, 42))
RIGHT_EYE = tuple(range(42, 48))
OUTER_LIPS = tuple(range(48, 60))
INNER_LIPS = tuple(range(60, 68))
# eye corners, nose tip, mouth corners
STABLE_ANCHORS = (36, 45, 33, 48, 54)


def _chain(idx, closed=False):
    pairs = [(idx[i], idx[i + 1]) for i in range(len(idx) - 1)]
    if closed:
        pairs.append((idx[-1], idx[0]))
    return pairs


def canonical_base_edges() -> frozenset[tuple[int, int]]:
    """Standard 68-landmark connectivity plus root-to-anchor edges."""
    edges = []
    for part in (JAW, LEFT_BROW, RIGHT_BROW, NOSE):
        edges += _chain(part)
    for part in (LEFT_EYE, RIGHT_EYE, OUTER_LIPS, INNER_LIPS):
        edges += _chain(part, closed=True)
    edges += [(ROOT_VERTEX, a) for a in STABLE_ANCHORS]
    return frozenset(_normalize_edge(i, j) for i, j in edges)


def _normalize_edge(i, j):
    return (i, j) if i < j else (j, i)


def _template68() -> np.ndarray:
    pts = np.zeros((68, 2))
    t = np.linspace(0.0, np.pi, 17)
    pts[0:17] = np.stack([-np.cos(t), 0.1 + 1.1 * np.sin(t)], axis=1)
    s = np.linspace(0.0, 1.0, 5)
    arch = -0.45 - 0.1 * np.sin(np.pi * s)
    pts[17:22] = np.stack([-0.8 + 0.6 * s, arch], axis=1)
    pts[22:27] = np.stack([0.2 + 0.6 * s, arch[::-1]], axis=1)
    pts[27:31] = np.stack([np.zeros(4), np.linspace(-0.3, 0.2, 4)], axis=1)
    pts[31:36] = np.stack([np.linspace(-0.2, 0.2, 5), [0.3, 0.32, 0.34, 0.32, 0.3]], axis=1)
    # eyes: outer corner, two upper lid points, inner corner, two lower lid points
    phi = np.array([np.pi, 2 * np.pi / 3, np.pi / 3, 0.0, -np.pi / 3, -2 * np.pi / 3])
    for start, cx in ((36, -0.45), (42, 0.45)):
        pts[start:start + 6] = np.stack([cx + 0.15 * np.cos(phi), -0.2 - 0.06 * np.sin(phi)], axis=1)
    phi = np.pi - np.arange(12) * np.pi / 6
    pts[48:60] = np.stack([0.4 * np.cos(phi), 0.7 - 0.15 * np.sin(phi)], axis=1)
    phi = np.pi - np.arange(8) * np.pi / 4
    pts[60:68] = np.stack([0.3 * np.cos(phi), 0.7 - 0.06 * np.sin(phi)], axis=1)
    return pts


def append_centroid(points68: np.ndarray) -> np.ndarray:
    """Append vertex 68 (the centroid) to ``(..., 68, 2)`` detector output."""
    points68 = np.asarray(points68, dtype=float)
    if points68.shape[-2:] != (68, 2):
        raise InvalidParameterError(f"expected (..., 68, 2) landmarks, got {points68.shape}")
    centroid = points68.mean(axis=-2, keepdims=True)
    return np.concatenate([points68, centroid], axis=-2)


def canonical_template() -> np.ndarray:
    """The 69x2 frontal template in bounding-box normalized units (image axes, y down)."""
    from .preprocessing import normalize_bbox

    return normalize_bbox(append_centroid(_template68()))


@dataclass(frozen=True)
class FaceGraph:
    num_vertices: int
    edges: frozenset
    base_positions: np.ndarray | None = field(default=None, compare=False)

    def __post_init__(self):
        for i, j in self.edges:
            if i == j:
                raise InvalidParameterError(f"self-loop at vertex {i}")
            if not (0 <= i < self.num_vertices and 0 <= j < self.num_vertices):
                raise InvalidParameterError(f"edge ({i}, {j}) out of range")
            if i > j:
                raise InvalidParameterError("edges must be stored as (low, high) pairs")

    def has_edge(self, i, j):
        return _normalize_edge(i, j) in self.edges

    def sorted_edges(self):
        return sorted(self.edges)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_vertices, self.num_vertices))
        for i, j in self.edges:
            a[i, j] = a[j, i] = 1.0
        return a

    def neighbors(self):
        nbrs = [[] for _ in range(self.num_vertices)]
        for i, j in self.sorted_edges():
            nbrs[i].append(j)
            nbrs[j].append(i)
        return nbrs


def knn_edges(positions: np.ndarray, k: int) -> set[tuple[int, int]]:
    positions = np.asarray(positions, dtype=float)
    n = len(positions)
    diff = positions[:, None, :] - positions[None, :, :]
    dist = np.sqrt((diff ** 2).sum(-1))
    np.fill_diagonal(dist, np.inf)
    edges = set()
    for i in range(n):
        # stable sort: equal distances resolved in favor of the lower index
        for j in np.argsort(dist[i], kind="stable")[:k]:
            edges.add(_normalize_edge(i, int(j)))
    return edges


def build_knn_graph(positions, k: int, base_edges=()) -> FaceGraph:
    """Union of ``base_edges`` with each vertex's ``k`` Euclidean nearest neighbours."""
    positions = np.asarray(positions, dtype=float)
    if positions.ndim != 2 or positions.shape[1] != 2:
        raise InvalidParameterError(f"positions must be Px2, got {positions.shape}")
    if not np.all(np.isfinite(positions)):
        raise InvalidParameterError("positions must be finite")
    n = len(positions)
    if k < 0 or k >= n:
        raise InvalidParameterError(f"k={k} must satisfy 0 <= k < P={n}")
    edges = {_normalize_edge(int(i), int(j)) for i, j in base_edges if i != j}
    edges |= knn_edges(positions, k)
    return FaceGraph(n, frozenset(edges), positions.copy())


def geodesic_distances(graph: FaceGraph, source: int) -> np.ndarray:
    """Breadth-first hop counts from ``source``; unreachable vertices are ``inf``."""
    if not 0 <= source < graph.num_vertices:
        raise IndexError(f"source {source} out of range for {graph.num_vertices} vertices")
    dist = np.full(graph.num_vertices, np.inf)
    dist[source] = 0
    nbrs = graph.neighbors()
    queue = deque([source])
    while queue:
        u = queue.popleft()
        for v in nbrs[u]:
            if dist[v] == np.inf:
                dist[v] = dist[u] + 1
                queue.append(v)
    return dist


def farthest_point_order(positions: np.ndarray, seed_vertex: int, count: int) -> list[int]:
    positions = np.asarray(positions, dtype=float)
    order = [seed_vertex]
    mind = np.linalg.norm(positions - positions[seed_vertex], axis=1)
    while len(order) < count:
        mind[order] = -np.inf
        nxt = int(np.argmax(mind))  # argmax returns the lowest index among ties
        order.append(nxt)
        mind = np.minimum(mind, np.linalg.norm(positions - positions[nxt], axis=1))
    return order


def _geodesic_masks(fine: FaceGraph, anchors, max_geodesic):
    masks = np.zeros((max_geodesic, fine.num_vertices, len(anchors)))
    for j, a in enumerate(anchors):
        d = geodesic_distances(fine, a)
        for i in range(fine.num_vertices):
            if d[i] < max_geodesic:
                masks[int(d[i]), i, j] = 1.0
    return masks


@dataclass(frozen=True)
class GraphPyramid:
    levels: tuple  # FaceGraph per level, coarse to fine
    level_vertices: tuple  # template indices of each level's vertices, ascending
    correspondences: tuple  # per pair: fine-level index anchoring each coarse vertex
    inter_level_adjacency: tuple  # per pair: (B, |V_fine|, |V_coarse|) 0/1 array
    k: int
    max_geodesic: int
    bridges: tuple = ()  # per pair: edges added to the fine level to avoid orphans

    @property
    def sizes(self):
        return [g.num_vertices for g in self.levels]

    @property
    def version(self) -> str:
        return f"{TOPOLOGY_SCHEMA}-k{self.k}-b{self.max_geodesic}-{self.digest()[:12]}"

    def digest(self) -> str:
        payload = json.dumps(self._content(), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()

    def _content(self):
        return {
            "k": self.k,
            "max_geodesic": self.max_geodesic,
            "levels": [
                {"vertices": list(map(int, verts)), "edges": [list(e) for e in g.sorted_edges()]}
                for g, verts in zip(self.levels, self.level_vertices)
            ],
            "correspondences": [list(map(int, c)) for c in self.correspondences],
            "bridges": [[list(e) for e in b] for b in self.bridges],
            "masks": [m.astype(int).tolist() for m in self.inter_level_adjacency],
        }

    def to_json(self) -> dict:
        doc = {"topology_version": self.version}
        doc.update(self._content())
        finest = self.levels[-1].base_positions
        doc["template"] = finest.tolist() if finest is not None else None
        return doc

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_json(), indent=1))

    @classmethod
    def from_json(cls, doc: dict) -> "GraphPyramid":
        version = doc.get("topology_version", "")
        if not isinstance(version, str) or not version.startswith(TOPOLOGY_SCHEMA + "-"):
            raise VersionMismatchError(f"unknown topology_version {version!r}")
        template = np.asarray(doc["template"]) if doc.get("template") is not None else None
        levels, verts = [], []
        for lvl in doc["levels"]:
            v = tuple(lvl["vertices"])
            pos = template[list(v)] if template is not None else None
            levels.append(FaceGraph(len(v), frozenset(tuple(e) for e in lvl["edges"]), pos))
            verts.append(v)
        pyr = cls(
            levels=tuple(levels),
            level_vertices=tuple(verts),
            correspondences=tuple(tuple(c) for c in doc["correspondences"]),
            inter_level_adjacency=tuple(np.asarray(m, dtype=float) for m in doc["masks"]),
            k=int(doc["k"]),
            max_geodesic=int(doc["max_geodesic"]),
            bridges=tuple(tuple(tuple(e) for e in b) for b in doc.get("bridges", [])),
        )
        if pyr.version != version:
            raise VersionMismatchError(
                f"topology content does not match its version tag ({pyr.version} != {version})"
            )
        return pyr

    @classmethod
    def load(cls, path) -> "GraphPyramid":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read topology file {path}: {exc}") from exc
        return cls.from_json(doc)


def build_pyramid(
    template=None,
    level_sizes=DEFAULT_LEVEL_SIZES,
    k: int = DEFAULT_K,
    max_geodesic: int = DEFAULT_MAX_GEODESIC,
) -> GraphPyramid:
    """Nested farthest-point levels with geodesic inter-level masks.

    Every coarse vertex is anchored at its own copy in the next finer level.
    When ``max_geodesic >= 2`` and a fine vertex ends up further than
    ``max_geodesic - 1`` hops from every anchor, an edge to its Euclidean
    nearest anchor is added to the fine level so no vertex is left without
    an upsampling source.
    """
    template = canonical_template() if template is None else np.asarray(template, dtype=float)
    sizes = [int(s) for s in level_sizes]
    if any(b <= a for a, b in zip(sizes, sizes[1:])) or sizes[0] < 1:
        raise InvalidParameterError(f"level sizes must be strictly increasing: {sizes}")
    if sizes[-1] != NUM_LANDMARKS or template.shape != (NUM_LANDMARKS, 2):
        raise InvalidParameterError("finest level must match the 69-vertex template")
    if max_geodesic < 1:
        raise InvalidParameterError("max_geodesic must be >= 1")
    if k < 0:
        raise InvalidParameterError("k must be >= 0")

    order = farthest_point_order(template, ROOT_VERTEX, NUM_LANDMARKS)
    level_vertices = [tuple(sorted(order[:n])) for n in sizes]

    graphs = []
    for n, verts in zip(sizes, level_vertices):
        pos = template[list(verts)]
        base = canonical_base_edges() if n == NUM_LANDMARKS else ()
        graphs.append(build_knn_graph(pos, min(k, n - 1), base))

    correspondences, masks, bridges = [], [], []
    for lvl in range(len(sizes) - 1):
        coarse, fine_verts = level_vertices[lvl], level_vertices[lvl + 1]
        position = {v: i for i, v in enumerate(fine_verts)}
        anchors = [position[v] for v in coarse]
        fine = graphs[lvl + 1]
        added = []
        m = _geodesic_masks(fine, anchors, max_geodesic)
        if max_geodesic >= 2:
            for i in np.flatnonzero(m.sum(axis=(0, 2)) == 0):
                d = np.linalg.norm(fine.base_positions[anchors] - fine.base_positions[i], axis=1)
                added.append(_normalize_edge(int(i), anchors[int(np.argmin(d))]))
            if added:
                fine = FaceGraph(fine.num_vertices, fine.edges | frozenset(added), fine.base_positions)
                graphs[lvl + 1] = fine
                m = _geodesic_masks(fine, anchors, max_geodesic)
        correspondences.append(tuple(anchors))
        masks.append(m)
        bridges.append(tuple(sorted(added)))

    return GraphPyramid(
        levels=tuple(graphs),
        level_vertices=tuple(level_vertices),
        correspondences=tuple(correspondences),
        inter_level_adjacency=tuple(masks),
        k=k,
        max_geodesic=max_geodesic,
        bridges=tuple(bridges),
    )


DEFAULT_TOPOLOGY_FILE = "topology_v1.json"


@lru_cache(maxsize=None)
def default_pyramid() -> GraphPyramid:
    """The frozen default topology shipped with the package."""
    ref = resources.files("signface") / "data" / DEFAULT_TOPOLOGY_FILE
    return GraphPyramid.from_json(json.loads(ref.read_text()))
