"""Compact metric graphs: topology, edge parametrization, distances, meshes.

A point on the graph is an ``(edge, s)`` pair with ``s`` the arclength
coordinate along the edge, measured from its tail vertex.  Points that sit
on a vertex are canonicalized so that equality is decidable regardless of
which incident edge was used to reach them.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Hashable, Iterable, Mapping, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components, shortest_path

LENGTH_RTOL = 1e-9


class GraphError(ValueError):
    """Raised for malformed graph documents or invalid geometric queries."""


@dataclass(frozen=True)
class Vertex:
    id: Hashable
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    id: Hashable
    tail: Hashable
    head: Hashable
    length: float
    polyline: tuple[tuple[float, float], ...] | None = None


@dataclass(frozen=True, order=True)
class GraphPoint:
    edge: Hashable
    s: float


def _sort_key(value: Hashable) -> tuple[str, Any]:
    # ids may be ints or strings; keep numeric ids in numeric order
    if isinstance(value, (int, np.integer)):
        return ("0", int(value))
    return ("1", str(value))


def polyline_length(points: Sequence[Sequence[float]]) -> float:
    pts = np.asarray(points, dtype=float)
    if len(pts) < 2:
        return 0.0
    return float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))


class MetricGraph:
    """Immutable metric graph with a planar embedding.

    Vertex ids are kept in sorted order; this order fixes the global node
    numbering of any mesh built on the graph.
    """

    def __init__(self, vertices: Iterable[Vertex], edges: Iterable[Edge]):
        vlist = sorted(vertices, key=lambda v: _sort_key(v.id))
        elist = sorted(edges, key=lambda e: _sort_key(e.id))
        if not vlist:
            raise GraphError("graph has no vertices")
        self.vertices: dict[Hashable, Vertex] = {}
        for v in vlist:
            if v.id in self.vertices:
                raise GraphError(f"duplicate vertex id {v.id!r}")
            self.vertices[v.id] = v
        self.edges: dict[Hashable, Edge] = {}
        for e in elist:
            if e.id in self.edges:
                raise GraphError(f"duplicate edge id {e.id!r}")
            for end in (e.tail, e.head):
                if end not in self.vertices:
                    raise GraphError(f"edge {e.id!r} references unknown vertex {end!r}")
            if not (e.length > 0 and math.isfinite(e.length)):
                raise GraphError(f"edge {e.id!r} has nonpositive length {e.length}")
            if e.polyline is not None:
                arc = polyline_length(e.polyline)
                if abs(arc - e.length) > LENGTH_RTOL * e.length:
                    raise GraphError(
                        f"edge {e.id!r}: polyline arclength {arc} differs from length {e.length}"
                    )
            self.edges[e.id] = e
        self.vertex_ids: list[Hashable] = list(self.vertices)
        self.edge_ids: list[Hashable] = list(self.edges)
        self._vindex = {vid: i for i, vid in enumerate(self.vertex_ids)}
        self._incident: dict[Hashable, list[Hashable]] = {vid: [] for vid in self.vertex_ids}
        for e in self.edges.values():
            self._incident[e.tail].append(e.id)
            if e.head != e.tail:
                self._incident[e.head].append(e.id)
        self._diameter: dict[int, float] = {}
        ncomp, _ = connected_components(self._adjacency(), directed=False)
        if ncomp != 1:
            raise GraphError(f"graph is disconnected ({ncomp} components)")

    def __repr__(self) -> str:
        return f"MetricGraph(|V|={len(self.vertices)}, |E|={len(self.edges)}, length={self.total_length:.6g})"

    def _adjacency(self) -> sp.csr_matrix:
        n = len(self.vertex_ids)
        best: dict[tuple[int, int], float] = {}
        for e in self.edges.values():
            i, j = self._vindex[e.tail], self._vindex[e.head]
            if i == j:
                continue
            key = (min(i, j), max(i, j))
            best[key] = min(best.get(key, math.inf), e.length)
        if not best:
            return sp.csr_matrix((n, n))
        rows, cols = zip(*best)
        w = list(best.values())
        a = sp.coo_matrix((w, (rows, cols)), shape=(n, n))
        return (a + a.T).tocsr()

    @cached_property
    def vertex_distances(self) -> np.ndarray:
        """All-pairs shortest-path distances between vertices (Dijkstra)."""
        return shortest_path(self._adjacency(), method="D", directed=False)

    @property
    def total_length(self) -> float:
        return float(sum(e.length for e in self.edges.values()))

    def vertex_index(self, vid: Hashable) -> int:
        return self._vindex[vid]

    def incident_edges(self, vid: Hashable) -> list[Hashable]:
        return list(self._incident[vid])

    def degree(self, vid: Hashable) -> int:
        return sum(
            2 if self.edges[eid].tail == self.edges[eid].head else 1 for eid in self._incident[vid]
        )

    # -- points -----------------------------------------------------------

    def point(self, edge: Hashable, s: float) -> GraphPoint:
        """Validated, canonical point at arclength ``s`` along ``edge``."""
        if edge not in self.edges:
            raise GraphError(f"unknown edge {edge!r}")
        e = self.edges[edge]
        s = float(s)
        tol = LENGTH_RTOL * e.length
        if not (-tol <= s <= e.length + tol):
            raise GraphError(f"s={s} outside [0, {e.length}] on edge {edge!r}")
        if s <= tol:
            return self.vertex_point(e.tail)
        if s >= e.length - tol:
            return self.vertex_point(e.head)
        return GraphPoint(edge, s)

    def vertex_point(self, vid: Hashable) -> GraphPoint:
        """Canonical representative of a vertex: lowest incident edge id."""
        eid = min(self._incident[vid], key=_sort_key)
        e = self.edges[eid]
        return GraphPoint(eid, 0.0 if e.tail == vid else e.length)

    def vertex_of(self, x: GraphPoint) -> Hashable | None:
        e = self.edges[x.edge]
        if x.s == 0.0:
            return e.tail
        if x.s == e.length:
            return e.head
        return None

    def check_point(self, x: GraphPoint) -> None:
        e = self.edges.get(x.edge)
        if e is None:
            raise GraphError(f"point {x} lies on unknown edge")
        if not (0.0 <= x.s <= e.length):
            raise GraphError(f"point {x} outside edge range [0, {e.length}]")

    # -- geometry ---------------------------------------------------------

    def embed(self, x: GraphPoint) -> np.ndarray:
        """Planar coordinates of ``x`` (linear interpolation along the edge geometry)."""
        self.check_point(x)
        e = self.edges[x.edge]
        if e.polyline is not None:
            pts = np.asarray(e.polyline, dtype=float)
            seg = np.hypot(*np.diff(pts, axis=0).T)
            cum = np.concatenate([[0.0], np.cumsum(seg)])
            target = x.s / e.length * cum[-1]
            return np.array([np.interp(target, cum, pts[:, 0]), np.interp(target, cum, pts[:, 1])])
        a, b = self.vertices[e.tail], self.vertices[e.head]
        if e.tail == e.head:
            raise GraphError(f"edge {e.id!r} is a loop without polyline; no embedding")
        frac = x.s / e.length
        return np.array([a.x + frac * (b.x - a.x), a.y + frac * (b.y - a.y)])

    def _to_ends(self, x: GraphPoint) -> tuple[int, int, float, float]:
        e = self.edges[x.edge]
        return self._vindex[e.tail], self._vindex[e.head], x.s, e.length - x.s

    def distance(self, x: GraphPoint, y: GraphPoint) -> float:
        """Shortest-path distance between two points."""
        self.check_point(x)
        self.check_point(y)
        D = self.vertex_distances
        xa, xb, xs, xr = self._to_ends(x)
        ya, yb, ys, yr = self._to_ends(y)
        best = min(
            xs + D[xa, ya] + ys,
            xs + D[xa, yb] + yr,
            xr + D[xb, ya] + ys,
            xr + D[xb, yb] + yr,
        )
        if x.edge == y.edge:
            best = min(best, abs(x.s - y.s))
        return float(best)

    def euclidean_distance(self, x: GraphPoint, y: GraphPoint) -> float:
        return float(np.hypot(*(self.embed(x) - self.embed(y))))

    def pairwise_distances(self, xs: Sequence[GraphPoint], ys: Sequence[GraphPoint] | None = None) -> np.ndarray:
        """Vectorized shortest-path distance matrix between two point lists."""
        ys = xs if ys is None else ys
        D = self.vertex_distances
        ex = np.array([self._to_ends(p) for p in xs], dtype=float).reshape(-1, 4)
        ey = np.array([self._to_ends(p) for p in ys], dtype=float).reshape(-1, 4)
        xa, xb, xs_, xr = (ex[:, k] for k in range(4))
        ya, yb, ys_, yr = (ey[:, k] for k in range(4))
        xa, xb, ya, yb = (v.astype(int) for v in (xa, xb, ya, yb))
        cand = [
            xs_[:, None] + D[np.ix_(xa, ya)] + ys_[None, :],
            xs_[:, None] + D[np.ix_(xa, yb)] + yr[None, :],
            xr[:, None] + D[np.ix_(xb, ya)] + ys_[None, :],
            xr[:, None] + D[np.ix_(xb, yb)] + yr[None, :],
        ]
        out = np.minimum.reduce(cand)
        eidx = {eid: k for k, eid in enumerate(self.edge_ids)}
        xe = np.array([eidx[p.edge] for p in xs])
        ye = np.array([eidx[p.edge] for p in ys])
        same = xe[:, None] == ye[None, :]
        if same.any():
            direct = np.abs(xs_[:, None] - ys_[None, :])
            out = np.where(same, np.minimum(out, direct), out)
        return out

    def diameter(self, resolution: int = 1000) -> float:
        """Shortest-path diameter, evaluated on a uniform mesh of about ``resolution`` nodes."""
        if resolution not in self._diameter:
            mesh = build_mesh(self, self.total_length / resolution)
            self._diameter[resolution] = float(mesh.distance_matrix.max())
        return self._diameter[resolution]

    # -- serialization ----------------------------------------------------

    def to_document(self) -> dict[str, Any]:
        doc: dict[str, Any] = {
            "vertices": [{"id": v.id, "x": v.x, "y": v.y} for v in self.vertices.values()],
            "edges": [],
        }
        for e in self.edges.values():
            item: dict[str, Any] = {"id": e.id, "tail": e.tail, "head": e.head, "length": e.length}
            if e.polyline is not None:
                item["polyline"] = [list(p) for p in e.polyline]
            doc["edges"].append(item)
        return doc


def build_graph(doc: Mapping[str, Any]) -> MetricGraph:
    """Validate a graph document and build the metric graph.

    Edge length defaults to the polyline arclength when a polyline is given,
    otherwise to the straight-line distance between the endpoints.
    """
    try:
        raw_vertices = doc["vertices"]
        raw_edges = doc["edges"]
    except (KeyError, TypeError) as exc:
        raise GraphError("graph document needs 'vertices' and 'edges'") from exc
    vertices = [Vertex(v["id"], float(v["x"]), float(v["y"])) for v in raw_vertices]
    coords = {v.id: (v.x, v.y) for v in vertices}
    edges = []
    for item in raw_edges:
        tail, head = item["tail"], item["head"]
        for end in (tail, head):
            if end not in coords:
                raise GraphError(f"edge {item.get('id')!r} references unknown vertex {end!r}")
        poly = item.get("polyline")
        if poly is not None:
            poly = tuple((float(p[0]), float(p[1])) for p in poly)
        length = item.get("length")
        if length is None:
            if poly is not None:
                length = polyline_length(poly)
            else:
                (x0, y0), (x1, y1) = coords[tail], coords[head]
                length = math.hypot(x1 - x0, y1 - y0)
        edges.append(Edge(item["id"], tail, head, float(length), poly))
    return MetricGraph(vertices, edges)


def load_graph(path: str | Path) -> MetricGraph:
    with open(path, encoding="utf-8") as fh:
        return build_graph(json.load(fh))


def shortest_path_distance(g: MetricGraph, x: GraphPoint, y: GraphPoint) -> float:
    return g.distance(x, y)


def euclidean_distance(g: MetricGraph, x: GraphPoint, y: GraphPoint) -> float:
    return g.euclidean_distance(x, y)


@dataclass(frozen=True)
class Mesh:
    """Uniform per-edge partition of a metric graph.

    Global numbering: vertex nodes first (vertex id order), then interior
    nodes edge by edge (edge id order, increasing ``s``).
    """

    graph: MetricGraph
    n_e: dict[Hashable, int]
    nodes: tuple[GraphPoint, ...]
    vertex_node: dict[Hashable, int]
    edge_nodes: dict[Hashable, np.ndarray] = field(repr=False)

    @property
    def N(self) -> int:
        return len(self.nodes)

    @property
    def h(self) -> float:
        return max(self.graph.edges[eid].length / n for eid, n in self.n_e.items())

    def h_e(self, eid: Hashable) -> float:
        return self.graph.edges[eid].length / self.n_e[eid]

    @cached_property
    def node_index(self) -> dict[GraphPoint, int]:
        return {p: i for i, p in enumerate(self.nodes)}

    def index_of(self, x: GraphPoint) -> int | None:
        """Global node index of ``x`` if it is a mesh node."""
        return self.node_index.get(x)

    @cached_property
    def coordinates(self) -> np.ndarray:
        return np.array([self.graph.embed(p) for p in self.nodes])

    @cached_property
    def distance_matrix(self) -> np.ndarray:
        return self.graph.pairwise_distances(self.nodes)


def build_mesh(g: MetricGraph, h_target: float) -> Mesh:
    if not (h_target > 0):
        raise GraphError(f"h_target must be positive, got {h_target}")
    n_e = {eid: max(1, math.ceil(e.length / h_target - 1e-12)) for eid, e in g.edges.items()}
    nodes: list[GraphPoint] = [g.vertex_point(vid) for vid in g.vertex_ids]
    vertex_node = {vid: i for i, vid in enumerate(g.vertex_ids)}
    edge_nodes: dict[Hashable, np.ndarray] = {}
    for eid, e in g.edges.items():
        n = n_e[eid]
        he = e.length / n
        idx = [vertex_node[e.tail]]
        for j in range(1, n):
            idx.append(len(nodes))
            nodes.append(GraphPoint(eid, j * he))
        idx.append(vertex_node[e.head])
        edge_nodes[eid] = np.asarray(idx, dtype=int)
    return Mesh(g, n_e, tuple(nodes), vertex_node, edge_nodes)
