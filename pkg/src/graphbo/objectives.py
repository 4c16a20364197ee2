"""Objective functions on metric graphs.

Benchmarks compose a 1-D test function with a vertex-anchored piecewise
linear field; the inverse problem scores candidate source nodes by their
log-posterior under a diffusion forward model.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Callable, Hashable, Mapping

import numpy as np
import scipy.sparse.linalg as spla

from .fem import assemble
from .metric_graph import GraphError, GraphPoint, MetricGraph, Mesh


def g_ackley(u):
    u = np.asarray(u, dtype=float)
    return -20.0 * np.exp(-0.2 * np.abs(u)) - np.exp(np.cos(2 * np.pi * u)) + 20.0 + math.e


def g_rastrigin(u):
    u = np.asarray(u, dtype=float)
    return u**2 - 10.0 * np.cos(2 * np.pi * u) + 10.0


def g_levy(u):
    w = 1.0 + (np.asarray(u, dtype=float) - 1.0) / 4.0
    return np.sin(np.pi * w) ** 2 + (w - 1.0) ** 2 * (1.0 + np.sin(2 * np.pi * w) ** 2)


BENCHMARKS: dict[str, Callable] = {"ackley": g_ackley, "rastrigin": g_rastrigin, "levy": g_levy}
MINIMIZERS = {"ackley": 0.0, "rastrigin": 0.0, "levy": 1.0}


def eval_benchmark(kind: str, u):
    try:
        g = BENCHMARKS[kind.lower()]
    except KeyError:
        raise ValueError(f"unknown benchmark {kind!r}; choose from {sorted(BENCHMARKS)}") from None
    out = g(u)
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class AnchorField:
    """Per-vertex anchors, linearly interpolated along every edge."""

    graph: MetricGraph
    anchors: Mapping[Hashable, float]

    def __post_init__(self):
        missing = [v for v in self.graph.vertex_ids if v not in self.anchors]
        if missing:
            raise GraphError(f"anchors missing for vertices {missing}")

    def __call__(self, x: GraphPoint) -> float:
        self.graph.check_point(x)
        e = self.graph.edges[x.edge]
        w = x.s / e.length
        return (1.0 - w) * self.anchors[e.tail] + w * self.anchors[e.head]

    def at(self, points) -> np.ndarray:
        return np.array([self(p) for p in points])


def eval_anchor(a: AnchorField, x: GraphPoint) -> float:
    return a(x)


class Objective:
    """Deterministic function known at every mesh node; BO maximizes it."""

    mesh: Mesh
    values: np.ndarray

    def __call__(self, x: GraphPoint) -> float:
        k = self.mesh.index_of(x)
        if k is None:
            raise GraphError(f"{x} is not a mesh node")
        return float(self.values[k])

    @property
    def optimum(self) -> float:
        return float(self.values.max())

    @property
    def argmax(self) -> int:
        return int(np.argmax(self.values))


class BenchmarkObjective(Objective):
    """f(x) = -g(a(x)) / max_Z |g(a)|, so the maximum sits where a hits the minimizer of g."""

    def __init__(self, kind: str, anchors: AnchorField, mesh: Mesh):
        if kind.lower() not in BENCHMARKS:
            raise ValueError(f"unknown benchmark {kind!r}")
        self.kind = kind.lower()
        self.anchors = anchors
        self.mesh = mesh
        raw = -np.asarray(eval_benchmark(self.kind, anchors.at(mesh.nodes)), dtype=float)
        self.scale = float(np.max(np.abs(raw))) or 1.0
        self.values = raw / self.scale

    def __repr__(self) -> str:
        return f"BenchmarkObjective({self.kind}, N={self.mesh.N})"

    def evaluate(self, x: GraphPoint) -> float:
        """Value anywhere on the graph (not only at nodes)."""
        return -float(eval_benchmark(self.kind, self.anchors(x))) / self.scale


class InverseProblem:
    """Source identification for ``(chi^2 - Laplacian) p = g`` on a meshed graph.

    The load for a source at node ``j`` is the Galerkin vector of the tent
    function ``e_j``, i.e. column ``j`` of the consistent mass matrix.
    """

    def __init__(self, mesh: Mesh, chi: float = 0.2, sigma_eta: float = 0.1):
        if not chi > 0:
            raise ValueError(f"chi must be positive, got {chi}")
        if not sigma_eta >= 0:
            raise ValueError(f"sigma_eta must be nonnegative, got {sigma_eta}")
        self.mesh = mesh
        self.chi = float(chi)
        self.sigma_eta = float(sigma_eta)
        self.op = assemble(mesh, self.chi)
        self.L = self.op.stiffness_form(lumped=False)

    @cached_property
    def _lu(self) -> spla.SuperLU:
        return spla.splu(self.L.tocsc())

    @cached_property
    def solutions(self) -> np.ndarray:
        """All forward solutions; column ``j`` is ``p_h`` for a source at node ``j``."""
        return self._lu.solve(self.op.C.toarray())

    def forward_map(self, j: int) -> np.ndarray:
        if not 0 <= j < self.mesh.N:
            raise IndexError(f"source index {j} outside 0..{self.mesh.N - 1}")
        return self.solutions[:, j].copy()

    @cached_property
    def prior(self) -> np.ndarray:
        w = np.asarray(self.op.C.sum(axis=1)).ravel()
        return w / w.sum()

    def observation_set(self, source: int, size: int | None = None) -> np.ndarray:
        """Indices of the ``size`` largest entries of the true solution (default N_h // 2), ascending."""
        size = self.mesh.N // 2 if size is None else int(size)
        p = self.forward_map(source)
        order = np.lexsort((np.arange(len(p)), -p))
        return np.sort(order[:size])

    def make_data(self, source: int, obs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        clean = self.solutions[obs, source]
        return clean + self.sigma_eta * rng.standard_normal(len(obs))

    def log_posterior(self, obs: np.ndarray, data: np.ndarray, sigma: float | None = None) -> np.ndarray:
        """LP at every node; ``sigma`` overrides the likelihood scale (needed when sigma_eta = 0)."""
        sigma = self.sigma_eta if sigma is None else float(sigma)
        if not sigma > 0:
            raise ValueError("log-posterior needs a positive likelihood scale")
        G = self.solutions[obs, :]
        misfit = np.sum((data[:, None] - G) ** 2, axis=0)
        return -misfit / (2.0 * sigma**2) + np.log(self.prior)

    def objective(self, source: int, rng: np.random.Generator, normalize: bool = False,
                  sigma: float | None = None) -> InverseProblemObjective:
        obs = self.observation_set(source)
        data = self.make_data(source, obs, rng)
        return InverseProblemObjective(self, source, obs, data, normalize, sigma)


class InverseProblemObjective(Objective):
    """LP over the mesh nodes for one synthetic data set."""

    def __init__(self, problem: InverseProblem, source: int, obs: np.ndarray, data: np.ndarray,
                 normalize: bool = False, sigma: float | None = None):
        self.problem = problem
        self.mesh = problem.mesh
        self.source = int(source)
        self.obs = np.asarray(obs, dtype=int)
        self.data = np.asarray(data, dtype=float)
        lp = problem.log_posterior(self.obs, self.data, sigma)
        self.raw = lp
        self.scale = float(np.max(np.abs(lp))) if normalize else 1.0
        self.values = lp / self.scale

    def __repr__(self) -> str:
        return f"InverseProblemObjective(source={self.source}, N_obs={len(self.obs)})"

    def data_csv(self) -> str:
        lines = ["node_id,value"] + [f"{i},{v:.17g}" for i, v in zip(self.obs, self.data)]
        return "\n".join(lines) + "\n"


def forward_map(ip: InverseProblem, j: int) -> np.ndarray:
    return ip.forward_map(j)


def log_posterior(ip: InverseProblemObjective, i: int) -> float:
    return float(ip.raw[i])


def make_data(ip: InverseProblem, source: int, rng: np.random.Generator) -> np.ndarray:
    return ip.make_data(source, ip.observation_set(source), rng)


def load_anchors(path: str | Path, graph: MetricGraph, kind: str) -> AnchorField:
    """Read the ``anchors`` block of a fixture file for one benchmark kind."""
    with open(path, encoding="utf-8") as fh:
        doc = json.load(fh)
    try:
        table = doc["anchors"][kind.lower()]
    except KeyError:
        raise GraphError(f"fixture {path} has no anchors for {kind!r}") from None
    ids = {str(v): v for v in graph.vertex_ids}
    return AnchorField(graph, {ids.get(str(k), k): float(v) for k, v in table.items()})
