import math

import numpy as np
import pytest

from graphbo.experiment import fixture_path
from graphbo.metric_graph import build_graph, build_mesh, load_graph


def single_edge(L=1.0):
    return build_graph({"vertices": [{"id": "A", "x": 0.0, "y": 0.0}, {"id": "B", "x": L, "y": 0.0}],
                        "edges": [{"id": "e", "tail": "A", "head": "B"}]})


def circle(L=2 * math.pi, segments=64):
    r = L / (2 * math.pi)
    # polyline arclength must equal L, so pass the length and a matching inscribed polygon scaled up
    ang = np.linspace(0.0, 2 * math.pi, segments + 1)
    pts = np.c_[r * np.cos(ang), r * np.sin(ang)]
    arc = float(np.sum(np.hypot(*np.diff(pts, axis=0).T)))
    pts *= L / arc
    return build_graph({"vertices": [{"id": "O", "x": float(pts[0, 0]), "y": float(pts[0, 1])}],
                        "edges": [{"id": "loop", "tail": "O", "head": "O", "polyline": pts.tolist()}]})


def triangle():
    s = math.sqrt(3) / 2
    return build_graph({"vertices": [{"id": 0, "x": 0.0, "y": 0.0}, {"id": 1, "x": 1.0, "y": 0.0},
                                     {"id": 2, "x": 0.5, "y": s}],
                        "edges": [{"id": "a", "tail": 0, "head": 1}, {"id": "b", "tail": 1, "head": 2},
                                  {"id": "c", "tail": 2, "head": 0}]})


def star():
    """Degree-3 vertex with three unequal legs."""
    return build_graph({"vertices": [{"id": "c", "x": 0.0, "y": 0.0}, {"id": "p", "x": 1.0, "y": 0.0},
                                     {"id": "q", "x": 0.0, "y": 0.7}, {"id": "r", "x": -1.3, "y": 0.0}],
                        "edges": [{"id": "cp", "tail": "c", "head": "p"}, {"id": "cq", "tail": "c", "head": "q"},
                                  {"id": "rc", "tail": "r", "head": "c"}]})


@pytest.fixture(scope="session")
def open_rect():
    return load_graph(fixture_path("open_rectangle"))


@pytest.fixture(scope="session")
def open_rect_mesh(open_rect):
    return build_mesh(open_rect, 0.05)


@pytest.fixture(scope="session")
def telecom():
    return load_graph(fixture_path("synthetic_telecom"))


@pytest.fixture(scope="session")
def telecom_mesh(telecom):
    return build_mesh(telecom, 0.25)
