import math

import numpy as np
import pytest

from conftest import single_edge, star
from graphbo.experiment import fixture_path
from graphbo.metric_graph import GraphError, build_mesh
from graphbo.objectives import (AnchorField, BenchmarkObjective, InverseProblem, eval_anchor, eval_benchmark,
                                forward_map, g_ackley, g_levy, g_rastrigin, load_anchors, log_posterior, make_data)


def test_benchmark_minima():
    assert eval_benchmark("ackley", 0.0) == pytest.approx(0.0, abs=1e-14)
    assert eval_benchmark("rastrigin", 0.0) == 0.0
    assert eval_benchmark("Levy", 1.0) == pytest.approx(0.0, abs=1e-30)
    with pytest.raises(ValueError):
        eval_benchmark("sphere", 0.0)


def test_benchmark_reference_values():
    # direct textbook evaluation at a few points
    for u in (-3.3, -1.0, 0.25, 2.0, 5.5):
        w = 1 + (u - 1) / 4
        assert g_levy(u) == pytest.approx(math.sin(math.pi * w) ** 2 + (w - 1) ** 2 * (1 + math.sin(2 * math.pi * w) ** 2))
        assert g_rastrigin(u) == pytest.approx(u * u - 10 * math.cos(2 * math.pi * u) + 10)
        assert g_ackley(u) == pytest.approx(-20 * math.exp(-0.2 * abs(u)) - math.exp(math.cos(2 * math.pi * u)) + 20 + math.e)


def test_benchmark_nonnegative():
    u = np.linspace(-6, 6, 100_001)
    for g in (g_ackley, g_rastrigin, g_levy):
        assert g(u).min() >= -1e-12


def test_anchor_interpolation():
    g = single_edge(2.0)
    a = AnchorField(g, {"A": 0.0, "B": 2.0})
    assert eval_anchor(a, g.point("e", 1.0)) == pytest.approx(1.0)
    assert eval_anchor(a, g.vertex_point("A")) == 0.0
    assert eval_anchor(a, g.point("e", 2.0)) == 2.0
    with pytest.raises(GraphError):
        AnchorField(g, {"A": 0.0})


def test_anchor_continuity_at_degree_three():
    g = star()
    a = AnchorField(g, {"c": 0.7, "p": -1.0, "q": 2.0, "r": 0.1})
    assert g.degree("c") == 3
    for eps in (1e-3, 1e-6, 1e-9):
        # "cp" and "cq" start at c, "rc" ends there
        vals = [a(g.point("cp", eps)), a(g.point("cq", eps)), a(g.point("rc", g.edges["rc"].length - eps))]
        assert max(abs(v - 0.7) for v in vals) < 5 * eps


def test_benchmark_continuity_random_pairs(open_rect):
    anchors = load_anchors(fixture_path("open_rectangle"), open_rect, "ackley")
    mesh = build_mesh(open_rect, 0.05)
    obj = BenchmarkObjective("ackley", anchors, mesh)
    rng = np.random.default_rng(0)
    for _ in range(500):
        v = open_rect.vertex_ids[rng.integers(len(open_rect.vertex_ids))]
        inc = open_rect.incident_edges(v)
        if not inc:
            continue
        e1, e2 = inc[rng.integers(len(inc))], inc[rng.integers(len(inc))]
        eps = 10.0 ** rng.uniform(-9, -4)

        def near(e):
            edge = open_rect.edges[e]
            return open_rect.point(e, eps if edge.tail == v else edge.length - eps)

        # slope of -g(a) / scale is bounded, so the jump vanishes linearly with eps
        assert abs(obj.evaluate(near(e1)) - obj.evaluate(near(e2))) < 1e3 * eps


@pytest.mark.parametrize("kind", ["ackley", "rastrigin", "levy"])
def test_benchmark_objective_on_fixture(open_rect, open_rect_mesh, kind):
    anchors = load_anchors(fixture_path("open_rectangle"), open_rect, kind)
    obj = BenchmarkObjective(kind, anchors, open_rect_mesh)
    assert np.abs(obj.values).max() == pytest.approx(1.0)
    assert obj.optimum == pytest.approx(0.0, abs=1e-12)
    x = open_rect_mesh.nodes[obj.argmax]
    assert anchors(x) == pytest.approx(1.0 if kind == "levy" else 0.0, abs=1e-12)
    assert obj(x) == obj.optimum
    with pytest.raises(GraphError):
        obj(open_rect.point("top", 0.01))


def test_missing_anchor_block(open_rect):
    with pytest.raises(GraphError):
        load_anchors(fixture_path("open_rectangle"), open_rect, "griewank")


# -- inverse problem ---------------------------------------------------------------


@pytest.fixture(scope="module")
def telecom_ip(telecom_mesh):
    return InverseProblem(telecom_mesh, chi=0.2, sigma_eta=0.1)


def test_forward_residual(telecom_ip):
    rng = np.random.default_rng(0)
    L = telecom_ip.op.stiffness_form(lumped=False)
    C = telecom_ip.op.C.toarray()
    for j in rng.integers(telecom_ip.mesh.N, size=10):
        p = forward_map(telecom_ip, int(j))
        g = C[:, j]
        assert np.abs(L @ p - g).max() <= 1e-10 * np.abs(g).max()
    with pytest.raises(IndexError):
        telecom_ip.forward_map(telecom_ip.mesh.N)


def test_large_chi_limit():
    ip = InverseProblem(build_mesh(single_edge(), 0.1), chi=100.0)
    # mass term dominates: p solves chi^2 C p ~ C e_j, i.e. the coefficients of the tent e_j over chi^2
    for j in range(ip.mesh.N):
        ref = np.eye(ip.mesh.N)[j] / 100.0**2
        assert np.abs(ip.forward_map(j) - ref).max() <= 0.1 * np.abs(ref).max()


def test_prior_normalized_and_proportional_to_cell_length(telecom_ip):
    pi = telecom_ip.prior
    assert abs(pi.sum() - 1) < 1e-12 and pi.min() > 0
    mesh = build_mesh(single_edge(3.0), 0.1)
    prior = InverseProblem(mesh).prior
    interior = [i for i, p in enumerate(mesh.nodes) if 0 < p.s < 3.0]
    ratio = prior[interior] / (2 * mesh.h_e("e") / 2)
    assert np.ptp(ratio) < 1e-10 * ratio.mean()
    ends = [i for i, p in enumerate(mesh.nodes) if p.s in (0.0, 3.0)]
    assert np.allclose(prior[ends], prior[interior[0]] / 2, rtol=1e-12)


def test_observation_set(telecom_ip):
    obs = telecom_ip.observation_set(173)
    assert len(obs) == telecom_ip.mesh.N // 2
    p = telecom_ip.forward_map(173)
    assert 173 in obs and p[obs].min() >= np.delete(p, obs).max()


def test_zero_noise_argmax_is_source_everywhere(telecom_ip):
    for j in range(telecom_ip.mesh.N):
        obs = telecom_ip.observation_set(j)
        data = telecom_ip.solutions[obs, j]
        lp = telecom_ip.log_posterior(obs, data, sigma=0.1)
        assert int(np.argmax(lp)) == j


def test_small_fixture_zero_noise_argmax():
    ip = InverseProblem(build_mesh(star(), 0.05), chi=0.2, sigma_eta=0.0)
    for j in range(ip.mesh.N):
        obj = ip.objective(j, np.random.default_rng(j), sigma=0.1)
        assert obj.argmax == j
        assert np.array_equal(obj.data, ip.solutions[obj.obs, j])


def test_identical_forward_values_differ_by_prior():
    ip = InverseProblem(build_mesh(single_edge(), 0.1), chi=0.5, sigma_eta=0.1)
    obs = np.array([], dtype=int)
    lp = ip.log_posterior(obs, np.zeros(0))
    end, mid = 0, 5
    assert lp[mid] - lp[end] == pytest.approx(math.log(ip.prior[mid] / ip.prior[end]), abs=1e-14)
    # mirror nodes on a symmetric edge share forward values at the midpoint
    mesh = ip.mesh
    centre = [i for i, p in enumerate(mesh.nodes) if abs(p.s - 0.5) < 1e-12]
    i, j = [k for k, p in enumerate(mesh.nodes) if abs(p.s - 0.2) < 1e-12 or abs(p.s - 0.8) < 1e-12]
    lp = ip.log_posterior(np.array(centre), np.array([0.3]))
    assert lp[i] - lp[j] == pytest.approx(math.log(ip.prior[i] / ip.prior[j]), abs=1e-12)


def test_log_posterior_formula(telecom_ip):
    rng = np.random.default_rng(4)
    obj = telecom_ip.objective(50, rng)
    j = 77
    G = telecom_ip.forward_map(j)[obj.obs]
    ref = -np.sum((obj.data - G) ** 2) / (2 * 0.1**2) + math.log(telecom_ip.prior[j])
    assert log_posterior(obj, j) == pytest.approx(ref, rel=1e-12)
    assert np.all(np.isfinite(obj.values))


def test_normalized_objective(telecom_ip):
    obj = telecom_ip.objective(173, np.random.default_rng(0), normalize=True)
    assert np.abs(obj.values).max() == pytest.approx(1.0)
    assert np.argmax(obj.values) == np.argmax(obj.raw)


def test_make_data_reproducible_and_noise_level():
    ip = InverseProblem(build_mesh(single_edge(), 0.05), chi=0.2, sigma_eta=0.1)
    a = make_data(ip, 3, np.random.default_rng(9))
    b = make_data(ip, 3, np.random.default_rng(9))
    assert np.array_equal(a, b)
    obs = ip.observation_set(3)
    clean = ip.solutions[obs, 3]
    rng = np.random.default_rng(10)
    resid = np.concatenate([ip.make_data(3, obs, rng) - clean for _ in range(10_000)])
    assert abs(resid.std() / 0.1 - 1) < 0.02
    silent = InverseProblem(ip.mesh, chi=0.2, sigma_eta=0.0)
    assert np.array_equal(make_data(silent, 3, rng), clean)


def test_data_csv_and_validation(telecom_ip):
    obj = telecom_ip.objective(10, np.random.default_rng(1))
    lines = obj.data_csv().splitlines()
    assert lines[0] == "node_id,value" and len(lines) == len(obj.obs) + 1
    with pytest.raises(ValueError):
        InverseProblem(telecom_ip.mesh, chi=0.0)
    with pytest.raises(ValueError):
        InverseProblem(telecom_ip.mesh, sigma_eta=-1)
    with pytest.raises(ValueError):
        InverseProblem(telecom_ip.mesh, sigma_eta=0.0).log_posterior(obj.obs, obj.data)
