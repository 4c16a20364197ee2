import numpy as np
import pytest

from conftest import single_edge, star
from graphbo.fem import assemble, dense_eigensolve
from graphbo.kernels import EuclideanMaternKernel, SpectralOracleKernel, build_precision_kernel, build_rational_kernel
from graphbo.metric_graph import build_mesh
from graphbo.posterior import (condition, empty_state, info_gain_history, posterior_cov_block, posterior_mean,
                               posterior_var)


def _dense(kernel, X, Y, lam, A):
    """Textbook GP formulas from the Gram matrix."""
    K = kernel.gram(list(X)) + lam * np.eye(len(X))
    kA = kernel.cov(list(A), list(X))
    mu = kA @ np.linalg.solve(K, Y)
    cov = kernel.gram(list(A)) - kA @ np.linalg.solve(K, kA.T)
    return mu, cov


def _history(state, mesh, t, rng):
    idx = rng.choice(mesh.N, t, replace=False)
    for i in idx:
        state = state.condition(mesh.nodes[i], rng.normal())
    return state


@pytest.fixture(scope="module")
def star_op():
    op = assemble(build_mesh(star(), 0.025), 1.5)
    assert 50 <= op.N <= 200
    return op


def _kernels(op):
    return {
        "precision1": build_precision_kernel(op, 1.0, tau=0.7),
        "precision2": build_precision_kernel(op, 2.0),
        "precision_half": build_precision_kernel(op, 0.5),
        "rational": build_rational_kernel(op, 0.75, m=2),
        "rational_big": build_rational_kernel(op, 1.4, m=3),
    }


@pytest.mark.parametrize("name", ["precision1", "precision2", "precision_half", "rational", "rational_big"])
@pytest.mark.parametrize("lam", [1e-2, 1.0, 3.0])
def test_sparse_path_equals_dense(star_op, name, lam):
    k = _kernels(star_op)[name]
    rng = np.random.default_rng(abs(hash((name, lam))) % 2**32)
    s = _history(empty_state(k, lam, "sparse"), star_op.mesh, 20, rng)
    d = s.with_path("dense")
    g = star_op.mesh.graph
    A = [g.point(e, rng.uniform(0, g.edges[e].length)) for e in rng.choice(g.edge_ids, 25)]
    scale = np.abs(k.gram(A)).max()
    assert np.abs(s.mean(A) - d.mean(A)).max() < 1e-8 * max(1.0, np.abs(s.Y).max())
    assert np.abs(s.cov_block(A) - d.cov_block(A)).max() < 1e-8 * scale
    assert np.abs(s.var(A) - d.var(A)).max() < 1e-8 * scale
    assert np.abs(s.node_mean() - d.node_mean()).max() < 1e-8 * max(1.0, np.abs(s.Y).max())
    assert np.abs(s.node_var() - d.node_var()).max() < 1e-8 * scale


def test_precision_mean_matches_dense_formula():
    op = assemble(build_mesh(single_edge(3.0), 3 / 59), 1.0)
    assert op.N == 60
    k = build_precision_kernel(op, 1.0)
    rng = np.random.default_rng(1)
    s = _history(empty_state(k, 0.5), op.mesh, 7, rng)
    mu, cov = _dense(k, s.X, s.Y, 0.5, op.mesh.nodes)
    assert np.abs(s.node_mean() - mu).max() < 1e-8
    assert np.abs(s.node_var() - np.diag(cov)).max() < 1e-8


def test_var_and_cov_block_vs_dense(star_op):
    k = build_precision_kernel(star_op, 1.0)
    rng = np.random.default_rng(2)
    s5 = _history(empty_state(k, 0.3), star_op.mesh, 5, rng)
    A = [star_op.mesh.nodes[i] for i in rng.choice(star_op.N, 10, replace=False)]
    _, cov = _dense(k, s5.X, s5.Y, 0.3, A)
    assert np.abs(s5.var(A) - np.diag(cov)).max() < 1e-8
    s4 = _history(empty_state(k, 0.3), star_op.mesh, 4, rng)
    _, cov4 = _dense(k, s4.X, s4.Y, 0.3, A)
    block = posterior_cov_block(s4, A)
    assert np.abs(block - cov4).max() < 1e-8
    assert np.allclose(np.diag(block), s4.var(A), atol=1e-12)
    assert np.linalg.eigvalsh(block).min() >= -1e-9


@pytest.mark.parametrize("kind", ["euclid", "oracle", "precision"])
def test_empty_history(star_op, kind):
    mesh = star_op.mesh
    k = {"euclid": EuclideanMaternKernel(mesh, 1.2, 0.5),
         "oracle": SpectralOracleKernel(mesh, dense_eigensolve(star_op, lumped=True), 1.0),
         "precision": build_precision_kernel(star_op, 1.0)}[kind]
    s = empty_state(k, 1.0)
    A = mesh.nodes[::7]
    assert np.all(s.mean(A) == 0)
    assert np.allclose(s.var(A), np.diag(k.gram(A)), rtol=1e-10)
    assert np.allclose(s.cov_block(A), k.gram(A), rtol=1e-10, atol=1e-14)
    assert np.allclose(s.node_var(), k.diag_nodes(), rtol=1e-10)
    assert info_gain_history(s) == 0.0
    x = mesh.nodes[3]
    assert posterior_cov_block(s, [x]) == pytest.approx(np.array([[posterior_var(s, x)]]))


def test_zero_observations_give_zero_mean(star_op):
    k = build_precision_kernel(star_op, 1.0)
    s = empty_state(k, 0.1)
    for i in (0, 10, 20):
        s = s.condition(star_op.mesh.nodes[i], 0.0)
    assert np.abs(s.node_mean()).max() < 1e-14


@pytest.mark.parametrize("path", ["dense", "sparse"])
def test_near_interpolation(star_op, path):
    k = build_precision_kernel(star_op, 1.0)
    x = star_op.mesh.nodes[17]
    s = condition(empty_state(k, 1e-6, path), x, 0.42)
    assert posterior_mean(s, x) == pytest.approx(0.42, abs=1e-3)
    assert posterior_var(s, x) < 1e-3 * k.gram([x])[0, 0]


def test_double_observation_halves_noise(open_rect_mesh):
    k = EuclideanMaternKernel(open_rect_mesh, 1.0, 0.7)
    x, z = open_rect_mesh.nodes[5], open_rect_mesh.nodes[40]
    twice = empty_state(k, 1.0).condition(x, 0.8).condition(x, 0.8)
    once = empty_state(k, 0.5).condition(x, 0.8)
    for p in (x, z):
        assert posterior_mean(twice, p) == pytest.approx(posterior_mean(once, p), abs=1e-12)
        assert posterior_var(twice, p) == pytest.approx(posterior_var(once, p), abs=1e-12)


def test_single_observation_scalar_formula(open_rect_mesh):
    k = EuclideanMaternKernel(open_rect_mesh, 1.3, 0.6)
    x1, x = open_rect_mesh.nodes[10], open_rect_mesh.nodes[25]
    s = empty_state(k, 0.2).condition(x1, 1.5)
    kxx1 = k.cov([x], [x1])[0, 0]
    assert posterior_mean(s, x) == pytest.approx(kxx1 * 1.5 / (1.3**2 + 0.2), rel=1e-12)
    assert info_gain_history(s) == pytest.approx(0.5 * np.log(1 + 1.3**2 / 0.2), rel=1e-12)


def test_info_gain_vs_logdet(star_op):
    k = build_precision_kernel(star_op, 1.0)
    rng = np.random.default_rng(4)
    s = _history(empty_state(k, 0.7), star_op.mesh, 6, rng)
    K = k.gram(list(s.X))
    ref = 0.5 * np.linalg.slogdet(np.eye(6) + K / 0.7)[1]
    assert info_gain_history(s) == pytest.approx(ref, abs=1e-9)


def test_monotone_variance_and_info_gain(star_op):
    k = build_precision_kernel(star_op, 1.0)
    rng = np.random.default_rng(6)
    probes = rng.choice(star_op.N, 100, replace=False)
    s = empty_state(k, 0.5)
    v_prev, g_prev = s.node_var()[probes], 0.0
    for _ in range(20):
        s = s.condition(star_op.mesh.nodes[rng.integers(star_op.N)], rng.normal())
        v = s.node_var()[probes]
        assert np.all(v <= v_prev + 1e-10) and np.all(v >= -1e-10)
        g = s.info_gain()
        assert g >= g_prev - 1e-12
        v_prev, g_prev = v, g


@pytest.mark.parametrize("path", ["dense", "sparse"])
def test_permutation_invariance(star_op, path):
    k = build_rational_kernel(star_op, 0.75)
    rng = np.random.default_rng(9)
    idx = rng.choice(star_op.N, 8, replace=False)
    y = rng.normal(size=8)
    perm = rng.permutation(8)
    a, b = empty_state(k, 0.4, path), empty_state(k, 0.4, path)
    for i, v in zip(idx, y):
        a = a.condition(star_op.mesh.nodes[i], v)
    for j in perm:
        b = b.condition(star_op.mesh.nodes[idx[j]], y[j])
    assert np.abs(a.node_mean() - b.node_mean()).max() < 1e-10


def test_state_is_immutable(star_op):
    k = build_precision_kernel(star_op, 1.0)
    s0 = empty_state(k, 1.0)
    s1 = s0.condition(star_op.mesh.nodes[0], 1.0)
    assert s0.t == 0 and s1.t == 1
    assert s1.with_lambda(2.0).lam == 2.0 and s1.lam == 1.0


def test_errors(star_op, open_rect_mesh):
    k = build_precision_kernel(star_op, 1.0)
    with pytest.raises(ValueError):
        empty_state(k, 0.0)
    with pytest.raises(ValueError):
        empty_state(k, 1.0, "magic")
    with pytest.raises(TypeError):
        empty_state(EuclideanMaternKernel(open_rect_mesh, 1.0, 1.0), 1.0, "sparse")
    with pytest.raises(ValueError):
        empty_state(k, 1.0).condition(star_op.mesh.nodes[0], float("nan"))
