"""IGP-UCB and GP-TS over the mesh nodes of a metric graph."""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import scipy.linalg as sla

from .fem import FemOperator, assemble, basis_matrix
from .kernels import EuclideanMaternKernel, Kernel, build_spde_kernel, robust_cholesky
from .metric_graph import Mesh
from .objectives import Objective
from .posterior import PosteriorState

log = logging.getLogger(__name__)

ALGORITHMS = ("UCB", "TS")
DEFAULT_T = {"UCB": 40, "TS": 60}


@dataclass(frozen=True)
class BoConfig:
    algorithm: str = "UCB"
    B: float = 1.0
    R: float = 0.05
    b: float = 0.0
    delta: float = 0.05
    lam_mode: str = "schedule"  # "schedule": 1 + 2/t, "fixed": noise_std^2 + nugget
    noise_std: float = 0.05
    T: int | None = None
    N_init: int = 8
    seed: int = 0
    mle: bool = True
    mle_every: int = 1
    nugget: float = 0.0
    stop_tol: float | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"algorithm must be one of {ALGORITHMS}, got {self.algorithm!r}")
        if not 0 < self.delta < 1:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if min(self.B, self.R, self.b) < 0:
            raise ValueError("B, R and b must be nonnegative")
        if self.N_init < 0 or self.horizon < 0:
            raise ValueError("N_init and T must be nonnegative")
        if self.lam_mode not in ("schedule", "fixed"):
            raise ValueError(f"unknown lam_mode {self.lam_mode!r}")
        if self.lam_mode == "fixed" and not self.noise_std**2 + self.nugget > 0:
            raise ValueError("fixed lam mode needs noise_std or nugget > 0")
        if self.mle_every < 1:
            raise ValueError("mle_every must be >= 1")

    @property
    def horizon(self) -> int:
        return DEFAULT_T[self.algorithm] if self.T is None else int(self.T)

    def lam(self, t: int) -> float:
        if self.lam_mode == "schedule":
            return 1.0 + 2.0 / t
        return self.noise_std**2 + self.nugget


def schedule_beta_v(t: int, N_init: int, config: BoConfig, gamma_hat: float, lam: float | None = None) -> tuple[float, float]:
    """Confidence widths (beta_t, v_t) for UCB and TS.

    A negative radicand (possible when lam < 1) is clamped at zero.
    """
    if t < 1:
        raise ValueError(f"round index must be >= 1, got {t}")
    lam = config.lam(t) if lam is None else lam
    n = N_init + t
    base = gamma_hat + n * (lam - 1.0) / 2.0
    corr = config.b * math.sqrt(n - 1) / math.sqrt(1.0 + 2.0 / n)
    beta = config.B + config.R * math.sqrt(max(2.0 * (base + math.log(1.0 / config.delta)), 0.0)) + corr
    v = config.B + config.R * math.sqrt(max(2.0 * (base + math.log(2.0 / config.delta)), 0.0)) + corr
    return beta, v


def _argmax(values: np.ndarray, rtol: float = 1e-12) -> int:
    """Lowest index among values within round-off of the maximum."""
    top = float(np.max(values))
    return int(np.flatnonzero(values >= top - rtol * max(abs(top), 1.0))[0])


def acquire_ucb(state: PosteriorState, beta: float) -> tuple[int, float]:
    """Node index maximizing mu + beta * sigma, and the maximal value."""
    acq = state.node_mean() + beta * state.node_std()
    k = _argmax(acq)
    return k, float(acq[k])


def acquire_ts(state: PosteriorState, v: float, rng: np.random.Generator) -> tuple[int, float]:
    """Node index maximizing one joint posterior draw with covariance v^2 k_{t-1}."""
    mu = state.node_mean()
    z = rng.standard_normal(len(mu))
    if v == 0.0:
        sample = mu
    else:
        L = robust_cholesky(v**2 * state.node_cov())
        sample = mu + L @ z
    k = _argmax(sample)
    return k, float(sample[k])


def maximin_design(mesh: Mesh, N_init: int, rng: np.random.Generator) -> list[int]:
    """Farthest-first node indices under shortest-path distance; first node uniform at random."""
    if N_init > mesh.N:
        raise ValueError(f"N_init={N_init} exceeds N_h={mesh.N}")
    if N_init <= 0:
        return []
    D = mesh.distance_matrix
    chosen = [int(rng.integers(mesh.N))]
    dmin = D[chosen[0]].copy()
    for _ in range(N_init - 1):
        k = _argmax(dmin)
        chosen.append(k)
        dmin = np.minimum(dmin, D[k])
    return chosen


# -- kernel families -----------------------------------------------------------


class KernelFamily:
    """Kernel with one lengthscale-type hyperparameter theta."""

    name: str
    mesh: Mesh

    def build(self, theta: float) -> Kernel:
        raise NotImplementedError

    def initial_theta(self) -> float:
        raise NotImplementedError

    def gram_fn(self, idx: Sequence[int]):
        """theta -> Gram matrix over the given nodes."""
        raise NotImplementedError


class SpdeFamily(KernelFamily):
    """Whittle-Matern FEM kernel; theta is kappa."""

    def __init__(self, mesh: Mesh, alpha: float = 1.0, tau: float = 1.0, m: int = 2, lumped: bool = True,
                 op: FemOperator | None = None):
        self.name = "SPDE"
        self.mesh = mesh
        self.alpha = alpha
        self.tau = tau
        self.m = m
        self.lumped = lumped
        self.op = assemble(mesh, 1.0) if op is None else op

    def build(self, theta: float) -> Kernel:
        return build_spde_kernel(self.op.with_kappa(theta), self.alpha, self.tau, self.m, lumped=self.lumped)

    def initial_theta(self) -> float:
        return 1.0 / (0.25 * self.mesh.graph.diameter())

    def gram_fn(self, idx):
        E = basis_matrix(self.mesh, [self.mesh.nodes[i] for i in idx])
        Et = E.T.toarray()

        def gram(theta):
            k = self.build(theta)
            K = E @ k.apply_cov(Et)
            return 0.5 * (K + K.T)

        return gram


class EuclideanFamily(KernelFamily):
    """Exponential kernel on straight-line distance; theta is ell."""

    def __init__(self, mesh: Mesh, sigma: float = 1.0):
        self.name = "Euclidean"
        self.mesh = mesh
        self.sigma = sigma

    def build(self, theta: float) -> Kernel:
        return EuclideanMaternKernel(self.mesh, self.sigma, theta)

    def initial_theta(self) -> float:
        return 0.25 * self.mesh.graph.diameter()

    def gram_fn(self, idx):
        c = self.mesh.coordinates[np.asarray(idx, dtype=int)]
        D = np.sqrt(((c[:, None, :] - c[None, :, :]) ** 2).sum(-1))
        return lambda theta: self.sigma**2 * np.exp(-D / theta)


def neg_log_marginal(K: np.ndarray, y: np.ndarray, noise_var: float) -> float:
    """0.5 y^T (K + s^2 I)^-1 y + 0.5 log|K + s^2 I|; inf when not positive definite."""
    try:
        L = sla.cholesky(K + noise_var * np.eye(len(y)), lower=True)
    except sla.LinAlgError:
        return math.inf
    a = sla.solve_triangular(L, y, lower=True)
    return float(0.5 * a @ a + np.sum(np.log(np.diag(L))))


def mle_update(idx: Sequence[int], y: np.ndarray, family: KernelFamily, theta_prev: float,
               noise_std: float, nugget: float = 0.0, bounds: tuple[float, float] | None = None,
               points: int = 25, decades: float = 2.0) -> float:
    """Two-level log-grid minimization of the negative log marginal likelihood around theta_prev."""
    if len(idx) == 0:
        raise ValueError("MLE needs a nonempty history")
    y = np.asarray(y, dtype=float)
    gram = family.gram_fn(idx)
    s2 = noise_std**2 + nugget
    lo, hi = bounds if bounds is not None else (0.0, math.inf)

    def scan(grid):
        grid = np.clip(grid, lo, hi) if bounds is not None else grid
        vals = np.array([neg_log_marginal(gram(th), y, s2) for th in grid])
        return grid, vals

    grid, vals = scan(theta_prev * np.logspace(-decades, decades, points))
    if not np.isfinite(vals).any():
        # retry with a jitter nugget before giving up
        s2 = s2 + 1e-8
        grid, vals = scan(grid)
        if not np.isfinite(vals).any():
            raise ArithmeticError("no candidate hyperparameter gives a positive-definite Gram matrix")
    k = int(np.argmin(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, len(grid) - 1)]
    fine, fvals = scan(np.geomspace(a, b, points))
    j = int(np.argmin(fvals))
    return float(fine[j]) if fvals[j] < vals[k] else float(grid[k])


# -- run record ------------------------------------------------------------------


@dataclass
class RunRecord:
    """Per-step trace of one BO run; rows with t = 0 are the initial design."""

    t: list[int] = field(default_factory=list)
    node: list[int] = field(default_factory=list)
    acq: list[float] = field(default_factory=list)
    y: list[float] = field(default_factory=list)
    incumbent: list[float] = field(default_factory=list)
    regret: list[float] = field(default_factory=list)
    theta: list[float] = field(default_factory=list)
    wall_clock: float = 0.0
    family: str = ""

    def append(self, t, node, acq, y, incumbent, regret, theta):
        self.t.append(int(t))
        self.node.append(int(node))
        self.acq.append(float(acq))
        self.y.append(float(y))
        self.incumbent.append(float(incumbent))
        self.regret.append(float(regret))
        self.theta.append(float(theta))

    @property
    def initial_nodes(self) -> list[int]:
        return [n for t, n in zip(self.t, self.node) if t == 0]

    @property
    def initial_regret(self) -> float:
        r = [r for t, r in zip(self.t, self.regret) if t == 0]
        return r[-1] if r else math.inf

    def regrets(self, T: int | None = None) -> np.ndarray:
        """r_1..r_T; rounds skipped by early stopping carry the last regret forward."""
        out = [r for t, r in zip(self.t, self.regret) if t > 0]
        T = len(out) if T is None else T
        if not out:
            return np.full(T, self.initial_regret)
        out = out[:T]
        return np.array(out + [out[-1]] * (T - len(out)))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t", "node_id", "acq_value", "y", "incumbent", "regret", "theta"])
        for row in zip(self.t, self.node, self.acq, self.y, self.incumbent, self.regret, self.theta):
            t, n, a, y, inc, r, th = row
            w.writerow([t, n, "" if math.isnan(a) else repr(a), repr(y), repr(inc), repr(r), repr(th)])
        return buf.getvalue()


def run(objective: Objective, family: KernelFamily, config: BoConfig,
        design: Sequence[int] | None = None, initial_y: Sequence[float] | None = None,
        rng: np.random.Generator | None = None) -> RunRecord:
    """One BO run over the nodes of ``family.mesh``.

    ``design``/``initial_y`` let several kernel families share the same
    initial design and initial observations.
    """
    t0 = time.perf_counter()
    mesh = family.mesh
    rng = np.random.default_rng(config.seed) if rng is None else rng
    if design is None:
        design = maximin_design(mesh, config.N_init, rng)
    design = [int(i) for i in design]
    f = objective.values
    fstar = float(f.max())
    if initial_y is None:
        initial_y = [f[i] + config.noise_std * rng.standard_normal() for i in design]
    idx = list(design)
    ys = [float(v) for v in initial_y]
    theta = family.initial_theta()
    rec = RunRecord(family=family.name)
    best = -math.inf
    for i, y in zip(idx, ys):
        best = max(best, f[i])
        rec.append(0, i, math.nan, y, best, fstar - best, theta)
    bounds = (theta * 1e-3, theta * 1e3)
    for t in range(1, config.horizon + 1):
        if config.stop_tol is not None and idx and fstar - best <= config.stop_tol:
            break
        if config.mle and idx and (t - 1) % config.mle_every == 0:
            theta = mle_update(idx, np.array(ys), family, theta, config.noise_std, config.nugget, bounds)
        lam = config.lam(t)
        state = PosteriorState(family.build(theta), lam, tuple(mesh.nodes[i] for i in idx), np.array(ys))
        gamma_hat = state.info_gain()
        beta, v = schedule_beta_v(t, config.N_init, config, gamma_hat, lam)
        if config.algorithm == "UCB":
            k, acq = acquire_ucb(state, beta)
        else:
            k, acq = acquire_ts(state, v, rng)
        y = float(f[k] + config.noise_std * rng.standard_normal()) if config.noise_std > 0 else float(f[k])
        idx.append(k)
        ys.append(y)
        best = max(best, f[k])
        rec.append(t, k, acq, y, best, fstar - best, theta)
    rec.wall_clock = time.perf_counter() - t0
    log.debug("%s run: %d rounds, final regret %.3g, %.2fs", family.name, len(rec.t) - len(design),
              rec.regret[-1] if rec.regret else math.nan, rec.wall_clock)
    return rec
