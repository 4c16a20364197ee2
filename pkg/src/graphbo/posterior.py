"""Sequential GP conditioning on metric graphs.

Two evaluation paths are implemented.  The dense path factorizes the
history Gram matrix ``K_X + lam I``.  The sparse path (SPDE kernels only)
works with ``M = tau^2 lam Qeff + E E^T`` where ``E`` holds the basis vectors
of the history; mean is ``e(x)^T M^-1 E Y`` and covariance is
``lam e(x)^T M^-1 e(x')``.  ``Qeff`` is the precision of the FEM
coefficients: ``Q`` for half-integer smoothness and ``P_r^-T P_l^T C P_l P_r^-1``
for rational kernels, which gives the same posterior as the ``P_r``-weighted form.

``M`` is never factorized directly: ``Qeff`` squares (or worse) the condition
number of ``kappa^2 C + G``.  Instead its factor chain is unrolled into a
block system with one auxiliary unknown per factor, whose conditioning is
that of the individual factors.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import basis_matrix
from .kernels import Kernel, PrecisionChain, SpdeKernel
from .metric_graph import GraphPoint

PATHS = ("auto", "dense", "sparse")


def _augmented_system(chain: PrecisionChain, s: float, EtE: sp.spmatrix) -> sp.csc_matrix:
    """Block matrix whose leading block solve equals ``(s * Qeff + EtE)^-1``.

    Unknowns are ``w_0 = x`` and ``w_j = G_j w_{j-1}``; the first block row
    reads ``EtE w_0 + s * scale * M w_q = b``.  A trailing ``mul`` link is
    folded into that row.
    """
    links = list(chain.links)
    Cm = chain.mass
    s = s * chain.scale
    N = Cm.shape[0]
    tail = None
    if links and links[-1][1] == "mul":
        tail = links.pop()[0]
    q = len(links)
    if q == 0:
        return sp.csc_matrix(EtE + s * (tail if tail is not None else Cm))
    blocks: list[list[sp.spmatrix | None]] = [[None] * (q + 1) for _ in range(q + 1)]
    blocks[0][0] = EtE if EtE.nnz else sp.csr_matrix((N, N))
    blocks[0][q] = s * (tail if tail is not None else Cm)
    for j, (H, kind) in enumerate(links, start=1):
        if kind == "mul":  # M w_j = H w_{j-1}
            blocks[j][j - 1], blocks[j][j] = -H, Cm
        else:  # H w_j = M w_{j-1}
            blocks[j][j - 1], blocks[j][j] = -Cm, H
    return sp.bmat(blocks, format="csc")


@dataclass(frozen=True, eq=False)
class PosteriorState:
    """GP posterior given history ``(X, Y)``; a value object.

    ``lam`` is the regularization in ``(K + lam I)``.  ``path`` selects the
    solver: ``sparse`` needs an SPDE kernel, ``auto`` picks sparse when the
    kernel supports it.
    """

    kernel: Kernel
    lam: float
    X: tuple[GraphPoint, ...] = ()
    Y: np.ndarray = field(default_factory=lambda: np.zeros(0))
    path: str = "auto"

    def __post_init__(self):
        if not self.lam > 0:
            raise ValueError(f"regularization lam must be positive, got {self.lam}")
        if self.path not in PATHS:
            raise ValueError(f"unknown path {self.path!r}")
        if self.path == "sparse" and not isinstance(self.kernel, SpdeKernel):
            raise TypeError("sparse path requires an SPDE kernel")
        Y = np.asarray(self.Y, dtype=float).reshape(-1)
        if len(Y) != len(self.X):
            raise ValueError(f"{len(self.X)} points but {len(Y)} observations")
        object.__setattr__(self, "X", tuple(self.X))
        object.__setattr__(self, "Y", Y)

    # -- construction -------------------------------------------------------

    @property
    def t(self) -> int:
        return len(self.X)

    @property
    def sparse(self) -> bool:
        return self.path == "sparse" or (self.path == "auto" and isinstance(self.kernel, SpdeKernel))

    def condition(self, x: GraphPoint, y: float) -> PosteriorState:
        y = float(y)
        if not np.isfinite(y):
            raise ValueError(f"non-finite observation {y}")
        self.kernel.mesh.graph.check_point(x)
        return replace(self, X=self.X + (x,), Y=np.append(self.Y, y))

    def with_lambda(self, lam: float) -> PosteriorState:
        return replace(self, lam=float(lam))

    def with_kernel(self, kernel: Kernel) -> PosteriorState:
        return replace(self, kernel=kernel)

    def with_path(self, path: str) -> PosteriorState:
        return replace(self, path=path)

    # -- dense path ---------------------------------------------------------

    @cached_property
    def _gram(self) -> np.ndarray:
        return self.kernel.gram(self.X)

    @cached_property
    def _chol(self) -> np.ndarray:
        return sla.cholesky(self._gram + self.lam * np.eye(self.t), lower=True)

    @cached_property
    def _weights(self) -> np.ndarray:
        return sla.cho_solve((self._chol, True), self.Y)

    def _dense_mean_cov(self, kA: np.ndarray, kB: np.ndarray | None, prior: np.ndarray | None, diag_only: bool):
        mean = kA @ self._weights
        VA = sla.solve_triangular(self._chol, kA.T, lower=True)
        if diag_only:
            return mean, prior - np.sum(VA**2, axis=0)
        VB = VA if kB is None else sla.solve_triangular(self._chol, kB.T, lower=True)
        return mean, prior - VA.T @ VB

    # -- sparse path --------------------------------------------------------

    @cached_property
    def _features(self) -> sp.csr_matrix:
        """Rows ``e(x_i)^T`` for the history, shape ``t x N``."""
        if self.t == 0:
            return sp.csr_matrix((0, self.kernel.mesh.N))
        return basis_matrix(self.kernel.mesh, self.X)

    @cached_property
    def _system(self) -> tuple[sp.csc_matrix, spla.SuperLU, int]:
        k: SpdeKernel = self.kernel  # type: ignore[assignment]
        F = self._features
        A = _augmented_system(k.precision_chain(), k.tau**2 * self.lam, sp.csr_matrix(F.T @ F))
        return A, spla.splu(A), k.op.N

    def _solve_M(self, B: np.ndarray, refine: int = 2) -> np.ndarray:
        A, lu, N = self._system
        B = np.asarray(B, dtype=float)
        rhs = np.zeros((lu.shape[0],) + B.shape[1:])
        rhs[:N] = B
        x = lu.solve(rhs)
        # iterative refinement: the rational chains can lose a few digits in the LU solve
        for _ in range(refine):
            x += lu.solve(rhs - A @ x)
        return x[:N]

    @cached_property
    def _sparse_rhs(self) -> np.ndarray:
        return self._solve_M(self._features.T @ self.Y)

    def _probe_features(self, A: Sequence[GraphPoint]) -> sp.csr_matrix:
        return basis_matrix(self.kernel.mesh, A)

    # -- public evaluation --------------------------------------------------

    def mean(self, A: Sequence[GraphPoint]) -> np.ndarray:
        if self.t == 0:
            return np.zeros(len(A))
        if self.sparse:
            return np.asarray(self._probe_features(A) @ self._sparse_rhs)
        return self.kernel.cov(A, self.X) @ self._weights

    def cov_block(self, A: Sequence[GraphPoint], B: Sequence[GraphPoint] | None = None) -> np.ndarray:
        if len(A) == 0:
            raise ValueError("covariance block needs a nonempty point set")
        if self.sparse:
            FA = self._probe_features(A)
            FB = FA if B is None else self._probe_features(B)
            out = self.lam * np.asarray(FA @ self._solve_M(FB.T.toarray()))
        elif self.t == 0:
            out = self.kernel.cov(A, B)
        else:
            kA = self.kernel.cov(A, self.X)
            kB = None if B is None else self.kernel.cov(B, self.X)
            _, out = self._dense_mean_cov(kA, kB, self.kernel.cov(A, B), diag_only=False)
        return 0.5 * (out + out.T) if B is None else out

    def var(self, A: Sequence[GraphPoint]) -> np.ndarray:
        if self.sparse:
            FA = self._probe_features(A)
            Z = self._solve_M(FA.T.toarray())
            return self.lam * np.asarray(FA.multiply(Z.T).sum(axis=1)).ravel()
        prior = np.array([self.kernel.cov([a])[0, 0] for a in A])
        if self.t == 0:
            return prior
        _, v = self._dense_mean_cov(self.kernel.cov(A, self.X), None, prior, diag_only=True)
        return v

    def std(self, A: Sequence[GraphPoint]) -> np.ndarray:
        return np.sqrt(np.maximum(self.var(A), 0.0))

    # -- all mesh nodes ----------------------------------------------------

    @cached_property
    def _node_solve(self) -> np.ndarray:
        return self._solve_M(np.eye(self.kernel.mesh.N))

    @cached_property
    def _node_cross(self) -> np.ndarray:
        return self.kernel.cross_nodes(self.X)

    def node_mean(self) -> np.ndarray:
        if self.t == 0:
            return np.zeros(self.kernel.mesh.N)
        if self.sparse:
            return self._sparse_rhs.copy()
        return self._node_cross @ self._weights

    def node_var(self) -> np.ndarray:
        if self.sparse:
            return self.lam * np.diag(self._node_solve).copy()
        prior = self.kernel.diag_nodes()
        if self.t == 0:
            return prior
        return self._dense_mean_cov(self._node_cross, None, prior, diag_only=True)[1]

    def node_std(self) -> np.ndarray:
        return np.sqrt(np.maximum(self.node_var(), 0.0))

    def node_cov(self) -> np.ndarray:
        if self.sparse:
            out = self.lam * self._node_solve
        elif self.t == 0:
            out = self.kernel.node_cov()
        else:
            out = self._dense_mean_cov(self._node_cross, None, self.kernel.node_cov(), diag_only=False)[1]
        return 0.5 * (out + out.T)

    # -- information gain -------------------------------------------------

    def info_gain(self) -> float:
        """0.5 log det(I + K_X / lam) over the realized history."""
        if self.t == 0:
            return 0.0
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return float(0.5 * (logdet - self.t * np.log(self.lam)))


def empty_state(kernel: Kernel, lam: float, path: str = "auto") -> PosteriorState:
    return PosteriorState(kernel, float(lam), (), np.zeros(0), path)


def condition(state: PosteriorState, x: GraphPoint, y: float) -> PosteriorState:
    return state.condition(x, y)


def posterior_mean(state: PosteriorState, x: GraphPoint) -> float:
    return float(state.mean([x])[0])


def posterior_var(state: PosteriorState, x: GraphPoint) -> float:
    return float(state.var([x])[0])


def posterior_cov_block(state: PosteriorState, A: Sequence[GraphPoint]) -> np.ndarray:
    return state.cov_block(A)


def info_gain_history(state: PosteriorState) -> float:
    return state.info_gain()
