"""Covariance models on metric graphs.

SPDE kernels are stored in precision form: the prior covariance over the FEM
coefficients is ``tau^-2 T Qt^-1 T^T`` with ``Qt`` sparse and ``T`` either the
identity (half-integer smoothness) or the numerator polynomial ``P_r`` of a
rational approximation.  Covariance products are evaluated with a chain of
well-conditioned solves against ``kappa^2 C + G``; the assembled ``Qt`` is
what the sparse posterior formulas factorize.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .fem import FemOperator, SpectralDecomposition, basis_matrix
from .metric_graph import GraphError, GraphPoint, Mesh
from .rational import best_rational_power

JITTER = 1e-10
SAMPLE_DENSE_LIMIT = 4000


class Kernel:
    """Common interface: covariance between lists of graph points."""

    mesh: Mesh

    def cov(self, xs: Sequence[GraphPoint], ys: Sequence[GraphPoint] | None = None) -> np.ndarray:
        raise NotImplementedError

    def gram(self, A: Sequence[GraphPoint]) -> np.ndarray:
        if len(A) == 0:
            raise ValueError("gram needs a nonempty point set")
        K = self.cov(A)
        return 0.5 * (K + K.T)

    def node_cov(self) -> np.ndarray:
        """Covariance matrix over all mesh nodes."""
        return self.gram(self.mesh.nodes)

    def cross_nodes(self, X: Sequence[GraphPoint]) -> np.ndarray:
        """cov(Z_h, X), shape ``(N_h, len(X))``."""
        return self.cov(self.mesh.nodes, X)

    def diag_nodes(self) -> np.ndarray:
        return np.diag(self.node_cov()).copy()


def gram(kernel: Kernel, A: Sequence[GraphPoint]) -> np.ndarray:
    return kernel.gram(A)


@dataclass(frozen=True)
class PrecisionChain:
    """Effective precision ``scale * M G_1 G_2 ... G_q`` over FEM coefficients.

    ``G_j = M^-1 H_j`` for ``mul`` links and ``H_j^-1 M`` for ``solve`` links;
    all ``H_j`` are symmetric sparse with the conditioning of
    ``kappa^2 C + G`` at worst, and the ``G_j`` commute.  The prior
    covariance of the coefficients is ``tau^-2`` times its inverse.  For
    rational kernels this equals ``P_r^-T (P_l^T C P_l) P_r^-1``, so features
    are plain basis vectors and ``P_r`` never has to be formed.
    """

    links: tuple[tuple[sp.csc_matrix, str], ...]
    mass: sp.csc_matrix
    scale: float = 1.0


class SpdeKernel(Kernel):
    """Base for FEM kernels with a sparse precision representation."""

    op: FemOperator
    tau: float
    lumped: bool
    precision: sp.csc_matrix
    transform: sp.csr_matrix | None

    @property
    def mesh(self) -> Mesh:  # type: ignore[override]
        return self.op.mesh

    @cached_property
    def _form_lu(self) -> spla.SuperLU:
        return spla.splu(self.op.stiffness_form(self.lumped))

    def _mass(self, v: np.ndarray) -> np.ndarray:
        if self.lumped:
            return v * (self.op.C_lumped if v.ndim == 1 else self.op.C_lumped[:, None])
        return self.op.C @ v

    def _inv_operator(self, v: np.ndarray) -> np.ndarray:
        # (kappa^2 I + C^-1 G)^-1 v = (kappa^2 C + G)^-1 C v
        return self._form_lu.solve(self._mass(v))

    def apply_cov(self, B: np.ndarray) -> np.ndarray:
        """Prior covariance over FEM coefficients applied to ``B``."""
        raise NotImplementedError

    def cov(self, xs, ys=None):
        Ex = basis_matrix(self.mesh, xs)
        Ey = Ex if ys is None else basis_matrix(self.mesh, ys)
        SEy = self.apply_cov(Ey.T.toarray())
        return np.asarray(Ex @ SEy)

    @cached_property
    def _node_cov(self) -> np.ndarray:
        S = self.apply_cov(np.eye(self.op.N))
        return 0.5 * (S + S.T)

    def node_cov(self) -> np.ndarray:
        return self._node_cov

    def cross_nodes(self, X):
        return self.apply_cov(basis_matrix(self.mesh, X).T.toarray())

    def diag_nodes(self) -> np.ndarray:
        return np.diag(self._node_cov).copy()

    def precision_chain(self) -> PrecisionChain:
        raise NotImplementedError

    def solve_precision(self, B: np.ndarray) -> np.ndarray:
        """Qt^{-1} B by direct sparse factorization of the assembled precision."""
        return self._precision_lu.solve(np.asarray(B, dtype=float))

    @cached_property
    def _precision_lu(self) -> spla.SuperLU:
        return spla.splu(self.precision.tocsc())


def _operator_sparse(op: FemOperator, lumped: bool) -> sp.csr_matrix:
    if lumped:
        return op.operator_matrix(True)
    return sp.csr_matrix(op.operator_matrix(False))


class PrecisionKernel(SpdeKernel):
    """FEM Whittle-Matern kernel for ``2*alpha`` integer: ``Q = C (kappa^2 I + C^-1 G)^(2 alpha)``."""

    def __init__(self, op: FemOperator, alpha: float, tau: float = 1.0, lumped: bool = True):
        n = 2 * alpha
        if abs(n - round(n)) > 1e-12 or int(round(n)) not in (1, 2, 3, 4):
            raise ValueError(f"precision kernel needs 2*alpha in {{1,2,3,4}}, got alpha={alpha}")
        if not tau > 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.op = op
        self.alpha = float(alpha)
        self.power = int(round(n))
        self.tau = float(tau)
        self.lumped = lumped
        self.transform = None
        K = op.stiffness_form(lumped)
        A = _operator_sparse(op, lumped)
        Q = K
        for _ in range(self.power - 1):
            Q = Q @ A
        Q = sp.csc_matrix(Q)
        self.precision = ((Q + Q.T) * 0.5).tocsc()

    def __repr__(self) -> str:
        return f"PrecisionKernel(alpha={self.alpha}, kappa={self.op.kappa:.4g}, tau={self.tau}, N={self.op.N})"

    def apply_cov(self, B):
        out = self._form_lu.solve(np.asarray(B, dtype=float))
        for _ in range(self.power - 1):
            out = self._inv_operator(out)
        return out / self.tau**2

    def precision_chain(self) -> PrecisionChain:
        K = self.op.stiffness_form(self.lumped)
        return PrecisionChain(tuple((K, "mul") for _ in range(self.power)), self.op.mass(self.lumped))

    def sample_path(self, rng: np.random.Generator) -> np.ndarray:
        """One prior draw of the nodal values."""
        z = rng.standard_normal(self.op.N)
        if self.power % 2 == 0 and self.lumped:
            # A^{alpha} u = tau^-1 C^{-1/2} z  gives  Cov(u) = tau^-2 Q^-1
            u = z / np.sqrt(self.op.C_lumped) / self.tau
            for _ in range(self.power // 2):
                u = self._inv_operator(u)
            return u
        return _dense_sample(self.node_cov(), z)


def build_precision_kernel(op: FemOperator, alpha: float, tau: float = 1.0, lumped: bool = True) -> PrecisionKernel:
    return PrecisionKernel(op, alpha, tau, lumped)


def estimate_lambda_max(op: FemOperator, steps: int = 50, seed: int = 0) -> float:
    """Largest eigenvalue of kappa^2 I + C_lumped^-1 G by power iteration.

    The operator is similar to the symmetric ``D^-1/2 (kappa^2 C~ + G) D^-1/2``
    so the Rayleigh quotient of that matrix is used.  Power iteration
    approaches the top eigenvalue from below.
    """
    S = _symmetric_operator(op)
    v = np.random.default_rng(seed).standard_normal(op.N)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(steps):
        w = S @ v
        lam = float(v @ w)
        v = w / np.linalg.norm(w)
    return max(lam, float(v @ (S @ v)))


def gershgorin_lambda_max(op: FemOperator) -> float:
    """Upper bound on the spectrum of kappa^2 I + C_lumped^-1 G."""
    S = _symmetric_operator(op)
    return float(np.max(np.asarray(abs(S).sum(axis=1)).ravel()))


def _symmetric_operator(op: FemOperator) -> sp.csr_matrix:
    d = sp.diags(1.0 / np.sqrt(op.C_lumped))
    return (d @ op.stiffness_form(True) @ d).tocsr()


def spectrum_interval(op: FemOperator) -> tuple[float, float]:
    """[kappa^2, upper] enclosing every discrete eigenvalue.

    The power estimate can fall short of the top eigenvalue, and the rational
    approximant is unreliable outside its interval, so the upper end is the
    larger of the power estimate and the Gershgorin bound.
    """
    return op.kappa**2, max(estimate_lambda_max(op), gershgorin_lambda_max(op))


def _poly_factors(A: sp.csr_matrix, roots: np.ndarray, form: str, N: int) -> list[sp.csr_matrix]:
    eye = sp.identity(N, format="csr")
    if form == "one_minus":  # (I - r A)
        return [(eye - r * A).tocsr() for r in roots]
    return [(A - r * eye).tocsr() for r in roots]  # (A - r I)


class RationalKernel(SpdeKernel):
    """Rational FEM kernel for fractional ``alpha`` (``2*alpha`` not an integer).

    ``s_h(1/lambda) = p_r(lambda) / p_l(lambda)`` approximates ``lambda^-alpha``;
    the kernel weights the discrete eigenpairs by ``s_h(1/lambda)^2``.
    """

    def __init__(self, op: FemOperator, alpha: float, tau: float = 1.0, m: int = 2,
                 lumped: bool = True, lambda_max: float | None = None, tol: float = 1e-12,
                 max_iter: int = 100):
        if abs(2 * alpha - round(2 * alpha)) < 1e-12:
            raise ValueError(f"use PrecisionKernel for half-integer alpha={alpha}")
        if not alpha > 0.5:
            raise ValueError(f"rational kernel needs alpha > 1/2, got {alpha}")
        if m < 1:
            raise ValueError(f"approximation order must be >= 1, got {m}")
        self.op = op
        self.alpha = float(alpha)
        self.tau = float(tau)
        self.m = int(m)
        self.lumped = lumped
        self.m_alpha = max(1, math.floor(alpha))
        lam_min = op.kappa**2
        lam_max = spectrum_interval(op)[1] if lambda_max is None else float(lambda_max)
        if not lam_max > lam_min:
            raise ValueError(f"degenerate spectrum estimate [{lam_min}, {lam_max}]")
        self.lambda_range = (lam_min, lam_max)
        gamma = abs(self.alpha - self.m_alpha)
        if self.alpha > self.m_alpha:
            self.branch = "interval"
            self.approximant = best_rational_power(gamma, (1.0 / lam_max, 1.0 / lam_min), m, tol, max_iter)
            r = self.approximant
            # s(1/lam) = lam^-m_alpha * gain * prod(1 - z_k lam) / prod(1 - p_k lam)
            self._num = ("one_minus", r.zeros, r.gain)
            self._den = ("one_minus", r.poles, 1.0)
        else:
            self.branch = "unit"
            self.approximant = best_rational_power(gamma, (0.0, 1.0), m, tol, max_iter)
            r = self.approximant
            # s(1/lam) = lam^-m_alpha * lam_max^gamma * gain * prod(lam - lam_max z_k) / prod(lam - lam_max p_k)
            self._num = ("minus", lam_max * r.zeros, lam_max**gamma * r.gain)
            self._den = ("minus", lam_max * r.poles, 1.0)
        # Each numerator/denominator factor pair is divided by a common
        # constant so that every factor has smallest eigenvalue of order one;
        # this leaves p_r / p_l unchanged but keeps the products well scaled.
        self._scales = _factor_scales(self._den[1], self._den[0], lam_min)
        N = op.N
        A = _operator_sparse(op, lumped)
        num_factors = [F / d for F, d in zip(_poly_factors(A, self._num[1], self._num[0], N), self._scales)]
        den_factors = [F / d for F, d in zip(_poly_factors(A, self._den[1], self._den[0], N), self._scales)]
        Pr = sp.identity(N, format="csr") * self._num[2]
        for F in num_factors:
            Pr = Pr @ F
        Pl = sp.identity(N, format="csr")
        for F in den_factors + [A / lam_min] * self.m_alpha:
            Pl = Pl @ F
        # P_l carries an extra lam_min^-m_alpha; absorbed into P_r
        self.P_r = sp.csr_matrix(Pr) / lam_min**self.m_alpha
        self.P_l = sp.csr_matrix(Pl)
        self.transform = self.P_r
        Ct = op.mass(lumped)
        Qt = sp.csc_matrix(self.P_l.T @ Ct @ self.P_l)
        self.precision = ((Qt + Qt.T) * 0.5).tocsc()
        # P_l = prod_j M^-1 H_j with symmetric H_j
        M = op.mass(lumped)
        K = op.stiffness_form(lumped)
        self._chain = [_form_factor(M, K, r, self._den[0]) / d for r, d in zip(self._den[1], self._scales)]
        self._num_chain = [_form_factor(M, K, r, self._num[0]) / d for r, d in zip(self._num[1], self._scales)]
        # factor-wise solves for the covariance chain
        self._den_lus = [spla.splu(H) for H in self._chain]
        self._num_factors = num_factors
        self._lam_min = lam_min

    def __repr__(self) -> str:
        return (f"RationalKernel(alpha={self.alpha}, m={self.m}, kappa={self.op.kappa:.4g}, "
                f"tau={self.tau}, N={self.op.N})")

    @property
    def degrees(self) -> tuple[int, int]:
        """(deg p_l, deg p_r)."""
        return len(self._den[1]) + self.m_alpha, len(self._num[1])

    def p_r(self, lam):
        lam = np.asarray(lam, dtype=float)
        form, roots, c = self._num
        return c * _eval_factors(lam, roots, form)

    def p_l(self, lam):
        lam = np.asarray(lam, dtype=float)
        form, roots, _ = self._den
        return _eval_factors(lam, roots, form) * lam**self.m_alpha

    def s_h(self, z):
        """Rational approximation of ``z**alpha`` (evaluated as p_r(1/z) / p_l(1/z))."""
        lam = 1.0 / np.asarray(z, dtype=float)
        return self.p_r(lam) / self.p_l(lam)

    def spectral_weight(self, lam):
        return self.s_h(1.0 / np.asarray(lam, dtype=float)) ** 2

    def _apply_ratio(self, V: np.ndarray) -> np.ndarray:
        """R(A) V with R = p_r / p_l, applied one factor pair at a time."""
        out = V * self._num[2]
        for k, lu in enumerate(self._den_lus):
            out = self._num_factors[k] @ out
            out = lu.solve(self._mass(out))  # scales cancel pairwise
        for _ in range(self.m_alpha):
            out = self._inv_operator(out)
        return out

    def apply_cov(self, B):
        # tau^-2 P_r (P_l^T C P_l)^-1 P_r^T = tau^-2 R(A)^2 C^-1
        B = np.asarray(B, dtype=float)
        V = self.op.solve_mass(B, self.lumped)
        return self._apply_ratio(self._apply_ratio(V)) / self.tau**2

    def precision_chain(self) -> PrecisionChain:
        # C R(A)^-2 with R = p_r / p_l, factor pairs interleaved to keep magnitudes balanced
        pairs = []
        for H_den, H_num in zip(self._chain, self._num_chain):
            pairs += [(H_den, "mul"), (H_num, "solve")]
        K = self.op.stiffness_form(self.lumped) / self._lam_min
        links = tuple(pairs * 2) + ((K, "mul"),) * (2 * self.m_alpha)
        scale = self._lam_min ** (2 * self.m_alpha) / self._num[2] ** 2
        return PrecisionChain(links, self.op.mass(self.lumped), scale)

    def sample_path(self, rng: np.random.Generator) -> np.ndarray:
        z = rng.standard_normal(self.op.N)
        return _dense_sample(self.node_cov(), z)


def _factor_scales(roots: np.ndarray, form: str, lam_min: float) -> np.ndarray:
    """Smallest value of each factor over the spectrum (all factors are positive there)."""
    if form == "one_minus":
        return 1.0 - roots * lam_min
    return lam_min - roots


def _form_factor(M: sp.spmatrix, K: sp.spmatrix, r: float, form: str) -> sp.csc_matrix:
    """M times the operator factor: M (I - r A) = M - r K, M (A - r I) = K - r M."""
    return sp.csc_matrix(M - r * K if form == "one_minus" else K - r * M)


def _eval_factors(lam: np.ndarray, roots: np.ndarray, form: str) -> np.ndarray:
    if form == "one_minus":
        return np.prod(1.0 - roots * lam[..., None], axis=-1)
    return np.prod(lam[..., None] - roots, axis=-1)


def build_rational_kernel(op: FemOperator, alpha: float, tau: float = 1.0, m: int = 2, **kw) -> RationalKernel:
    return RationalKernel(op, alpha, tau, m, **kw)


def build_spde_kernel(op: FemOperator, alpha: float, tau: float = 1.0, m: int = 2, **kw) -> SpdeKernel:
    """Precision kernel for half-integer alpha, rational kernel otherwise."""
    if abs(2 * alpha - round(2 * alpha)) < 1e-12:
        return PrecisionKernel(op, alpha, tau, kw.get("lumped", True))
    return RationalKernel(op, alpha, tau, m, **kw)


class EuclideanMaternKernel(Kernel):
    """Exponential (nu = 1/2 Matern) kernel on embedded straight-line distance."""

    def __init__(self, mesh: Mesh, sigma: float = 1.0, ell: float = 1.0):
        if not (sigma > 0 and ell > 0):
            raise ValueError(f"sigma and ell must be positive, got sigma={sigma}, ell={ell}")
        self.mesh = mesh
        self.sigma = float(sigma)
        self.ell = float(ell)

    def __repr__(self) -> str:
        return f"EuclideanMaternKernel(sigma={self.sigma}, ell={self.ell:.4g})"

    def with_ell(self, ell: float) -> EuclideanMaternKernel:
        return EuclideanMaternKernel(self.mesh, self.sigma, ell)

    def _coords(self, pts: Sequence[GraphPoint]) -> np.ndarray:
        out = np.empty((len(pts), 2))
        for i, p in enumerate(pts):
            k = self.mesh.index_of(p)
            out[i] = self.mesh.coordinates[k] if k is not None else self.mesh.graph.embed(p)
        return out

    def from_coords(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        d = np.sqrt(np.maximum(((a[:, None, :] - b[None, :, :]) ** 2).sum(-1), 0.0))
        return self.sigma**2 * np.exp(-d / self.ell)

    def cov(self, xs, ys=None):
        a = self._coords(xs)
        b = a if ys is None else self._coords(ys)
        return self.from_coords(a, b)

    def node_cov(self) -> np.ndarray:
        c = self.mesh.coordinates
        return self.from_coords(c, c)

    def cross_nodes(self, X):
        return self.from_coords(self.mesh.coordinates, self._coords(X))

    def diag_nodes(self) -> np.ndarray:
        return np.full(self.mesh.N, self.sigma**2)

    def sample_path(self, rng: np.random.Generator) -> np.ndarray:
        return _dense_sample(self.node_cov(), rng.standard_normal(self.mesh.N))


def euclidean_kernel_eval(k: EuclideanMaternKernel, x: GraphPoint, y: GraphPoint) -> float:
    return float(k.cov([x], [y])[0, 0])


class SpectralOracleKernel(Kernel):
    """Truncated eigen-expansion ``tau^-2 sum_i w(lambda_i) psi_i(x) psi_i(x')``.

    Default weight is ``lambda^-2 alpha``; pass ``weight`` to substitute e.g.
    the squared rational approximation.
    """

    def __init__(self, mesh: Mesh, decomp: SpectralDecomposition, alpha: float, tau: float = 1.0,
                 M: int | None = None, weight: Callable[[np.ndarray], np.ndarray] | None = None):
        self.mesh = mesh
        self.decomp = decomp
        self.alpha = float(alpha)
        self.tau = float(tau)
        self.M = len(decomp.eigenvalues) if M is None else int(M)
        if not 1 <= self.M <= len(decomp.eigenvalues):
            raise ValueError(f"truncation M={self.M} out of range")
        lam = decomp.eigenvalues[: self.M]
        self.weights = weight(lam) if weight is not None else lam ** (-2 * self.alpha)

    def cov(self, xs, ys=None):
        V = self.decomp.vectors[:, : self.M]
        Px = basis_matrix(self.mesh, xs) @ V
        Py = Px if ys is None else basis_matrix(self.mesh, ys) @ V
        return (Px * self.weights) @ Py.T / self.tau**2


def _dense_sample(K: np.ndarray, z: np.ndarray) -> np.ndarray:
    if K.shape[0] > SAMPLE_DENSE_LIMIT:
        raise GraphError(f"dense sampling limited to {SAMPLE_DENSE_LIMIT} nodes")
    L = robust_cholesky(K)
    return L @ z


def robust_cholesky(K: np.ndarray, start: float = JITTER, stop: float = 1e-6) -> np.ndarray:
    """Lower Cholesky factor with diagonal jitter escalated from ``start`` to ``stop``."""
    scale = max(float(np.max(np.abs(np.diag(K)))), 1e-300)
    jitter = start
    while True:
        try:
            return sla.cholesky(K + jitter * scale * np.eye(K.shape[0]), lower=True)
        except sla.LinAlgError:
            if jitter >= stop:
                raise
            jitter *= 10.0


def sample_prior_path(kernel: Kernel, seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Prior draw of the field at every mesh node (deterministic given ``seed``)."""
    if not isinstance(kernel, SpdeKernel):
        raise TypeError(f"prior path sampling supports SPDE kernels, got {type(kernel).__name__}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return kernel.sample_path(rng)


def normalize_path(values: np.ndarray) -> np.ndarray:
    """Rescale to [-1, 1] by the maximum absolute value."""
    peak = np.max(np.abs(values))
    return values / peak if peak > 0 else values
