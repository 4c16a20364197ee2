"""Linear finite elements for ``kappa^2 - d^2/dz^2`` with standard Kirchhoff coupling."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .metric_graph import GraphError, GraphPoint, Mesh

DENSE_EIG_LIMIT = 4000


def eval_tent_basis(mesh: Mesh, x: GraphPoint) -> sp.csr_matrix:
    """Coefficient row vector e(x) (shape ``1 x N_h``, at most two nonzeros)."""
    return basis_matrix(mesh, [x])


def basis_matrix(mesh: Mesh, points: Sequence[GraphPoint]) -> sp.csr_matrix:
    """Rows are e(x) for each point; i.e. the transpose of E in the posterior formulas."""
    rows, cols, vals = [], [], []
    for r, x in enumerate(points):
        k = mesh.index_of(x)
        if k is not None:
            rows.append(r)
            cols.append(k)
            vals.append(1.0)
            continue
        mesh.graph.check_point(x)
        he = mesh.h_e(x.edge)
        n = mesh.n_e[x.edge]
        j = min(int(x.s // he), n - 1)
        w = x.s / he - j
        ids = mesh.edge_nodes[x.edge]
        for idx, val in ((ids[j], 1.0 - w), (ids[j + 1], w)):
            if val > 0.0:
                rows.append(r)
                cols.append(int(idx))
                vals.append(val)
    return sp.csr_matrix((vals, (rows, cols)), shape=(len(points), mesh.N))


@dataclass(frozen=True)
class FemOperator:
    """Mass ``C``, stiffness ``G`` and lumped mass (as a vector of row sums)."""

    mesh: Mesh
    kappa: float
    C: sp.csc_matrix
    G: sp.csc_matrix
    C_lumped: np.ndarray

    @property
    def N(self) -> int:
        return self.mesh.N

    def mass(self, lumped: bool = True) -> sp.csc_matrix:
        return sp.diags(self.C_lumped).tocsc() if lumped else self.C

    def stiffness_form(self, lumped: bool = True) -> sp.csc_matrix:
        """kappa^2 C + G; the matrix of the bilinear form."""
        return (self.kappa**2 * self.mass(lumped) + self.G).tocsc()

    def operator_matrix(self, lumped: bool = True) -> sp.csr_matrix | np.ndarray:
        """kappa^2 I + C^{-1} G (sparse when lumped, dense otherwise)."""
        if lumped:
            return (self.kappa**2 * sp.identity(self.N) + sp.diags(1.0 / self.C_lumped) @ self.G).tocsr()
        return self.kappa**2 * np.eye(self.N) + self._mass_lu.solve(self.G.toarray())

    @cached_property
    def _mass_lu(self) -> spla.SuperLU:
        return spla.splu(self.C.tocsc())

    def solve_mass(self, v: np.ndarray, lumped: bool = True) -> np.ndarray:
        if lumped:
            d = self.C_lumped if v.ndim == 1 else self.C_lumped[:, None]
            return v / d
        return self._mass_lu.solve(v)

    def with_kappa(self, kappa: float) -> FemOperator:
        if not kappa > 0:
            raise ValueError(f"kappa must be positive, got {kappa}")
        return FemOperator(self.mesh, float(kappa), self.C, self.G, self.C_lumped)

    def dump(self, directory: str | Path) -> None:
        """Write C and G as ``row col value`` text files (1-based indices)."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        for name, mat in (("C", self.C), ("G", self.G)):
            coo = mat.tocoo()
            order = np.lexsort((coo.col, coo.row))
            with open(directory / f"{name}.txt", "w", encoding="utf-8") as fh:
                for k in order:
                    fh.write(f"{coo.row[k] + 1} {coo.col[k] + 1} {coo.data[k]:.17g}\n")


def assemble(mesh: Mesh, kappa: float) -> FemOperator:
    if not kappa > 0:
        raise ValueError(f"kappa must be positive, got {kappa}")
    rows, cols, cvals, gvals = [], [], [], []
    for eid, ids in mesh.edge_nodes.items():
        he = mesh.h_e(eid)
        a, b = ids[:-1], ids[1:]
        # local element matrices, exact for linear elements
        for (p, q, cv, gv) in ((a, a, 2.0, 1.0), (b, b, 2.0, 1.0), (a, b, 1.0, -1.0), (b, a, 1.0, -1.0)):
            rows.append(p)
            cols.append(q)
            cvals.append(np.full(len(p), cv * he / 6.0))
            gvals.append(np.full(len(p), gv / he))
    r = np.concatenate(rows)
    c = np.concatenate(cols)
    N = mesh.N
    C = sp.coo_matrix((np.concatenate(cvals), (r, c)), shape=(N, N)).tocsc()
    G = sp.coo_matrix((np.concatenate(gvals), (r, c)), shape=(N, N)).tocsc()
    C.sum_duplicates()
    G.sum_duplicates()
    lumped = np.asarray(C.sum(axis=1)).ravel()
    return FemOperator(mesh, float(kappa), C, G, lumped)


@dataclass(frozen=True)
class SpectralDecomposition:
    """Eigenpairs of the discrete operator; ``vectors[:, i]`` is C-orthonormal."""

    eigenvalues: np.ndarray
    vectors: np.ndarray
    lumped: bool

    def eigenfunctions_at(self, mesh: Mesh, points: Sequence[GraphPoint]) -> np.ndarray:
        """Matrix ``Psi`` with ``Psi[i, k] = psi_i(points[k])``."""
        E = basis_matrix(mesh, points)
        return (E @ self.vectors).T


def dense_eigensolve(op: FemOperator, lumped: bool = False) -> SpectralDecomposition:
    """Solve (kappa^2 C + G) u = lambda C u densely; oracle/diagnostic use only."""
    if op.N > DENSE_EIG_LIMIT:
        raise GraphError(f"dense eigensolve limited to N_h <= {DENSE_EIG_LIMIT}, got {op.N}")
    A = op.stiffness_form(lumped).toarray()
    M = op.mass(lumped).toarray()
    w, V = sla.eigh(A, M)
    return SpectralDecomposition(w, V, lumped)


def apply_Lh_power(op: FemOperator, p: int, v: np.ndarray, lumped: bool = True) -> np.ndarray:
    """(kappa^2 I + C^{-1} G)^p v by repeated sparse multiply/solve."""
    if p < 0 or int(p) != p:
        raise ValueError(f"power must be a nonnegative integer, got {p}")
    v = np.asarray(v, dtype=float)
    if v.shape[0] != op.N:
        raise ValueError(f"vector length {v.shape[0]} does not match N_h={op.N}")
    out = v.copy()
    for _ in range(int(p)):
        out = op.kappa**2 * out + op.solve_mass(op.G @ out, lumped)
    return out
