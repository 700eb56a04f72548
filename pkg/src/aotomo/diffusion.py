"""Forward optical model: Robin-boundary diffusion solves and derivatives.

The operator is (-lap + a) with the boundary condition l*dnu(phi) + phi = g
discretized by second-order ghost elimination. Rows are scaled by the
trapezoid pattern so the assembled system is symmetric positive definite;
solves are conjugate gradient, optionally preconditioned by a cached sparse
factorization of a nearby operator (used for the many slightly perturbed
solves of a measurement sweep).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from . import kernels
from .fields import (
    BoundaryTrace,
    Grid,
    ScalarField,
    SolverError,
    cg,
    trace_from_grid,
)


@dataclass(frozen=True)
class RobinProblem:
    a: ScalarField
    g: BoundaryTrace
    l: float

    def __post_init__(self):
        if self.l < 0:
            raise ValueError("extrapolation length must be nonnegative")
        if np.min(self.a.values) < 0:
            raise ValueError("absorption must be nonnegative")


@dataclass(frozen=True)
class OpticalSolution:
    phi: ScalarField
    flux: BoundaryTrace
    residual: float
    iterations: int


class RobinOperator:
    """Symmetrized discrete Robin diffusion operator for a fixed coefficient."""

    def __init__(self, grid: Grid, a_values, l: float):
        if l <= 0:
            raise ValueError("RobinOperator needs l > 0; use the Dirichlet path")
        self.grid = grid
        self.a = np.ascontiguousarray(a_values, dtype=np.float64)
        self.l = float(l)
        self._splu = None
        n = grid.n
        w = np.ones((n, n))
        w[0, :] *= 0.5
        w[-1, :] *= 0.5
        w[:, 0] *= 0.5
        w[:, -1] *= 0.5
        self.row_weights = w

    def apply(self, x):
        return kernels.robin_apply(x, self.a, self.l, self.grid.h)

    def boundary_rhs(self, g: BoundaryTrace):
        """Right-hand side vector for boundary data g (already row-scaled)."""
        n = self.grid.n
        b = np.zeros((n, n))
        ii, jj = self.grid.boundary_indices()
        b[ii, jj] = g.values / (self.l * self.grid.h)
        return b

    def source_rhs(self, s):
        """Right-hand side for an interior source term (-lap+a)phi = s."""
        vals = s.values if isinstance(s, ScalarField) else np.asarray(s)
        return self.row_weights * vals

    def sparse_matrix(self):
        n, h, l = self.grid.n, self.grid.h, self.l
        h2 = h * h
        robin = 2.0 / (l * h)
        rows, cols, data = [], [], []

        def idx(i, j):
            return i * n + j

        for i in range(n):
            for j in range(n):
                nb = (i in (0, n - 1)) + (j in (0, n - 1))
                w = 0.5**nb
                diag = 4.0 / h2 + self.a[i, j] + nb * robin
                rows.append(idx(i, j))
                cols.append(idx(i, j))
                data.append(w * diag)
                for di, dj in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                    ii, jj = i + di, j + dj
                    if not (0 <= ii < n and 0 <= jj < n):
                        ii, jj = i - di, j - dj  # ghost folds to inner neighbor
                    rows.append(idx(i, j))
                    cols.append(idx(ii, jj))
                    data.append(-w / h2)
        return sp.csr_matrix((data, (rows, cols)), shape=(n * n, n * n))

    def factorized(self):
        if self._splu is None:
            self._splu = spla.splu(self.sparse_matrix().tocsc())
        return self._splu

    def solve(self, b, tol=1e-10, x0=None, precond_with=None):
        """CG solve of S x = b; optionally preconditioned by the factorization
        of a nearby operator (PCG)."""
        n = self.grid.n
        precond = None
        if precond_with is not None:
            lu = precond_with.factorized()

            def precond(r):
                return lu.solve(r.ravel()).reshape(n, n)

        x, res, it = cg(
            self.apply, b, tol=tol, max_iter=50 * n, x0=x0, precond=precond
        )
        return x, res, it


def _dirichlet_solve(grid, a_values, g: BoundaryTrace, tol=1e-10):
    """phi = g on the boundary, (-lap + a) phi = 0 inside."""
    n, h = grid.n, grid.h
    bc = g.as_grid_array()
    a = np.ascontiguousarray(a_values)

    # move boundary values to the right-hand side of the interior system
    full = kernels.dirichlet_apply(np.zeros_like(bc), a, h)
    bvec = np.zeros((n, n))
    bvec[1, 1:-1] += bc[0, 1:-1] / h**2
    bvec[-2, 1:-1] += bc[-1, 1:-1] / h**2
    bvec[1:-1, 1] += bc[1:-1, 0] / h**2
    bvec[1:-1, -2] += bc[1:-1, -1] / h**2

    def apply_op(x):
        return kernels.dirichlet_apply(x, a, h)

    x, res, it = cg(apply_op, bvec, tol=tol, max_iter=50 * n)
    x = x.copy()
    ii, jj = grid.boundary_indices()
    x[ii, jj] = g.values
    return x, res, it


def _one_sided_flux(grid, phi_values):
    """Outward normal derivative by one-sided second-order differences;
    corners average the two one-sided normals."""
    h = grid.h
    v = phi_values
    n = grid.n
    out = np.zeros(grid.shape)
    count = np.zeros(grid.shape)
    faces = [
        (np.s_[0, :], (3 * v[0, :] - 4 * v[1, :] + v[2, :]) / (2 * h)),
        (np.s_[-1, :], (3 * v[-1, :] - 4 * v[-2, :] + v[-3, :]) / (2 * h)),
        (np.s_[:, 0], (3 * v[:, 0] - 4 * v[:, 1] + v[:, 2]) / (2 * h)),
        (np.s_[:, -1], (3 * v[:, -1] - 4 * v[:, -2] + v[:, -3]) / (2 * h)),
    ]
    for sl, vals in faces:
        out[sl] += vals
        count[sl] += 1.0
    out[count > 0] /= count[count > 0]
    return trace_from_grid(grid, out)


def solve_T(problem: RobinProblem, x0: ScalarField | None = None,
            precond_with: RobinOperator | None = None,
            tol=1e-10) -> OpticalSolution:
    """Solve the diffusion problem and return the energy density and its
    outgoing boundary flux."""
    grid = problem.a.grid
    if problem.l == 0.0:
        x, res, it = _dirichlet_solve(grid, problem.a.values, problem.g, tol=tol)
        phi = ScalarField(grid, x)
        flux = _one_sided_flux(grid, x)
        return OpticalSolution(phi, flux, res, it)
    op = RobinOperator(grid, problem.a.values, problem.l)
    b = op.boundary_rhs(problem.g)
    x0v = None if x0 is None else x0.values
    x, res, it = op.solve(b, tol=tol, x0=x0v, precond_with=precond_with)
    phi = ScalarField(grid, x)
    ii, jj = grid.boundary_indices()
    flux = BoundaryTrace(grid, (problem.g.values - x[ii, jj]) / problem.l)
    return OpticalSolution(phi, flux, res, it)


def solve_adjoint(a: ScalarField, source: ScalarField, l: float,
                  precond_with: RobinOperator | None = None,
                  tol=1e-10) -> ScalarField:
    """Solve (-lap + a) z = source with homogeneous Robin data.

    The operator equals its own adjoint in the trapezoid inner product, so
    this routine serves both tangent and adjoint solves.
    """
    grid = a.grid
    op = RobinOperator(grid, a.values, l)
    b = op.source_rhs(source)
    x, res, it = op.solve(b, tol=tol, precond_with=precond_with)
    return ScalarField(grid, x)


def solve_DT(a: ScalarField, phi: ScalarField, h: ScalarField, l: float,
             tol=1e-10) -> ScalarField:
    """Directional derivative of the coefficient-to-solution map.

    Solves (-lap + a) dphi = -h * phi with homogeneous Robin data, where phi
    is the solution at coefficient ``a``.
    """
    source = ScalarField(a.grid, -h.values * phi.values)
    return solve_adjoint(a, source, l, tol=tol)
