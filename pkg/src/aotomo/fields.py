"""Grids, sampled fields, discrete calculus, norms, and elliptic solvers.

Everything lives on a uniform n-by-n grid over the unit square; node (i, j)
sits at (i*h, j*h) with h = 1/(n-1). Values are float64 arrays indexed
[i, j] = [x-index, y-index] and are frozen after construction, so fields can
be shared freely across threads.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from . import kernels

MAGIC = b"AORF"
FORMAT_VERSION = 1
KIND_SCALAR = 0
KIND_VECTOR = 1
KIND_TRACE = 2


class SolverError(RuntimeError):
    """Raised when an iterative solve misses its residual target."""

    def __init__(self, message, residual=None, iterations=None):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


def _frozen(values, shape):
    """Validate and freeze a value array.

    Construction takes ownership: if ``values`` is already float64 and
    contiguous it is frozen in place rather than copied.
    """
    arr = np.ascontiguousarray(values, dtype=np.float64)
    if arr.shape != shape:
        raise ValueError(f"expected shape {shape}, got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("field values must be finite")
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class Grid:
    """Uniform node-centered grid on the unit square."""

    n: int

    def __post_init__(self):
        if self.n < 3:
            raise ValueError("grid needs at least 3 nodes per axis")

    @property
    def h(self):
        return 1.0 / (self.n - 1)

    @property
    def shape(self):
        return (self.n, self.n)

    def coords(self):
        """1-D node coordinate array (shared by both axes)."""
        return np.linspace(0.0, 1.0, self.n)

    def meshgrid(self):
        c = self.coords()
        return np.meshgrid(c, c, indexing="ij")

    def trapezoid_weights(self):
        """Node quadrature weights h^2 * cx_i * cy_j (cx = 1/2 at ends)."""
        c = np.ones(self.n)
        c[0] = c[-1] = 0.5
        return (self.h * self.h) * np.outer(c, c)

    def boundary_indices(self):
        """(i, j) index arrays of the 4(n-1) boundary nodes.

        Counterclockwise from (0, 0): bottom edge y=0 (x increasing), right
        edge x=1 (y increasing), top edge y=1 (x decreasing), left edge x=0
        (y decreasing). Each corner appears once, on the edge it starts.
        """
        n = self.n
        ii = np.concatenate([
            np.arange(0, n - 1),
            np.full(n - 1, n - 1),
            np.arange(n - 1, 0, -1),
            np.zeros(n - 1, dtype=int),
        ])
        jj = np.concatenate([
            np.zeros(n - 1, dtype=int),
            np.arange(0, n - 1),
            np.full(n - 1, n - 1),
            np.arange(n - 1, 0, -1),
        ])
        return ii, jj

    def interior_margin_mask(self, margin):
        """Boolean node mask of points at least ``margin`` from the boundary."""
        x, y = self.meshgrid()
        m = margin - 1e-12
        return (x >= m) & (x <= 1 - m) & (y >= m) & (y <= 1 - m)


@dataclass(frozen=True)
class ScalarField:
    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, self.grid.shape))

    @classmethod
    def constant(cls, grid, value):
        return cls(grid, np.full(grid.shape, float(value)))

    @classmethod
    def from_function(cls, grid, fn):
        x, y = grid.meshgrid()
        return cls(grid, fn(x, y))

    def __add__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.values + other.values)
        return ScalarField(self.grid, self.values + other)

    def __sub__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.values - other.values)
        return ScalarField(self.grid, self.values - other)

    def __mul__(self, other):
        if isinstance(other, ScalarField):
            return ScalarField(self.grid, self.values * other.values)
        return ScalarField(self.grid, self.values * other)

    __rmul__ = __mul__


@dataclass(frozen=True)
class VectorField:
    grid: Grid
    vx: np.ndarray
    vy: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "vx", _frozen(self.vx, self.grid.shape))
        object.__setattr__(self, "vy", _frozen(self.vy, self.grid.shape))

    @classmethod
    def zero(cls, grid):
        z = np.zeros(grid.shape)
        return cls(grid, z, z.copy())

    def magnitude(self):
        return np.sqrt(self.vx**2 + self.vy**2)


@dataclass(frozen=True)
class BoundaryTrace:
    """Values on the 4(n-1) boundary nodes, counterclockwise from (0, 0)."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "values", _frozen(self.values, (4 * (self.grid.n - 1),))
        )

    @classmethod
    def constant(cls, grid, value):
        return cls(grid, np.full(4 * (grid.n - 1), float(value)))

    def as_grid_array(self):
        """Scatter the trace onto an (n, n) array (zero in the interior)."""
        out = np.zeros(self.grid.shape)
        ii, jj = self.grid.boundary_indices()
        out[ii, jj] = self.values
        return out


def trace_from_grid(grid, arr):
    ii, jj = grid.boundary_indices()
    return BoundaryTrace(grid, arr[ii, jj])


def boundary_integral(trace):
    """Integral over the boundary curve (uniform weights on the closed loop)."""
    return trace.grid.h * float(np.sum(trace.values))


def boundary_norm_l2(trace):
    return float(np.sqrt(trace.grid.h * np.sum(trace.values**2)))


# ---------------------------------------------------------------------------
# discrete calculus


def _diff_axis0(v, h):
    out = np.empty_like(v)
    out[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * h)
    out[0, :] = (-3 * v[0, :] + 4 * v[1, :] - v[2, :]) / (2 * h)
    out[-1, :] = (3 * v[-1, :] - 4 * v[-2, :] + v[-3, :]) / (2 * h)
    return out


def gradient(f: ScalarField) -> VectorField:
    """Nodal gradient: central differences inside, one-sided second order at
    the boundary."""
    h = f.grid.h
    gx = _diff_axis0(f.values, h)
    gy = _diff_axis0(f.values.T, h).T
    return VectorField(f.grid, gx, gy)


def divergence(v: VectorField) -> ScalarField:
    h = v.grid.h
    d = _diff_axis0(v.vx, h) + _diff_axis0(v.vy.T, h).T
    return ScalarField(v.grid, d)


def integrate(f, mask=None) -> float:
    """Trapezoidal integral over the square, or over the masked nodes."""
    grid, vals = _unwrap(f)
    w = grid.trapezoid_weights()
    if mask is None:
        return float(np.sum(w * vals))
    if not np.any(mask):
        return 0.0
    return float(np.sum(w[mask] * vals[mask]))


def _unwrap(f):
    if isinstance(f, ScalarField):
        return f.grid, f.values
    raise TypeError("expected a ScalarField")


def inner(f, g, mask=None) -> float:
    grid, fv = _unwrap(f)
    _, gv = _unwrap(g)
    w = grid.trapezoid_weights()
    if mask is None:
        return float(np.sum(w * fv * gv))
    return float(np.sum(w[mask] * fv[mask] * gv[mask]))


def inner_vec(u: VectorField, v: VectorField, mask=None) -> float:
    w = u.grid.trapezoid_weights()
    prod = u.vx * v.vx + u.vy * v.vy
    if mask is None:
        return float(np.sum(w * prod))
    return float(np.sum(w[mask] * prod[mask]))


def norm_l2(f, mask=None) -> float:
    return float(np.sqrt(max(inner(f, f, mask), 0.0)))


def norm_l4(f, mask=None) -> float:
    grid, vals = _unwrap(f)
    w = grid.trapezoid_weights()
    if mask is None:
        return float(np.sum(w * vals**4)) ** 0.25
    if not np.any(mask):
        return 0.0
    return float(np.sum(w[mask] * vals[mask] ** 4)) ** 0.25


def h1_seminorm(f) -> float:
    g = gradient(f)
    return float(np.sqrt(max(inner_vec(g, g), 0.0)))


def norms(f) -> dict:
    return {"L2": norm_l2(f), "L4": norm_l4(f), "H1": h1_seminorm(f)}


# ---------------------------------------------------------------------------
# conjugate gradient


def cg(apply_op, b, tol=1e-10, max_iter=None, x0=None, precond=None, dot=None):
    """Conjugate gradient for an SPD operator given as a callable.

    Stops at relative residual ||b - Ax|| / ||b|| <= tol. Raises SolverError
    on non-convergence. Returns (x, relative_residual, iterations).
    """
    if dot is None:
        dot = lambda u, v: float(np.sum(u * v))
    if max_iter is None:
        max_iter = 50 * int(np.sqrt(b.size) + 1)
    bnorm = np.sqrt(dot(b, b))
    if bnorm == 0.0:
        return np.zeros_like(b), 0.0, 0
    x = np.zeros_like(b) if x0 is None else x0.astype(np.float64, copy=True)
    r = b - apply_op(x)
    z = precond(r) if precond is not None else r
    p = z.copy()
    rz = dot(r, z)
    res = np.sqrt(dot(r, r)) / bnorm
    it = 0
    while res > tol and it < max_iter:
        ap = apply_op(p)
        alpha = rz / dot(p, ap)
        x = x + alpha * p
        r = r - alpha * ap
        res = np.sqrt(dot(r, r)) / bnorm
        if res <= tol:
            it += 1
            break
        z = precond(r) if precond is not None else r
        rz_new = dot(r, z)
        p = z + (rz_new / rz) * p
        rz = rz_new
        it += 1
    if res > tol:
        raise SolverError(
            f"CG stalled at relative residual {res:.3e} after {it} iterations",
            residual=res,
            iterations=it,
        )
    return x, res, it


# ---------------------------------------------------------------------------
# Poisson solvers


def poisson_dirichlet(rhs, tol=1e-10, max_iter=None, x0=None) -> ScalarField:
    """Solve -lap(u) = rhs with u = 0 on the boundary (5-point stencil, CG)."""
    if isinstance(rhs, ScalarField):
        grid, b = rhs.grid, rhs.values
    else:
        raise TypeError("rhs must be a ScalarField")
    n, h = grid.n, grid.h
    if max_iter is None:
        max_iter = 50 * n
    bvec = b.copy()
    bvec[0, :] = 0.0
    bvec[-1, :] = 0.0
    bvec[:, 0] = 0.0
    bvec[:, -1] = 0.0

    def apply_op(x):
        return kernels.dirichlet_apply(x, None, h)

    x0v = None if x0 is None else x0.values
    u, res, it = cg(apply_op, bvec, tol=tol, max_iter=max_iter, x0=x0v)
    return ScalarField(grid, u)


def neumann_edge_coefficients(grid):
    """FEM-style edge weights for the reflective Neumann form.

    x-edges carry the transverse trapezoid factor in y and vice versa, so the
    quadratic form sum_e c_e (du)_e (dv)_e matches the trapezoid-mass 5-point
    Neumann operator.
    """
    n = grid.n
    cy_fac = np.ones(n)
    cy_fac[0] = cy_fac[-1] = 0.5
    cx = np.tile(cy_fac, (n - 1, 1))
    cy = np.tile(cy_fac[:, None], (1, n - 1))
    return cx, cy


def neumann_solve_weighted(grid, b, tol=1e-10, max_iter=None, coeffs=None):
    """Solve the edge-form Neumann system E z = b on the zero-mean subspace.

    ``b`` is a plain-dot assembled right-hand side (must have zero sum up to
    roundoff; the mean is projected out). Returns a zero-weighted-mean array.
    """
    n = grid.n
    if max_iter is None:
        max_iter = 50 * n
    cx, cy = coeffs if coeffs is not None else neumann_edge_coefficients(grid)
    w = grid.trapezoid_weights()
    wsum = w.sum()

    def project(v):
        return v - (np.sum(w * v) / wsum)

    def apply_op(x):
        return kernels.edge_form_apply(x, cx, cy)

    # the edge-form matrix is symmetric in the plain dot product with kernel
    # = constants, so compatibility means plain zero sum of b
    bproj = b - b.sum() / b.size
    z, res, it = cg(apply_op, bproj, tol=tol, max_iter=max_iter)
    return project(z)


def poisson_neumann(rhs, tol=1e-10, max_iter=None) -> ScalarField:
    """Solve lap(f) = rhs with homogeneous Neumann data, zero-mean solution.

    The compatibility condition is enforced by subtracting the weighted mean
    of the right-hand side.
    """
    grid, r = _unwrap(rhs)
    w = grid.trapezoid_weights()
    r0 = r - np.sum(w * r) / w.sum()
    # weak form: E f = -(W * rhs)
    b = -(w * r0)
    f = neumann_solve_weighted(grid, b, tol=tol, max_iter=max_iter)
    return ScalarField(grid, f)


# ---------------------------------------------------------------------------
# binary field file format


def _write_payload(fh, kind, n, payload):
    fh.write(MAGIC)
    fh.write(struct.pack("<HBI", FORMAT_VERSION, kind, n))
    fh.write(payload.astype("<f8").tobytes(order="C"))


def save_field(path, obj):
    """Write a ScalarField, VectorField, or BoundaryTrace to the binary
    field format (magic AORF, version, kind, n, float64 little-endian)."""
    with open(path, "wb") as fh:
        if isinstance(obj, ScalarField):
            _write_payload(fh, KIND_SCALAR, obj.grid.n, obj.values)
        elif isinstance(obj, VectorField):
            payload = np.stack([obj.vx, obj.vy], axis=-1)
            _write_payload(fh, KIND_VECTOR, obj.grid.n, payload)
        elif isinstance(obj, BoundaryTrace):
            _write_payload(fh, KIND_TRACE, obj.grid.n, obj.values)
        else:
            raise TypeError(f"cannot serialize {type(obj).__name__}")


def load_field(path):
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: bad magic {magic!r}")
        version, kind, n = struct.unpack("<HBI", fh.read(7))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported version {version}")
        grid = Grid(int(n))
        raw = np.frombuffer(fh.read(), dtype="<f8")
    if kind == KIND_SCALAR:
        return ScalarField(grid, raw.reshape(n, n))
    if kind == KIND_VECTOR:
        pair = raw.reshape(n, n, 2)
        return VectorField(grid, pair[:, :, 0], pair[:, :, 1])
    if kind == KIND_TRACE:
        return BoundaryTrace(grid, raw)
    raise ValueError(f"{path}: unknown kind {kind}")
