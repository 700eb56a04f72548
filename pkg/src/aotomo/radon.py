"""Circular (spherical, d = 2) Radon machinery on the measurement cylinder.

The forward transform averages a field over circles centered at the sources:
R[f](y, r) = integral over the unit circle of directions of f(y + r xi).
Its continuum adjoint with respect to the radially weighted cylinder pairing
is the plain backprojection R*[s](x) = integral over sources of s(y, |x-y|).

The primitive operator p integrates in r with an r0-rescaled correction so
that p maps into functions vanishing at both radius endpoints; its discrete
transpose p* inverts the radial derivative exactly on data supported in
[r0, R]. The radial quadrature underlying p is the exact integral of the
piecewise-constant right interpolant, which is what makes the inversion
identity exact; the matching radial derivative is the forward difference
with a zero ghost past the last radius.
"""

from __future__ import annotations

import math
import warnings

import numpy as np
from scipy.linalg import solve_banded

from . import kernels
from .acousto import AcousticConfig, Sinogram
from .fields import Grid, ScalarField


# ---------------------------------------------------------------------------
# cylinder geometry and norms


def source_weight(config: AcousticConfig, ny: int) -> float:
    """Arc-length weight of one source sample on the circle."""
    return 2 * math.pi * config.mu / ny


def radial_step(config: AcousticConfig, nr: int) -> float:
    return config.R / (nr - 1)


def cylinder_inner(s1: Sinogram, s2: Sinogram, radial_weight=False) -> float:
    """L2 inner product on the cylinder, uniform weights.

    With ``radial_weight`` the measure carries the polar Jacobian r, which is
    the pairing in which the backprojection is the exact continuum adjoint of
    the forward transform.
    """
    w = source_weight(s1.config, s1.ny) * radial_step(s1.config, s1.nr)
    prod = s1.values * s2.values
    if radial_weight:
        prod = prod * s1.radii()[None, :]
    return w * float(np.sum(prod))


def cylinder_norm_l2(s: Sinogram) -> float:
    return math.sqrt(max(cylinder_inner(s, s), 0.0))


def radial_derivative(s: Sinogram) -> Sinogram:
    """Forward difference in r with a zero ghost past the last radius.

    This is the derivative whose negative transpose is the radial
    integration used by the primitive operator, which makes p* an exact left
    inverse on supported data.
    """
    dr = radial_step(s.config, s.nr)
    out = np.empty_like(s.values)
    out[:, :-1] = (s.values[:, 1:] - s.values[:, :-1]) / dr
    out[:, -1] = -s.values[:, -1] / dr
    return s.copy_with(out)


def g_norm(s: Sinogram) -> float:
    """Hilbert norm on G: (L2^2 + L2(d/dr)^2)^(1/2)."""
    d = radial_derivative(s)
    return math.sqrt(max(cylinder_inner(s, s) + cylinder_inner(d, d), 0.0))


def g_dual_norm(s: Sinogram) -> float:
    """Dual (Hilbertized G^-1) norm via per-source tridiagonal solves of
    (I - d^2/dr^2) z = u with zero endpoint values."""
    nr = s.nr
    dr = radial_step(s.config, s.nr)
    m = nr - 2
    if m <= 0:
        return 0.0
    ab = np.zeros((3, m))
    ab[0, 1:] = -1.0 / dr**2
    ab[1, :] = 1.0 + 2.0 / dr**2
    ab[2, :-1] = -1.0 / dr**2
    rhs = s.values[:, 1:-1].T
    z = solve_banded((1, 1), ab, rhs)
    pairing = np.sum(s.values[:, 1:-1] * z.T)
    w = source_weight(s.config, s.ny) * dr
    return math.sqrt(max(w * float(pairing), 0.0))


# ---------------------------------------------------------------------------
# forward transform and backprojection


def _angle_counts(config: AcousticConfig, nr: int, h: float):
    radii = config.radii(nr)
    return np.maximum(64, np.ceil(2 * np.pi * radii / h).astype(int))


class _SampleLayout:
    """Flattened circle-sample structure shared by forward and transpose."""

    def __init__(self, config, ny, nr, grid):
        self.config = config
        self.ny = ny
        self.nr = nr
        self.grid = grid
        counts = _angle_counts(config, nr, grid.h)
        radii = config.radii(nr)
        ct_parts, st_parts, w_parts = [], [], []
        rep = []
        offsets = np.zeros(nr + 1, dtype=np.int64)
        for q, (r, c) in enumerate(zip(radii, counts)):
            t = 2 * np.pi * np.arange(c) / c
            ct_parts.append(np.cos(t))
            st_parts.append(np.sin(t))
            w_parts.append(np.full(c, 2 * np.pi / c))
            rep.append(np.full(c, q))
            offsets[q + 1] = offsets[q] + c
        self.ct = np.concatenate(ct_parts)
        self.st = np.concatenate(st_parts)
        self.wtheta = np.concatenate(w_parts)
        self.rep = np.concatenate(rep)
        self.offsets = offsets[:-1]
        self.flat_r = radii[self.rep]
        self.sources = config.sources(ny)

    def forward(self, values):
        out = np.empty((self.ny, self.nr))
        h = self.grid.h
        for m in range(self.ny):
            y = self.sources[m]
            px = y[0] + self.flat_r * self.ct
            py = y[1] + self.flat_r * self.st
            samples = kernels.bilinear_gather(values, px, py, h) * self.wtheta
            out[m] = np.add.reduceat(samples, self.offsets)
        return out

    def transpose(self, sino_values, out):
        """Exact transpose of :meth:`forward` (plain-dot pairing)."""
        h = self.grid.h
        for m in range(self.ny):
            y = self.sources[m]
            px = y[0] + self.flat_r * self.ct
            py = y[1] + self.flat_r * self.st
            vals = sino_values[m][self.rep] * self.wtheta
            kernels.bilinear_scatter(vals, px, py, h, out)
        return out


_layout_cache = {}


def _layout(config, ny, nr, grid):
    key = (id(config), config.mu, config.R, ny, nr, grid.n)
    if key not in _layout_cache:
        _layout_cache.clear()
        _layout_cache[key] = _SampleLayout(config, ny, nr, grid)
    return _layout_cache[key]


def radon_forward(f: ScalarField, config: AcousticConfig, ny: int,
                  nr: int) -> Sinogram:
    """Angular averages of f (zero-extended) over circles around sources."""
    layout = _layout(config, ny, nr, f.grid)
    return Sinogram(config, ny, nr, layout.forward(f.values))


def radon_forward_extended(ext, config: AcousticConfig, ny: int,
                           nr: int) -> Sinogram:
    """Circular transform of a padded-field potential (no domain clipping).

    ``ext`` carries (values, origin, h) of a square grid large enough that
    every measurement circle stays inside it.
    """
    values = ext.values
    h = ext.h
    length = ext.extent
    sources = config.sources(ny)
    radii = config.radii(nr)
    out = np.empty((ny, nr))
    for m in range(ny):
        y = sources[m]
        for q, r in enumerate(radii):
            nt = max(64, int(np.ceil(2 * np.pi * r / h)))
            t = 2 * np.pi * np.arange(nt) / nt
            px = (y[0] + r * np.cos(t) - ext.origin) / length
            py = (y[1] + r * np.sin(t) - ext.origin) / length
            samples = kernels.bilinear_gather(values, px, py, h / length)
            out[m, q] = (2 * np.pi / nt) * float(np.sum(samples))
    return Sinogram(config, ny, nr, out)


def identity_prediction(psi, config: AcousticConfig, ny: int,
                        nr: int) -> Sinogram:
    """Ideal-data prediction r0 ||w||_1 d/dr R[psi].

    Uses the padded potential when the PsiField carries one (the gauge in
    which the prediction matches the measurements without boundary terms);
    otherwise falls back to the zero-extended restriction.
    """
    if hasattr(psi, "phantom"):
        rpsi = ideal_radon_psi(psi, config, ny, nr)
    elif getattr(psi, "extended", None) is not None:
        rpsi = radon_forward_extended(psi.extended, config, ny, nr)
    else:
        rpsi = radon_forward(psi.psi, config, ny, nr)
    d = radial_derivative(rpsi)
    return d.copy_with(d.values * (config.r0 * config.w_l1))


def _theta_jump_angles(inclusion, y, rho):
    """Angles (around the source) where the circle of radius rho crosses a
    disk inclusion rim; None for other shapes or no crossing."""
    if inclusion.shape != "disk":
        return None
    cx, cy = inclusion.center
    d = math.hypot(cx - y[0], cy - y[1])
    if d == 0.0:
        return None
    carg = (rho * rho + d * d - inclusion.radius**2) / (2 * rho * d)
    if not (-1.0 < carg < 1.0):
        return None
    beta = math.acos(carg)
    t0 = math.atan2(cy - y[1], cx - y[0])
    return (t0 - beta, t0 + beta)


def _circle_integral(eval_fn, jump_fn, rho, ntheta):
    """Trapezoid of a piecewise-smooth integrand over a circle with exact
    two-piece corrections at the listed jump angles.

    ``eval_fn(angles)`` returns integrand samples; ``jump_fn(rho)`` yields
    (angle, below, above) descriptors of each jump.
    """
    theta = np.linspace(0.0, 2 * np.pi, ntheta, endpoint=False)
    step = 2 * np.pi / ntheta
    vals = eval_fn(theta)
    total = step * float(np.sum(vals))
    for angle, below, above in jump_fn(rho):
        ang = angle % (2 * np.pi)
        cell = int(ang / step) % ntheta
        t_lo = theta[cell]
        nxt = (cell + 1) % ntheta
        g_lo = vals[cell]
        g_hi = vals[nxt]
        plain = 0.5 * step * (g_lo + g_hi)
        exact = 0.5 * (ang - t_lo) * (g_lo + below) + 0.5 * (
            t_lo + step - ang) * (above + g_hi)
        total += exact - plain
    return total


def ideal_radon_psi(U, config: AcousticConfig, ny: int, nr: int,
                    rho_step=None) -> Sinogram:
    """Circular transform of the decaying-gauge potential, semi-analytic.

    Averaging the logarithmic kernel over circles collapses the potential
    solve:

        R[psi](y, r) = int_{|z-y| > r} U(z) . (z - y)/|z-y|^2 dz
                     = int_theta [(a - a0) phi^2](y + r xi) dtheta
                       - int_r^inf int_theta (a - a0) d/drho(phi^2) dtheta drho

    The boundary term is a circle integral with rim jumps handled exactly
    (for disks); the area term is a cumulative radial integral of smooth
    circle integrals. Everything is evaluated from the symbolic phantom and
    the interpolated optical field, so the accuracy is independent of the
    wavefront thickness.
    """
    phantom = U.phantom
    grid = U.grid
    h = grid.h
    phi = U.phi.values
    gx = _grad_comp(phi, h, 0)
    gy = _grad_comp(phi, h, 1)
    sources = config.sources(ny)
    radii = config.radii(nr)
    out = np.zeros((ny, nr))
    if not phantom.inclusions:
        return Sinogram(config, ny, nr, out)

    for m in range(ny):
        y = sources[m]
        lo = math.inf
        hi = 0.0
        for inc in phantom.inclusions:
            d = math.hypot(inc.center[0] - y[0], inc.center[1] - y[1])
            rb = inc.bounding_radius()
            lo = min(lo, d - rb)
            hi = max(hi, d + rb)
        lo = max(lo - 2 * h, 1e-6)
        hi = hi + 2 * h
        step = rho_step if rho_step is not None else h / 2
        nrho = max(64, int(math.ceil((hi - lo) / step)) + 1)
        rho_f = np.linspace(lo, hi, nrho)
        ntheta = max(64, int(np.ceil(2 * np.pi * hi / (0.5 * h))))
        theta = np.linspace(0.0, 2 * np.pi, ntheta, endpoint=False)
        ct, st = np.cos(theta), np.sin(theta)

        def contrast_at(px, py):
            return phantom.eval(px, py) - phantom.a0

        # area term integrand g(rho) = int (a - a0) d/drho(phi^2) dtheta
        px = y[0] + np.outer(rho_f, ct)
        py = y[1] + np.outer(rho_f, st)
        qv = contrast_at(px, py)
        phi_at = kernels.bilinear_gather(phi, px, py, h)
        dpx = kernels.bilinear_gather(gx, px, py, h)
        dpy = kernels.bilinear_gather(gy, px, py, h)
        dphi2 = 2.0 * phi_at * (dpx * ct[None, :] + dpy * st[None, :])
        gvals = (2 * np.pi / ntheta) * np.sum(qv * dphi2, axis=1)
        # reverse cumulative trapezoid: C(rho) = int_rho^hi g
        drho = rho_f[1] - rho_f[0]
        rev = np.zeros(nrho)
        rev[:-1] = 0.5 * drho * (gvals[:-1] + gvals[1:])
        cum = np.cumsum(rev[::-1])[::-1]

        def jumps_at(rho):
            descr = []
            for inc in phantom.inclusions:
                pair = _theta_jump_angles(inc, y, rho)
                if pair is None:
                    continue
                for ang in pair:
                    pxj = y[0] + rho * math.cos(ang)
                    pyj = y[1] + rho * math.sin(ang)
                    phij = float(kernels.bilinear_gather(
                        phi, np.array([pxj]), np.array([pyj]), h)[0])
                    eps = 1e-9
                    q_in = float(contrast_at(
                        np.array([y[0] + rho * math.cos(ang - eps)]),
                        np.array([y[1] + rho * math.sin(ang - eps)])))
                    q_out = float(contrast_at(
                        np.array([y[0] + rho * math.cos(ang + eps)]),
                        np.array([y[1] + rho * math.sin(ang + eps)])))
                    descr.append((ang, q_in * phij**2, q_out * phij**2))
            return descr

        for qi, r in enumerate(radii):
            if r >= hi:
                continue
            if r <= lo:
                out[m, qi] = -cum[0]
                continue

            def boundary_eval(th):
                pb = y[0] + r * np.cos(th)
                qb = y[1] + r * np.sin(th)
                pv = kernels.bilinear_gather(phi, pb, qb, h)
                return contrast_at(pb, qb) * pv**2

            # the cut introduces a circle term whose normal points back
            # toward the source, hence the minus sign
            t2 = _circle_integral(boundary_eval, jumps_at, r, ntheta)
            t1 = -float(np.interp(r, rho_f, cum))
            out[m, qi] = t1 - t2
    return Sinogram(config, ny, nr, out)


def _grad_comp(values, h, axis):
    v = values if axis == 0 else values.T
    out = np.empty_like(v)
    out[1:-1, :] = (v[2:, :] - v[:-2, :]) / (2 * h)
    out[0, :] = (-3 * v[0, :] + 4 * v[1, :] - v[2, :]) / (2 * h)
    out[-1, :] = (3 * v[-1, :] - 4 * v[-2, :] + v[-3, :]) / (2 * h)
    return out if axis == 0 else out.T


def radon_adjoint(s: Sinogram, grid: Grid) -> ScalarField:
    """Backprojection R*[s](x) = sum over sources of s(y, |x-y|).

    Linear interpolation in r; the exact continuum adjoint of
    :func:`radon_forward` under the radially weighted cylinder pairing.
    """
    radii = s.radii()
    x, ygrid = grid.meshgrid()
    acc = np.zeros(grid.shape)
    w = source_weight(s.config, s.ny)
    for m in range(s.ny):
        y = s.sources()[m]
        d = np.hypot(x - y[0], ygrid - y[1])
        acc += np.interp(d, radii, s.values[m], left=0.0, right=0.0)
    return ScalarField(grid, w * acc)


# ---------------------------------------------------------------------------
# primitive operator in r and its transpose


_pmatrix_cache = {}


def _p_matrix(nr: int, r0: float, R: float):
    """Matrix of the primitive operator on one source row.

    p[phi](r) = -int_0^r (phi - (R/r0) chi_(0,r0) phi(. R/r0)); the integrals
    are exact on the piecewise-constant right interpolant of phi.
    """
    key = (nr, round(r0, 12), round(R, 12))
    if key in _pmatrix_cache:
        return _pmatrix_cache[key]
    radii = np.linspace(0.0, R, nr)
    dr = radii[1] - radii[0]

    def int_row(t):
        row = np.zeros(nr)
        if t <= 0:
            return row
        t = min(t, R)
        ncell = int(math.floor(t / dr + 1e-12))
        row[1:ncell + 1] = dr
        rem = t - ncell * dr
        if rem > 1e-13 * R and ncell + 1 < nr:
            row[ncell + 1] = rem
        return row

    P = np.zeros((nr, nr))
    for j, r in enumerate(radii):
        P[j] = -(int_row(r) - int_row(min(r, r0) * R / r0))
    _pmatrix_cache[key] = P
    return P


def apply_p(s: Sinogram) -> Sinogram:
    """Primitive-in-r with the rescaled correction; lands in discrete G0
    (exact zeros at r = 0 and r = R)."""
    P = _p_matrix(s.nr, s.config.r0, s.config.R)
    return s.copy_with(s.values @ P.T)


def apply_p_star(s: Sinogram, support_tol=1e-12) -> Sinogram:
    """Exact discrete transpose of :func:`apply_p` (uniform radial weights).

    Requires the input to vanish on radii at or below r0, matching the
    support of physical measurement data.
    """
    radii = s.radii()
    early = radii < s.config.r0 - 1e-12
    scale = np.max(np.abs(s.values)) or 1.0
    if np.any(early) and np.max(np.abs(s.values[:, early])) > support_tol * scale:
        raise ValueError("input does not vanish on radii below r0")
    P = _p_matrix(s.nr, s.config.r0, s.config.R)
    return s.copy_with(s.values @ P)


def recover_Rpsi(M: Sinogram, config: AcousticConfig) -> Sinogram:
    """Stable reconstruction of the circular transform of the potential from
    measurement data: p*(M) / (r0 ||w||_1) in two dimensions."""
    out = apply_p_star(M)
    return out.copy_with(out.values / (config.r0 * config.w_l1))


# ---------------------------------------------------------------------------
# iterative inversion of the forward transform


def invert_radon(s: Sinogram, grid: Grid, tikhonov=1e-6, tol=1e-8,
                 max_iter=500):
    """Least-squares inversion by conjugate gradient on the normal equations.

    Minimizes the plain-cylinder misfit plus Tikhonov term; the internal
    transpose is the exact discrete transpose of the forward quadrature, so
    CG sees a genuinely symmetric operator. Non-convergence warns rather
    than fails. Returns (field, info dict).
    """
    layout = _layout(s.config, s.ny, s.nr, grid)
    wc = source_weight(s.config, s.ny) * radial_step(s.config, s.nr)
    v = grid.trapezoid_weights()

    def normal_op(x):
        sino = layout.forward(x)
        back = np.zeros(grid.shape)
        layout.transpose(wc * sino, back)
        return back / v + tikhonov * x

    back0 = np.zeros(grid.shape)
    layout.transpose(wc * s.values, back0)
    b = back0 / v

    def dot(u1, u2):
        return float(np.sum(v * u1 * u2))

    bnorm = math.sqrt(dot(b, b))
    if bnorm == 0.0:
        return ScalarField(grid, np.zeros(grid.shape)), {
            "iterations": 0, "residual": 0.0}
    x = np.zeros(grid.shape)
    r = b.copy()
    p = r.copy()
    rz = dot(r, r)
    it = 0
    res = math.sqrt(rz) / bnorm
    while res > tol and it < max_iter:
        ap = normal_op(p)
        alpha = rz / dot(p, ap)
        x = x + alpha * p
        r = r - alpha * ap
        rz_new = dot(r, r)
        res = math.sqrt(rz_new) / bnorm
        p = r + (rz_new / rz) * p
        rz = rz_new
        it += 1
    if res > tol:
        warnings.warn(
            f"radon inversion stopped at relative residual {res:.3e} "
            f"after {it} iterations",
            RuntimeWarning,
            stacklevel=2,
        )
    return ScalarField(grid, x), {"iterations": it, "residual": res}
