# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: stencil applications, bilinear transport, root solves.

Mirrors aotomo.kernels._numpy function for function; the dispatcher in
aotomo.kernels picks this module when it imports cleanly.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, fabs, floor

cnp.import_array()

BACKEND_NAME = "cython"


cdef inline double _bump(double s) nogil:
    cdef double t
    if s <= -1.0 or s >= 1.0:
        return 0.0
    t = 1.0 - s * s
    return exp(1.0 - 1.0 / t)


cdef inline double _bump_prime(double s) nogil:
    cdef double t
    if s <= -1.0 or s >= 1.0:
        return 0.0
    t = 1.0 - s * s
    return -2.0 * s / (t * t) * exp(1.0 - 1.0 / t)


def bump(s):
    s = np.asarray(s, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] flat = np.ascontiguousarray(s.ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(flat)
    cdef Py_ssize_t i, m = flat.shape[0]
    for i in range(m):
        out[i] = _bump(flat[i])
    return out.reshape(s.shape)


def bump_prime(s):
    s = np.asarray(s, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] flat = np.ascontiguousarray(s.ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty_like(flat)
    cdef Py_ssize_t i, m = flat.shape[0]
    for i in range(m):
        out[i] = _bump_prime(flat[i])
    return out.reshape(s.shape)


def robin_apply(cnp.ndarray[cnp.float64_t, ndim=2] x,
                cnp.ndarray[cnp.float64_t, ndim=2] a,
                double l, double h, out=None):
    cdef Py_ssize_t n = x.shape[0]
    if out is None:
        out = np.empty_like(x)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] o = out
    cdef double h2 = h * h
    cdef double robin = 2.0 / (l * h)
    cdef Py_ssize_t i, j
    cdef double xn, xs, xw, xe, v
    cdef double wgt
    for i in range(n):
        for j in range(n):
            xw = x[i - 1, j] if i > 0 else x[1, j]
            xe = x[i + 1, j] if i < n - 1 else x[n - 2, j]
            xs = x[i, j - 1] if j > 0 else x[i, 1]
            xn = x[i, j + 1] if j < n - 1 else x[i, n - 2]
            v = (4.0 * x[i, j] - xw - xe - xs - xn) / h2 + a[i, j] * x[i, j]
            wgt = 1.0
            if i == 0 or i == n - 1:
                v += robin * x[i, j]
                wgt *= 0.5
            if j == 0 or j == n - 1:
                v += robin * x[i, j]
                wgt *= 0.5
            o[i, j] = v * wgt
    return out


def dirichlet_apply(cnp.ndarray[cnp.float64_t, ndim=2] x, a, double h, out=None):
    cdef Py_ssize_t n = x.shape[0]
    if out is None:
        out = np.zeros_like(x)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] o = out
    cdef cnp.ndarray[cnp.float64_t, ndim=2] av
    cdef bint has_a = a is not None
    if has_a:
        av = a
    cdef double h2 = h * h
    cdef Py_ssize_t i, j
    cdef double xw, xe, xs, xn, v
    for j in range(n):
        o[0, j] = 0.0
        o[n - 1, j] = 0.0
    for i in range(n):
        o[i, 0] = 0.0
        o[i, n - 1] = 0.0
    for i in range(1, n - 1):
        for j in range(1, n - 1):
            xw = x[i - 1, j] if i > 1 else 0.0
            xe = x[i + 1, j] if i < n - 2 else 0.0
            xs = x[i, j - 1] if j > 1 else 0.0
            xn = x[i, j + 1] if j < n - 2 else 0.0
            v = (4.0 * x[i, j] - xw - xe - xs - xn) / h2
            if has_a:
                v += av[i, j] * x[i, j]
            o[i, j] = v
    return out


def edge_form_apply(cnp.ndarray[cnp.float64_t, ndim=2] x,
                    cnp.ndarray[cnp.float64_t, ndim=2] cx,
                    cnp.ndarray[cnp.float64_t, ndim=2] cy,
                    out=None):
    cdef Py_ssize_t n = x.shape[0]
    if out is None:
        out = np.zeros_like(x)
    else:
        out[...] = 0.0
    cdef cnp.ndarray[cnp.float64_t, ndim=2] o = out
    cdef Py_ssize_t i, j
    cdef double f
    for i in range(n - 1):
        for j in range(n):
            f = cx[i, j] * (x[i + 1, j] - x[i, j])
            o[i + 1, j] += f
            o[i, j] -= f
    for i in range(n):
        for j in range(n - 1):
            f = cy[i, j] * (x[i, j + 1] - x[i, j])
            o[i, j + 1] += f
            o[i, j] -= f
    return out


def bilinear_gather(cnp.ndarray[cnp.float64_t, ndim=2] values, px, py, double h):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fx = np.ascontiguousarray(
        np.asarray(px, dtype=np.float64).ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fy = np.ascontiguousarray(
        np.asarray(py, dtype=np.float64).ravel())
    cdef Py_ssize_t m = fx.shape[0]
    cdef Py_ssize_t n = values.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t k, ix, iy
    cdef double gx, gy, tx, ty, xx, yy
    for k in range(m):
        xx = fx[k]
        yy = fy[k]
        if xx < 0.0 or xx > 1.0 or yy < 0.0 or yy > 1.0:
            out[k] = 0.0
            continue
        gx = xx / h
        gy = yy / h
        if gx > n - 1.0000000001:
            gx = n - 1.0000000001
        if gy > n - 1.0000000001:
            gy = n - 1.0000000001
        ix = <Py_ssize_t>floor(gx)
        iy = <Py_ssize_t>floor(gy)
        tx = gx - ix
        ty = gy - iy
        out[k] = (values[ix, iy] * (1.0 - tx) * (1.0 - ty)
                  + values[ix + 1, iy] * tx * (1.0 - ty)
                  + values[ix, iy + 1] * (1.0 - tx) * ty
                  + values[ix + 1, iy + 1] * tx * ty)
    shp = np.asarray(px, dtype=np.float64).shape
    return out.reshape(shp)


def bilinear_scatter(vals, px, py, double h, cnp.ndarray[cnp.float64_t, ndim=2] out):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] v = np.ascontiguousarray(
        np.asarray(vals, dtype=np.float64).ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fx = np.ascontiguousarray(
        np.asarray(px, dtype=np.float64).ravel())
    cdef cnp.ndarray[cnp.float64_t, ndim=1] fy = np.ascontiguousarray(
        np.asarray(py, dtype=np.float64).ravel())
    cdef Py_ssize_t m = fx.shape[0]
    cdef Py_ssize_t n = out.shape[0]
    cdef Py_ssize_t k, ix, iy
    cdef double gx, gy, tx, ty, xx, yy, val
    for k in range(m):
        xx = fx[k]
        yy = fy[k]
        if xx < 0.0 or xx > 1.0 or yy < 0.0 or yy > 1.0:
            continue
        gx = xx / h
        gy = yy / h
        if gx > n - 1.0000000001:
            gx = n - 1.0000000001
        if gy > n - 1.0000000001:
            gy = n - 1.0000000001
        ix = <Py_ssize_t>floor(gx)
        iy = <Py_ssize_t>floor(gy)
        tx = gx - ix
        ty = gy - iy
        val = v[k]
        out[ix, iy] += val * (1.0 - tx) * (1.0 - ty)
        out[ix + 1, iy] += val * tx * (1.0 - ty)
        out[ix, iy + 1] += val * (1.0 - tx) * ty
        out[ix + 1, iy + 1] += val * tx * ty
    return out


def radial_invert(dist, double r, double amp, double eta,
                  double tol=1e-13, int max_iter=200):
    cdef cnp.ndarray[cnp.float64_t, ndim=1] d = np.ascontiguousarray(
        np.asarray(dist, dtype=np.float64).ravel())
    cdef Py_ssize_t m = d.shape[0]
    cdef cnp.ndarray[cnp.float64_t, ndim=1] out = np.empty(m, dtype=np.float64)
    cdef Py_ssize_t k
    cdef int it
    cdef double lo, hi, mid, g, gp, rho, dk, step
    for k in range(m):
        dk = d[k]
        lo = dk - amp
        hi = dk + amp
        rho = dk
        for it in range(max_iter):
            g = rho + amp * _bump((r - rho) / eta) - dk
            if fabs(g) < tol:
                break
            if g < 0.0:
                lo = rho
            else:
                hi = rho
            gp = 1.0 - (amp / eta) * _bump_prime((r - rho) / eta)
            if gp > 1e-10:
                step = rho - g / gp
                if lo < step < hi:
                    rho = step
                else:
                    rho = 0.5 * (lo + hi)
            else:
                rho = 0.5 * (lo + hi)
        out[k] = rho
    shp = np.asarray(dist, dtype=np.float64).shape
    return out.reshape(shp)
