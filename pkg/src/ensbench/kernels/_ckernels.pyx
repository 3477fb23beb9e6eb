# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the kernels in ``_pure.py`` (same signatures)."""
import numpy as np
cimport numpy as cnp
from libc.math cimport fabs, INFINITY
from libc.stdlib cimport malloc, free

cnp.import_array()


cdef struct Pair:
    double value
    Py_ssize_t index


# Ensembles are small, so insertion sort beats qsort; it is stable, so tied
# members keep index order.
cdef inline void _sort_doubles(double* a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef double v
    for i in range(1, n):
        v = a[i]
        k = i - 1
        while k >= 0 and a[k] > v:
            a[k + 1] = a[k]
            k -= 1
        a[k + 1] = v


cdef inline void _sort_pairs(Pair* a, Py_ssize_t n) noexcept nogil:
    cdef Py_ssize_t i, k
    cdef Pair v
    for i in range(1, n):
        v = a[i]
        k = i - 1
        while k >= 0 and a[k].value > v.value:
            a[k + 1] = a[k]
            k -= 1
        a[k + 1] = v


def crps_values(members, truth, bint fair):
    cdef double[:, ::1] x = np.ascontiguousarray(members, dtype=np.float64)
    cdef double[::1] y = np.ascontiguousarray(truth, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j
    out_arr = np.empty(m, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef double skill, pair, denom
    cdef double* col = <double*>malloc(n * sizeof(double))
    if col == NULL:
        raise MemoryError()
    denom = 2.0 * n * (n - 1) if fair else 2.0 * n * n
    try:
        with nogil:
            for j in range(m):
                skill = 0.0
                for i in range(n):
                    col[i] = x[i, j]
                    skill += fabs(col[i] - y[j])
                _sort_doubles(col, n)
                pair = 0.0
                for i in range(n):
                    pair += (2.0 * (i + 1) - n - 1.0) * col[i]
                out[j] = skill / n - 2.0 * pair / denom
    finally:
        free(col)
    return out_arr


def crps_values_grad(members, truth, bint fair):
    cdef double[:, ::1] x = np.ascontiguousarray(members, dtype=np.float64)
    cdef double[::1] y = np.ascontiguousarray(truth, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], m = x.shape[1], i, j, a, b
    values_arr = np.empty(m, dtype=np.float64)
    grad_arr = np.empty((n, m), dtype=np.float64)
    cdef double[::1] values = values_arr
    cdef double[:, ::1] grad = grad_arr
    cdef double kappa, skill, pair, d, s
    cdef Pair* col = <Pair*>malloc(n * sizeof(Pair))
    if col == NULL:
        raise MemoryError()
    kappa = 1.0 / (n * (n - 1.0)) if fair else 1.0 / (<double>n * n)
    try:
        with nogil:
            for j in range(m):
                skill = 0.0
                for i in range(n):
                    col[i].value = x[i, j]
                    col[i].index = i
                    d = x[i, j] - y[j]
                    skill += fabs(d)
                    s = 1.0 if d > 0 else (-1.0 if d < 0 else 0.0)
                    grad[i, j] = s / n
                _sort_pairs(col, n)
                pair = 0.0
                for i in range(n):
                    pair += (2.0 * (i + 1) - n - 1.0) * col[i].value
                values[j] = skill / n - kappa * pair
                # runs of tied values: sum_k sign(x_i - x_k) = (#below) - (#above)
                a = 0
                while a < n:
                    b = a + 1
                    while b < n and col[b].value == col[a].value:
                        b += 1
                    for i in range(a, b):
                        grad[col[i].index, j] -= kappa * (a - (n - b))
                    a = b
    finally:
        free(col)
    return values_arr, grad_arr


cdef inline bint _extremum_at(double[:, ::1] f, Py_ssize_t i, Py_ssize_t j, Py_ssize_t h,
                              Py_ssize_t w, double sgn, bint periodic_lon) noexcept nogil:
    cdef Py_ssize_t ii, jj
    cdef int di, dj
    cdef double v = sgn * f[i, j], nb
    cdef bint below = False
    for di in range(-1, 2):
        ii = i + di
        if ii < 0 or ii >= h:
            continue
        for dj in range(-1, 2):
            if di == 0 and dj == 0:
                continue
            jj = j + dj
            if jj < 0 or jj >= w:
                if not periodic_lon:
                    continue
                jj = (jj + w) % w
            nb = sgn * f[ii, jj]
            if v > nb:
                return False
            if v < nb:
                below = True
    return below


def local_extrema(field, bint find_max, bint periodic_lon):
    cdef double[:, ::1] f = np.ascontiguousarray(field, dtype=np.float64)
    cdef Py_ssize_t h = f.shape[0], w = f.shape[1], i, j
    cdef double sgn = -1.0 if find_max else 1.0
    cdef double v, a, b, c, d, e, g, k, l
    out_arr = np.zeros((h, w), dtype=np.bool_)
    cdef cnp.npy_bool[:, ::1] out = out_arr
    with nogil:
        for i in range(1, h - 1):
            for j in range(1, w - 1):
                v = sgn * f[i, j]
                a = sgn * f[i - 1, j - 1]
                b = sgn * f[i - 1, j]
                c = sgn * f[i - 1, j + 1]
                d = sgn * f[i, j - 1]
                e = sgn * f[i, j + 1]
                g = sgn * f[i + 1, j - 1]
                k = sgn * f[i + 1, j]
                l = sgn * f[i + 1, j + 1]
                out[i, j] = ((v <= a) & (v <= b) & (v <= c) & (v <= d) & (v <= e) & (v <= g)
                             & (v <= k) & (v <= l)
                             & ((v < a) | (v < b) | (v < c) | (v < d) | (v < e) | (v < g)
                                | (v < k) | (v < l)))
        for i in range(h):
            for j in range(w):
                if i == 0 or i == h - 1 or j == 0 or j == w - 1:
                    out[i, j] = _extremum_at(f, i, j, h, w, sgn, periodic_lon)
    return out_arr


cdef inline void _tendency(double[:, ::1] x, double[:, ::1] out, double forcing,
                           Py_ssize_t nb, Py_ssize_t k) noexcept nogil:
    cdef Py_ssize_t b, i
    for b in range(nb):
        for i in range(k):
            out[b, i] = ((x[b, (i + 1) % k] - x[b, (i - 2 + k) % k]) * x[b, (i - 1 + k) % k]
                         - x[b, i] + forcing)


def l96_rk4(state, double forcing, double dt, Py_ssize_t steps):
    x_arr = np.array(state, dtype=np.float64, order="C")
    cdef double[:, ::1] x = x_arr
    cdef Py_ssize_t nb = x.shape[0], k = x.shape[1], s, b, i
    out_arr = np.empty((steps + 1, nb, k), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef double[:, ::1] k1 = np.empty((nb, k)), k2 = np.empty((nb, k))
    cdef double[:, ::1] k3 = np.empty((nb, k)), k4 = np.empty((nb, k))
    cdef double[:, ::1] tmp = np.empty((nb, k))
    out[0, :, :] = x
    with nogil:
        for s in range(steps):
            _tendency(x, k1, forcing, nb, k)
            for b in range(nb):
                for i in range(k):
                    tmp[b, i] = x[b, i] + 0.5 * dt * k1[b, i]
            _tendency(tmp, k2, forcing, nb, k)
            for b in range(nb):
                for i in range(k):
                    tmp[b, i] = x[b, i] + 0.5 * dt * k2[b, i]
            _tendency(tmp, k3, forcing, nb, k)
            for b in range(nb):
                for i in range(k):
                    tmp[b, i] = x[b, i] + dt * k3[b, i]
            _tendency(tmp, k4, forcing, nb, k)
            for b in range(nb):
                for i in range(k):
                    x[b, i] = x[b, i] + (dt / 6.0) * (k1[b, i] + 2.0 * k2[b, i]
                                                      + 2.0 * k3[b, i] + k4[b, i])
                    out[s + 1, b, i] = x[b, i]
    return out_arr
