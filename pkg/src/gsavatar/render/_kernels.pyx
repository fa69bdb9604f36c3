# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled per-pixel compositing kernels.

Both entry points work on a band of rows ``[row0, row1)`` so callers can split
an image into fixed bands and reduce per-band gradient partials in band order,
which keeps results independent of the number of worker threads.
"""
from libc.math cimport exp
from libc.stdlib cimport malloc, free

cdef double ALPHA_MAX = 0.99
cdef double T_MIN = 1e-4
cdef double SUPPORT = 9.0


def forward_rows(const double[:, ::1] mean2d, const double[:, ::1] conic, const double[::1] opac,
                 const double[:, ::1] colors, const double[::1] depth, const long[:, ::1] bbox,
                 const long[::1] order, const double[::1] bg, int width, int row0, int row1,
                 double[:, :, ::1] rgb, double[:, ::1] alpha, double[:, ::1] dimg, long[:, ::1] count):
    with nogil:
        _forward(mean2d, conic, opac, colors, depth, bbox, order, bg, width, row0, row1,
                 rgb, alpha, dimg, count)


cdef void _forward(const double[:, ::1] mean2d, const double[:, ::1] conic, const double[::1] opac,
                   const double[:, ::1] colors, const double[::1] depth, const long[:, ::1] bbox,
                   const long[::1] order, const double[::1] bg, int width, int row0, int row1,
                   double[:, :, ::1] rgb, double[:, ::1] alpha, double[:, ::1] dimg,
                   long[:, ::1] count) noexcept nogil:
    cdef Py_ssize_t n_sorted = order.shape[0]
    cdef Py_ssize_t s
    cdef long k
    cdef int x, y
    cdef double t, r, g, b, d, dx, dy, m2, a, w
    cdef long cnt
    for y in range(row0, row1):
        for x in range(width):
            t = 1.0
            r = 0.0
            g = 0.0
            b = 0.0
            d = 0.0
            cnt = 0
            for s in range(n_sorted):
                k = order[s]
                if x < bbox[k, 0] or x > bbox[k, 1] or y < bbox[k, 2] or y > bbox[k, 3]:
                    continue
                dx = x - mean2d[k, 0]
                dy = y - mean2d[k, 1]
                m2 = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                if m2 > SUPPORT:
                    continue
                a = opac[k] * exp(-0.5 * m2)
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                if a <= 0.0:
                    continue
                w = a * t
                r = r + w * colors[k, 0]
                g = g + w * colors[k, 1]
                b = b + w * colors[k, 2]
                d = d + w * depth[k]
                t = t * (1.0 - a)
                cnt = cnt + 1
                if t < T_MIN:
                    break
            rgb[y, x, 0] = r + t * bg[0]
            rgb[y, x, 1] = g + t * bg[1]
            rgb[y, x, 2] = b + t * bg[2]
            alpha[y, x] = 1.0 - t
            dimg[y, x] = d
            count[y, x] = cnt


def backward_rows(const double[:, ::1] mean2d, const double[:, ::1] conic, const double[::1] opac,
                  const double[:, ::1] colors, const long[:, ::1] bbox, const long[::1] order,
                  const double[::1] bg, int width, int row0, int row1,
                  const double[:, :, ::1] grad_rgb, const double[:, ::1] grad_alpha,
                  double[:, ::1] g_col, double[::1] g_op, double[:, ::1] g_mean, double[:, ::1] g_con):
    """Accumulate per-Gaussian gradients for the rows of one band (adds into the outputs)."""
    cdef Py_ssize_t n_sorted = order.shape[0]
    cdef long* hit_k = <long*> malloc(max(n_sorted, 1) * sizeof(long))
    cdef double* hit_a = <double*> malloc(max(n_sorted, 1) * sizeof(double))
    cdef double* hit_t = <double*> malloc(max(n_sorted, 1) * sizeof(double))
    cdef double* hit_g = <double*> malloc(max(n_sorted, 1) * sizeof(double))
    if hit_k == NULL or hit_a == NULL or hit_t == NULL or hit_g == NULL:
        free(hit_k); free(hit_a); free(hit_t); free(hit_g)
        raise MemoryError()
    try:
        with nogil:
            _backward(mean2d, conic, opac, colors, bbox, order, bg, width, row0, row1,
                      grad_rgb, grad_alpha, g_col, g_op, g_mean, g_con, hit_k, hit_a, hit_t, hit_g)
    finally:
        free(hit_k)
        free(hit_a)
        free(hit_t)
        free(hit_g)


cdef void _backward(const double[:, ::1] mean2d, const double[:, ::1] conic, const double[::1] opac,
                    const double[:, ::1] colors, const long[:, ::1] bbox, const long[::1] order,
                    const double[::1] bg, int width, int row0, int row1,
                    const double[:, :, ::1] grad_rgb, const double[:, ::1] grad_alpha,
                    double[:, ::1] g_col, double[::1] g_op, double[:, ::1] g_mean, double[:, ::1] g_con,
                    long* hit_k, double* hit_a, double* hit_t, double* hit_g) noexcept nogil:
    cdef Py_ssize_t n_sorted = order.shape[0]
    cdef Py_ssize_t s, h, nh
    cdef long k
    cdef int x, y, c
    cdef double t, dx, dy, m2, a, gs, raw, t_final, inv, ga, gm2
    cdef double s0, s1, s2, gr0, gr1, gr2, gA
    for y in range(row0, row1):
        for x in range(width):
            t = 1.0
            nh = 0
            for s in range(n_sorted):
                k = order[s]
                if x < bbox[k, 0] or x > bbox[k, 1] or y < bbox[k, 2] or y > bbox[k, 3]:
                    continue
                dx = x - mean2d[k, 0]
                dy = y - mean2d[k, 1]
                m2 = conic[k, 0] * dx * dx + 2.0 * conic[k, 1] * dx * dy + conic[k, 2] * dy * dy
                if m2 > SUPPORT:
                    continue
                gs = exp(-0.5 * m2)
                raw = opac[k] * gs
                a = raw
                if a > ALPHA_MAX:
                    a = ALPHA_MAX
                if a <= 0.0:
                    continue
                hit_k[nh] = k
                hit_a[nh] = a
                hit_t[nh] = t
                # negative marks a clamped alpha (no gradient through it)
                hit_g[nh] = gs if raw <= ALPHA_MAX else -1.0
                nh = nh + 1
                t = t * (1.0 - a)
                if t < T_MIN:
                    break
            if nh == 0:
                continue
            t_final = t
            gr0 = grad_rgb[y, x, 0]
            gr1 = grad_rgb[y, x, 1]
            gr2 = grad_rgb[y, x, 2]
            gA = grad_alpha[y, x]
            s0 = t_final * bg[0]
            s1 = t_final * bg[1]
            s2 = t_final * bg[2]
            for h in range(nh - 1, -1, -1):
                k = hit_k[h]
                a = hit_a[h]
                t = hit_t[h]
                g_col[k, 0] += gr0 * a * t
                g_col[k, 1] += gr1 * a * t
                g_col[k, 2] += gr2 * a * t
                inv = 1.0 / (1.0 - a)
                ga = (gr0 * (colors[k, 0] * t - s0 * inv)
                      + gr1 * (colors[k, 1] * t - s1 * inv)
                      + gr2 * (colors[k, 2] * t - s2 * inv)
                      + gA * t_final * inv)
                s0 = s0 + colors[k, 0] * a * t
                s1 = s1 + colors[k, 1] * a * t
                s2 = s2 + colors[k, 2] * a * t
                if hit_g[h] < 0.0:
                    continue
                dx = x - mean2d[k, 0]
                dy = y - mean2d[k, 1]
                g_op[k] += ga * hit_g[h]
                gm2 = ga * (-0.5 * a)
                g_mean[k, 0] += gm2 * (-2.0) * (conic[k, 0] * dx + conic[k, 1] * dy)
                g_mean[k, 1] += gm2 * (-2.0) * (conic[k, 1] * dx + conic[k, 2] * dy)
                g_con[k, 0] += gm2 * dx * dx
                g_con[k, 1] += gm2 * 2.0 * dx * dy
                g_con[k, 2] += gm2 * dy * dy
