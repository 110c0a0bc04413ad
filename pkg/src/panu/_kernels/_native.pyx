# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled versions of the hot per-pixel kernels.

Function contracts match ``fallback.py``; integer outputs are identical,
float outputs agree to reassociation-level rounding (the module layer does
all final reductions with a shared deterministic tree sum).
"""

import numpy as np

from libc.math cimport ceil, sqrt


def es_per_pixel(double[:, :, ::1] samples, double[:, ::1] gt):
    cdef Py_ssize_t n = samples.shape[0]
    cdef Py_ssize_t m = samples.shape[1]
    out_arr = np.empty(n, dtype=np.float64)
    cdef double[::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double acc1, acc2, d0, d1
    with nogil:
        for i in range(n):
            acc1 = 0.0
            acc2 = 0.0
            for j in range(m):
                d0 = samples[i, j, 0] - gt[i, 0]
                d1 = samples[i, j, 1] - gt[i, 1]
                acc1 += sqrt(d0 * d0 + d1 * d1)
                for k in range(m):
                    d0 = samples[i, k, 0] - samples[i, j, 0]
                    d1 = samples[i, k, 1] - samples[i, j, 1]
                    acc2 += sqrt(d0 * d0 + d1 * d1)
            out[i] = acc1 / m - acc2 / (2.0 * m * m)
    return out_arr


def es_grad(double[:, :, ::1] samples, double[:, ::1] gt):
    cdef Py_ssize_t n = samples.shape[0]
    cdef Py_ssize_t m = samples.shape[1]
    out_arr = np.zeros((n, m, 2), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef double d0, d1, dist, g0, g1
    with nogil:
        for i in range(n):
            for j in range(m):
                d0 = samples[i, j, 0] - gt[i, 0]
                d1 = samples[i, j, 1] - gt[i, 1]
                dist = sqrt(d0 * d0 + d1 * d1)
                if dist > 0.0:
                    g0 = d0 / dist / m
                    g1 = d1 / dist / m
                else:
                    g0 = 0.0
                    g1 = 0.0
                for k in range(m):
                    d0 = samples[i, j, 0] - samples[i, k, 0]
                    d1 = samples[i, j, 1] - samples[i, k, 1]
                    dist = sqrt(d0 * d0 + d1 * d1)
                    if dist > 0.0:
                        g0 -= d0 / dist / (m * m)
                        g1 -= d1 / dist / (m * m)
                out[i, j, 0] = g0
                out[i, j, 1] = g1
    return out_arr


def nearest_center(double[:, ::1] targets, double[:, ::1] centers):
    cdef Py_ssize_t n = targets.shape[0]
    cdef Py_ssize_t nc = centers.shape[0]
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t i, c, best
    cdef double dy, dx, d, bestd
    with nogil:
        for i in range(n):
            best = 0
            bestd = 0.0
            for c in range(nc):
                dy = targets[i, 0] - centers[c, 0]
                dx = targets[i, 1] - centers[c, 1]
                d = dy * dy + dx * dx
                if c == 0 or d < bestd:
                    bestd = d
                    best = c
            out[i] = best
    return out_arr


def mode_votes(long long[:, ::1] votes, long long num_candidates):
    cdef Py_ssize_t n = votes.shape[0]
    cdef Py_ssize_t m = votes.shape[1]
    out_arr = np.empty(n, dtype=np.int64)
    cdef long long[::1] out = out_arr
    cdef Py_ssize_t i, j, k
    cdef long long v, best, count, bestcount
    with nogil:
        for i in range(n):
            best = votes[i, 0]
            bestcount = 0
            for j in range(m):
                v = votes[i, j]
                count = 0
                for k in range(m):
                    if votes[i, k] == v:
                        count += 1
                if count > bestcount or (count == bestcount and v < best):
                    bestcount = count
                    best = v
            out[i] = best
    return out_arr


def nms_peaks(double[:, ::1] heat, double threshold, long long kernel):
    cdef Py_ssize_t h = heat.shape[0]
    cdef Py_ssize_t w = heat.shape[1]
    cdef Py_ssize_t r = kernel // 2
    out_arr = np.zeros((h, w), dtype=bool)
    cdef unsigned char[:, ::1] out = out_arr.view(np.uint8)
    cdef Py_ssize_t y, x, ny, nx
    cdef double v
    cdef bint keep
    with nogil:
        for y in range(h):
            for x in range(w):
                v = heat[y, x]
                if v < threshold:
                    continue
                keep = True
                for ny in range(y - r, y + r + 1):
                    if ny < 0 or ny >= h:
                        continue
                    for nx in range(x - r, x + r + 1):
                        if nx < 0 or nx >= w or (ny == y and nx == x):
                            continue
                        if ny < y or (ny == y and nx < x):
                            if v <= heat[ny, nx]:
                                keep = False
                                break
                        else:
                            if v < heat[ny, nx]:
                                keep = False
                                break
                    if not keep:
                        break
                if keep:
                    out[y, x] = 1
    return out_arr


def bin_stats(double[::1] conf, double[::1] acc, long long nbins):
    cdef Py_ssize_t n = conf.shape[0]
    counts_arr = np.zeros(nbins, dtype=np.int64)
    conf_sums_arr = np.zeros(nbins, dtype=np.float64)
    acc_sums_arr = np.zeros(nbins, dtype=np.float64)
    cdef long long[::1] counts = counts_arr
    cdef double[::1] conf_sums = conf_sums_arr
    cdef double[::1] acc_sums = acc_sums_arr
    cdef Py_ssize_t i
    cdef long long idx
    cdef double c
    with nogil:
        for i in range(n):
            c = conf[i]
            idx = <long long>ceil(c * nbins) - 1
            if idx < 0:
                idx = 0
            elif idx >= nbins:
                idx = nbins - 1
            counts[idx] += 1
            conf_sums[idx] += c
            acc_sums[idx] += acc[i]
    return counts_arr, conf_sums_arr, acc_sums_arr
