# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batch kernels for the graph-convolution training loop.

Mirrors the call surface of ``pyref``; selected automatically at import when
built. The loops are written per sample so no batch-sized temporaries beyond
a few (n x C)/(K x n x s) scratch buffers are needed.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

NAME = "compiled"

cnp.import_array()


def batch_logits(double[:, :, ::1] a, double[:, :, ::1] u, double[:, :, ::1] w,
                 double[:, ::1] head_w, double[::1] head_b, bint relu):
    """Class scores for a batch: (B, num_classes)."""
    cdef Py_ssize_t K = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t B = u.shape[0], s = u.shape[1]
    cdef Py_ssize_t C = w.shape[2], L = head_b.shape[0]
    cdef cnp.ndarray[double, ndim=2] out = np.empty((B, L), dtype=np.float64)
    cdef double[:, ::1] logits = out
    cdef cnp.ndarray[double, ndim=2] hid_buf = np.empty((n, C), dtype=np.float64)
    cdef double[:, ::1] hidden = hid_buf
    cdef cnp.ndarray[double, ndim=2] agg_buf = np.empty((n, s), dtype=np.float64)
    cdef double[:, ::1] agg = agg_buf
    cdef Py_ssize_t b, k, i, j, t, c, l
    cdef double acc

    for b in range(B):
        hidden[:, :] = 0.0
        for k in range(K):
            # agg = A_k @ U^T for this sample
            for i in range(n):
                for t in range(s):
                    acc = 0.0
                    for j in range(n):
                        acc += a[k, i, j] * u[b, t, j]
                    agg[i, t] = acc
            for i in range(n):
                for c in range(C):
                    acc = 0.0
                    for t in range(s):
                        acc += agg[i, t] * w[k, t, c]
                    hidden[i, c] += acc
        if relu:
            for i in range(n):
                for c in range(C):
                    if hidden[i, c] < 0.0:
                        hidden[i, c] = 0.0
        for l in range(L):
            acc = head_b[l]
            for i in range(n):
                for c in range(C):
                    acc += hidden[i, c] * head_w[i * C + c, l]
            logits[b, l] = acc
    return out


def batch_grads(double[:, :, ::1] a, double[:, :, ::1] u, long long[::1] labels,
                double[:, :, ::1] w, double[:, ::1] head_w, double[::1] head_b,
                bint relu):
    """Summed cross-entropy loss and parameter gradients over a batch."""
    cdef Py_ssize_t K = a.shape[0], n = a.shape[1]
    cdef Py_ssize_t B = u.shape[0], s = u.shape[1]
    cdef Py_ssize_t C = w.shape[2], L = head_b.shape[0]

    cdef cnp.ndarray[double, ndim=3] d_a_buf = np.zeros((K, n, n), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=3] d_w_buf = np.zeros((K, s, C), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=2] d_hw_buf = np.zeros((n * C, L), dtype=np.float64)
    cdef cnp.ndarray[double, ndim=1] d_hb_buf = np.zeros(L, dtype=np.float64)
    cdef double[:, :, ::1] d_a = d_a_buf
    cdef double[:, :, ::1] d_w = d_w_buf
    cdef double[:, ::1] d_head_w = d_hw_buf
    cdef double[::1] d_head_b = d_hb_buf

    # Per-sample scratch, reused across the batch.
    scratch_agg = np.empty((K, n, s), dtype=np.float64)
    scratch_bmat = np.empty((K, n, C), dtype=np.float64)
    scratch_pre = np.empty((n, C), dtype=np.float64)
    scratch_dpre = np.empty((n, C), dtype=np.float64)
    scratch_logits = np.empty(L, dtype=np.float64)
    cdef double[:, :, ::1] agg = scratch_agg
    cdef double[:, :, ::1] bmat = scratch_bmat
    cdef double[:, ::1] pre = scratch_pre
    cdef double[:, ::1] dpre = scratch_dpre
    cdef double[::1] logits = scratch_logits

    cdef Py_ssize_t b, k, i, j, t, c, l, lab
    cdef double acc, mx, z, h
    cdef double loss_sum = 0.0

    for b in range(B):
        pre[:, :] = 0.0
        for k in range(K):
            for i in range(n):
                for t in range(s):
                    acc = 0.0
                    for j in range(n):
                        acc += a[k, i, j] * u[b, t, j]
                    agg[k, i, t] = acc
            for j in range(n):
                for c in range(C):
                    acc = 0.0
                    for t in range(s):
                        acc += u[b, t, j] * w[k, t, c]
                    bmat[k, j, c] = acc
            for i in range(n):
                for c in range(C):
                    acc = 0.0
                    for t in range(s):
                        acc += agg[k, i, t] * w[k, t, c]
                    pre[i, c] += acc

        # Head forward on the (relu'd) hidden state, flattened row-major.
        for l in range(L):
            acc = head_b[l]
            for i in range(n):
                for c in range(C):
                    h = pre[i, c]
                    if relu and h < 0.0:
                        h = 0.0
                    acc += h * head_w[i * C + c, l]
            logits[l] = acc

        # Stabilized softmax cross-entropy.
        mx = logits[0]
        for l in range(1, L):
            if logits[l] > mx:
                mx = logits[l]
        z = 0.0
        for l in range(L):
            z += exp(logits[l] - mx)
        lab = <Py_ssize_t> labels[b]
        loss_sum += log(z) - (logits[lab] - mx)
        for l in range(L):
            logits[l] = exp(logits[l] - mx) / z  # reuse buffer as d_logits
        logits[lab] -= 1.0

        for l in range(L):
            d_head_b[l] += logits[l]
        for i in range(n):
            for c in range(C):
                h = pre[i, c]
                if relu and h < 0.0:
                    h = 0.0
                acc = 0.0
                for l in range(L):
                    acc += head_w[i * C + c, l] * logits[l]
                    d_head_w[i * C + c, l] += h * logits[l]
                if relu and pre[i, c] <= 0.0:
                    acc = 0.0
                dpre[i, c] = acc

        for k in range(K):
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for c in range(C):
                        acc += dpre[i, c] * bmat[k, j, c]
                    d_a[k, i, j] += acc
            for t in range(s):
                for c in range(C):
                    acc = 0.0
                    for i in range(n):
                        acc += agg[k, i, t] * dpre[i, c]
                    d_w[k, t, c] += acc

    return loss_sum, d_a_buf, d_w_buf, d_hw_buf, d_hb_buf
