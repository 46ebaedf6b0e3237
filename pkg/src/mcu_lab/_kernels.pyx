# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled forward/backward passes of the one-hidden-layer tanh network.

Matrix products go through BLAS ``dgemm`` (via scipy's Cython bindings) on
the row-major buffers, read as their column-major transposes. The
activation uses numpy's vectorised tanh; the remaining elementwise work and
the per-sample outer products run as plain loops without the Python-level
temporaries of the numpy twin in ``_kernels_py``.
Results match that twin to rounding, not bit for bit.
"""

import numpy as np
from scipy.linalg.cython_blas cimport dgemm


cdef inline void _gemm(char ta, char tb, int m, int n, int k, double *a, int lda,
                       double *b, int ldb, double beta, double *c, int ldc) noexcept nogil:
    cdef double one = 1.0
    dgemm(&ta, &tb, &m, &n, &k, &one, a, &lda, b, &ldb, &beta, c, &ldc)


def forward_batch(double[:, ::1] W1, double[::1] b1, double[:, ::1] Wout,
                  double[::1] bout, double[:, ::1] X):
    """Return ``(H, logits)`` with ``H = tanh(X W1^T + b1)``."""
    cdef int N = X.shape[0], d = X.shape[1]
    cdef int hid = W1.shape[0], C = Wout.shape[0]
    cdef Py_ssize_t n, i, c
    H_arr = np.empty((N, hid))
    L_arr = np.empty((N, C))
    cdef double[:, ::1] H = H_arr
    cdef double[:, ::1] L = L_arr
    if N == 0:
        return H_arr, L_arr
    with nogil:
        for n in range(N):
            for i in range(hid):
                H[n, i] = b1[i]
            for c in range(C):
                L[n, c] = bout[c]
        # H^T (hid x N) += W1 (hid x d) X^T (d x N)
        _gemm(b'T', b'N', hid, N, d, &W1[0, 0], d, &X[0, 0], d, 1.0, &H[0, 0], hid)
    # numpy's vectorised tanh beats a scalar libm loop by an order of magnitude
    np.tanh(H_arr, out=H_arr)
    with nogil:
        # L^T (C x N) += Wout (C x hid) H^T (hid x N)
        _gemm(b'T', b'N', C, N, hid, &Wout[0, 0], hid, &H[0, 0], hid, 1.0, &L[0, 0], C)
    return H_arr, L_arr


cdef void _pre_activation_grads(double[:, ::1] Wout, double[:, ::1] H, double[:, ::1] g_h,
                                double[:, ::1] g_logits, double[:, ::1] dZ) noexcept nogil:
    # dZ = (g_h + g_logits Wout) * (1 - H^2)
    cdef int N = H.shape[0], hid = H.shape[1], C = Wout.shape[0]
    cdef Py_ssize_t n, i
    for n in range(N):
        for i in range(hid):
            dZ[n, i] = g_h[n, i]
    _gemm(b'N', b'N', hid, N, C, &Wout[0, 0], hid, &g_logits[0, 0], C, 1.0, &dZ[0, 0], hid)
    for n in range(N):
        for i in range(hid):
            dZ[n, i] = dZ[n, i] * (1.0 - H[n, i] * H[n, i])


def backward_batch(double[:, ::1] Wout, double[:, ::1] X, double[:, ::1] H,
                   double[:, ::1] g_h, double[:, ::1] g_logits):
    """Accumulate parameter gradients from upstream rep and logit gradients.

    Returns ``(dW1, db1, dWout, dbout)`` summed over rows.
    """
    cdef int N = X.shape[0], d = X.shape[1]
    cdef int hid = H.shape[1], C = Wout.shape[0]
    cdef Py_ssize_t n, i, c
    dW1_arr = np.zeros((hid, d))
    db1_arr = np.zeros(hid)
    dWout_arr = np.zeros((C, hid))
    dbout_arr = np.zeros(C)
    if N == 0:
        return dW1_arr, db1_arr, dWout_arr, dbout_arr
    dz_arr = np.empty((N, hid))
    cdef double[:, ::1] dW1 = dW1_arr
    cdef double[::1] db1 = db1_arr
    cdef double[:, ::1] dWout = dWout_arr
    cdef double[::1] dbout = dbout_arr
    cdef double[:, ::1] dZ = dz_arr
    with nogil:
        _pre_activation_grads(Wout, H, g_h, g_logits, dZ)
        # dW1^T (d x hid) = X^T (d x N) dZ (N x hid)
        _gemm(b'N', b'T', d, hid, N, &X[0, 0], d, &dZ[0, 0], hid, 0.0, &dW1[0, 0], d)
        # dWout^T (hid x C) = H^T (hid x N) g_logits (N x C)
        _gemm(b'N', b'T', hid, C, N, &H[0, 0], hid, &g_logits[0, 0], C, 0.0, &dWout[0, 0], hid)
        for n in range(N):
            for i in range(hid):
                db1[i] += dZ[n, i]
            for c in range(C):
                dbout[c] += g_logits[n, c]
    return dW1_arr, db1_arr, dWout_arr, dbout_arr


def per_sample_grads(double[:, ::1] Wout, double[:, ::1] X, double[:, ::1] H,
                     double[:, ::1] g_h, double[:, ::1] g_logits):
    """Per-row flattened gradients ``(N, n_params)`` in ``W1, b1, Wout, bout`` order."""
    cdef int N = X.shape[0], d = X.shape[1]
    cdef int hid = H.shape[1], C = Wout.shape[0]
    cdef Py_ssize_t P = hid * d + hid + C * hid + C
    cdef Py_ssize_t o_b1 = hid * d, o_wo = hid * d + hid, o_bo = hid * d + hid + C * hid
    cdef Py_ssize_t n, i, j, c
    cdef double dz, gl
    G_arr = np.empty((N, P))
    if N == 0:
        return G_arr
    dz_arr = np.empty((N, hid))
    cdef double[:, ::1] G = G_arr
    cdef double[:, ::1] dZ = dz_arr
    with nogil:
        _pre_activation_grads(Wout, H, g_h, g_logits, dZ)
        for n in range(N):
            for i in range(hid):
                dz = dZ[n, i]
                G[n, o_b1 + i] = dz
                for j in range(d):
                    G[n, i * d + j] = dz * X[n, j]
            for c in range(C):
                gl = g_logits[n, c]
                G[n, o_bo + c] = gl
                for i in range(hid):
                    G[n, o_wo + c * hid + i] = gl * H[n, i]
    return G_arr
