# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: information-form Schur elimination and scatter-add.

Same contract as ``hetfuse._fallback``; LAPACK is reached through scipy's
Cython bindings so no extra link step is required.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport fabs
from scipy.linalg.cython_lapack cimport dpotrf, dpotrs, dpocon

from .errors import SingularBlock

cnp.import_array()

RCOND_MIN = 1e-12


def marginalize_info(const double[:, ::1] lam, const double[::1] zeta,
                     const cnp.intp_t[::1] keep, const cnp.intp_t[::1] drop):
    cdef Py_ssize_t nk = keep.shape[0], nd = drop.shape[0]
    cdef Py_ssize_t a, b, c, r
    cdef double s, anorm = 0.0, rcond = 0.0
    cdef int n = <int>nd, nrhs = <int>(nk + 1), info = 0
    cdef char uplo = b'U'

    out_lam_arr = np.empty((nk, nk))
    out_zeta_arr = np.empty(nk)
    cdef double[:, ::1] out_lam = out_lam_arr
    cdef double[::1] out_zeta = out_zeta_arr

    if nd == 0:
        for a in range(nk):
            out_zeta[a] = zeta[keep[a]]
            for b in range(nk):
                out_lam[a, b] = lam[keep[a], keep[b]]
        return out_lam_arr, out_zeta_arr

    # column-major workspace; symmetric block so layout only matters for rhs
    chol_arr = np.empty((nd, nd), order="F")
    rhs_arr = np.empty((nd, nk + 1), order="F")
    work_arr = np.empty(3 * nd)
    iwork_arr = np.empty(nd, dtype=np.intc)
    cdef double[::1, :] chol = chol_arr
    cdef double[::1, :] rhs = rhs_arr
    cdef double[::1] work = work_arr
    cdef int[::1] iwork = iwork_arr

    for c in range(nd):
        s = 0.0
        for r in range(nd):
            chol[r, c] = lam[drop[r], drop[c]]
            s += fabs(chol[r, c])
        if s > anorm:
            anorm = s
    for r in range(nd):
        for c in range(nk):
            rhs[r, c] = lam[drop[r], keep[c]]
        rhs[r, nk] = zeta[drop[r]]

    dpotrf(&uplo, &n, &chol[0, 0], &n, &info)
    if info != 0:
        raise SingularBlock(f"eliminated block is not positive definite (potrf info={info})")
    dpocon(&uplo, &n, &chol[0, 0], &n, &anorm, &rcond, &work[0], &iwork[0], &info)
    if not rcond >= RCOND_MIN:
        raise SingularBlock(f"eliminated block is numerically singular (rcond={rcond:.3e})")
    dpotrs(&uplo, &n, &nrhs, &chol[0, 0], &n, &rhs[0, 0], &n, &info)

    # rhs now holds lam_dd^-1 [lam_dk | zeta_d]
    for a in range(nk):
        s = zeta[keep[a]]
        for r in range(nd):
            s -= lam[keep[a], drop[r]] * rhs[r, nk]
        out_zeta[a] = s
        for b in range(a, nk):
            s = lam[keep[a], keep[b]]
            for r in range(nd):
                s -= lam[keep[a], drop[r]] * rhs[r, b]
            out_lam[a, b] = s
    # only the upper triangle was formed; mirroring keeps the result exactly symmetric
    for a in range(nk):
        for b in range(a + 1, nk):
            out_lam[b, a] = out_lam[a, b]
    return out_lam_arr, out_zeta_arr


def scatter_add(double[:, ::1] lam, double[::1] zeta,
                const double[:, ::1] src_lam, const double[::1] src_zeta,
                const cnp.intp_t[::1] idx, double scale):
    cdef Py_ssize_t n = idx.shape[0], a, b
    for a in range(n):
        zeta[idx[a]] += scale * src_zeta[a]
        for b in range(n):
            lam[idx[a], idx[b]] += scale * src_lam[a, b]
